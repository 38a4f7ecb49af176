"""Desk-scale generative model zoo and its training loops.

Every network has two components: ``a`` (encoder or generator) and ``b``
(decoder or discriminator/critic).  Parameter names carry the component
prefix, e.g. ``a.fc.weight`` or ``b.conv1.weight``, which is what masks
and checkpoints key on.

The generator stack doubles as the (V)AE decoder, so a VAE decoder and a
DCGAN generator built from the same config have identical prunable shapes
in identical order; tickets can move between them.
"""

import copy
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .data import batches
from .errors import ConfigError, ContractError, NumericError, UsageError
from .flops import FlopLedger, pass_cost
from .nn import (BatchNorm2d, Conv2d, ConvTranspose2d, Flatten, LeakyReLU, Linear, ReLU,
                 ResidualBlock, Sequential, Tanh, Unflatten)
from .optim import OptimizerState, adam_step, zero_grad
from .spectral import SpectralState
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

AE_FAMILIES = ("linear_ae", "conv_ae")
VAE_FAMILIES = ("vae", "beta_vae", "resnet_vae")
GAN_FAMILIES = ("dcgan", "sngan", "wgan", "resnet_gan")
FAMILIES = AE_FAMILIES + VAE_FAMILIES + GAN_FAMILIES
LOGVAR_RANGE = (-30.0, 20.0)


@dataclass(frozen=True)
class ModelConfig:
    family: str = "dcgan"
    latent_dim: int = 32
    base_channels: int = 16
    image_size: int = 16
    channels: int = 1
    beta: float | None = None
    wgan_clip: float | None = None
    critic_steps: int | None = None
    hidden_dim: int | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown model family {self.family!r}")
        s = self.image_size
        if s < 8 or s & (s - 1):
            raise ConfigError(f"image_size must be a power of two >= 8, got {s}")
        if self.latent_dim < 1 or self.base_channels < 1:
            raise ConfigError("latent_dim and base_channels must be positive")
        beta = self.beta
        if beta is None:
            beta = 4.0 if self.family == "beta_vae" else 1.0
        if self.family == "vae" and beta != 1.0:
            raise ConfigError("family 'vae' requires beta == 1; use 'beta_vae'")
        if beta <= 0 and self.family == "beta_vae":
            raise ConfigError("beta_vae requires beta > 0")
        object.__setattr__(self, "beta", float(beta))
        if self.family == "wgan":
            clip = 0.01 if self.wgan_clip is None else self.wgan_clip
            if clip <= 0:
                raise ConfigError("wgan_clip must be positive")
            object.__setattr__(self, "wgan_clip", float(clip))
        steps = self.critic_steps
        if steps is None:
            steps = 5 if self.family == "wgan" else 1
        if steps < 1:
            raise ConfigError("critic_steps must be >= 1")
        object.__setattr__(self, "critic_steps", int(steps))
        if self.hidden_dim is None:
            object.__setattr__(self, "hidden_dim", 8 * self.base_channels)

    @property
    def kind(self):
        if self.family in AE_FAMILIES:
            return "ae"
        return "vae" if self.family in VAE_FAMILIES else "gan"

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class GenerativeNetwork:
    """Two named components plus the config that built them."""

    def __init__(self, config, a, b):
        self.config = config
        self.a = a
        self.b = b
        self.family = config.family
        self._assign_names()

    # aliases matching the usual vocabulary
    @property
    def encoder(self):
        return self.a

    generator = encoder

    @property
    def decoder(self):
        return self.b

    discriminator = decoder

    def _assign_names(self):
        for name, p in self.named_parameters():
            p.name = name

    def component(self, which):
        return {"a": self.a, "b": self.b}[which]

    def input_shape(self, which):
        cfg = self.config
        image = (cfg.channels, cfg.image_size, cfg.image_size)
        latent = (cfg.latent_dim,)
        if cfg.kind == "gan":
            return latent if which == "a" else image
        return image if which == "a" else latent

    def component_shapes(self):
        return [(self.a, self.input_shape("a")), (self.b, self.input_shape("b"))]

    def named_parameters(self):
        return self.a.named_parameters("a") + self.b.named_parameters("b")

    def parameters(self):
        return dict(self.named_parameters())

    def component_parameters(self, which):
        return [p for n, p in self.named_parameters() if n.startswith(which + ".")]

    def prunable(self):
        return {n: p for n, p in self.named_parameters() if p.kind.prunable}

    def num_parameters(self):
        return sum(p.size for _, p in self.named_parameters())

    def num_prunable(self):
        return sum(p.size for p in self.prunable().values())

    def named_buffers(self):
        return self.a.named_buffers("a") + self.b.named_buffers("b")

    def state_dict(self):
        """Copies of every parameter and buffer array, keyed by name."""
        out = {n: p.data.copy() for n, p in self.named_parameters()}
        for n, buf in self.named_buffers():
            out[n] = (buf.u if isinstance(buf, SpectralState) else buf).copy()
        return out

    def load_state_dict(self, state, strict=True):
        params = self.parameters()
        bufs = dict(self.named_buffers())
        missing = [n for n in list(params) + list(bufs) if n not in state]
        if strict and missing:
            raise ContractError(f"state is missing entries: {missing[:5]}")
        for n, p in params.items():
            if n in state:
                if state[n].shape != p.shape:
                    raise ContractError(f"shape mismatch for {n}: {state[n].shape} vs {p.shape}")
                p.data[...] = state[n]
        for n, buf in bufs.items():
            if n in state:
                if isinstance(buf, SpectralState):
                    buf.u = state[n].copy()
                else:
                    buf[...] = state[n]

    def train(self, mode=True):
        self.a.train(mode)
        self.b.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def clone(self):
        return copy.deepcopy(self)

    def flops_per_sample(self):
        return {w: pass_cost(m, s)[0] for w, (m, s) in zip("ab", self.component_shapes())}


# ---------------------------------------------------------------- builders

def _stages(size):
    return int(math.log2(size // 4))


def _generator(cfg, rng, residual):
    n_up = _stages(cfg.image_size)
    c0 = cfg.base_channels * 2 ** (n_up - 1)
    layers = [
        ("fc", Linear(cfg.latent_dim, c0 * 16, bias=False, rng=rng)),
        ("unflatten", Unflatten(4, 4)),
        ("bn0", BatchNorm2d(c0)),
        ("act0", ReLU()),
    ]
    if residual:
        layers.append(("res0", ResidualBlock(c0, "relu", rng=rng)))
    cin = c0
    for i in range(1, n_up + 1):
        if i < n_up:
            cout = cin // 2
            layers += [
                (f"up{i}", ConvTranspose2d(cin, cout, 4, 2, 1, bias=False, rng=rng)),
                (f"bn{i}", BatchNorm2d(cout)),
                (f"act{i}", ReLU()),
            ]
            if residual and i == 1:
                layers.append((f"res{i}", ResidualBlock(cout, "relu", rng=rng)))
            cin = cout
        else:
            layers += [
                (f"up{i}", ConvTranspose2d(cin, cfg.channels, 4, 2, 1, bias=True, rng=rng)),
                ("out", Tanh()),
            ]
    return Sequential(layers)


def _downsampler(cfg, rng, out_features, residual=False, batchnorm=True, spectral=False):
    n_down = _stages(cfg.image_size)
    layers = []
    cin = cfg.channels
    for i in range(1, n_down + 1):
        cout = cfg.base_channels * 2 ** (i - 1)
        conv = Conv2d(cin, cout, 4, 2, 1, bias=not batchnorm, rng=rng)
        layers.append((f"conv{i}", conv))
        if batchnorm:
            layers.append((f"bn{i}", BatchNorm2d(cout)))
        layers.append((f"act{i}", LeakyReLU()))
        if residual and i <= 2:
            layers.append((f"res{i}", ResidualBlock(cout, "leaky_relu", rng=rng)))
        cin = cout
    layers += [("flatten", Flatten()), ("fc", Linear(cin * 16, out_features, rng=rng))]
    seq = Sequential(layers)
    if spectral:
        for layer, _ in _leaf_layers(seq):
            if isinstance(layer, (Conv2d, Linear)):
                layer.spectral = SpectralState.for_weight(layer.weight.shape, rng)
    return seq


def _leaf_layers(module, prefix=""):
    if isinstance(module, Sequential):
        for name, layer in module.layers:
            yield from _leaf_layers(layer, f"{prefix}.{name}" if prefix else name)
    else:
        yield module, prefix


def _mlp_encoder(cfg, rng):
    d = cfg.channels * cfg.image_size ** 2
    return Sequential([
        ("flatten", Flatten()),
        ("fc1", Linear(d, cfg.hidden_dim, rng=rng)),
        ("act1", ReLU()),
        ("fc2", Linear(cfg.hidden_dim, cfg.latent_dim, rng=rng)),
    ])


def _mlp_decoder(cfg, rng):
    d = cfg.channels * cfg.image_size ** 2
    return Sequential([
        ("fc1", Linear(cfg.latent_dim, cfg.hidden_dim, rng=rng)),
        ("act1", ReLU()),
        ("fc2", Linear(cfg.hidden_dim, d, rng=rng)),
        ("out", Tanh()),
        ("unflatten", Unflatten(cfg.image_size, cfg.image_size)),
    ])


def build_model(config, rng_seed=0):
    """Construct a freshly initialised network; deterministic in ``(config, rng_seed)``."""
    if not isinstance(config, ModelConfig):
        config = ModelConfig(**config)
    rng = np.random.default_rng(rng_seed)
    fam = config.family
    residual = fam.startswith("resnet")
    if fam == "linear_ae":
        a, b = _mlp_encoder(config, rng), _mlp_decoder(config, rng)
    elif config.kind in ("ae", "vae"):
        out = config.latent_dim * (2 if config.kind == "vae" else 1)
        a = _downsampler(config, rng, out, residual=residual)
        b = _generator(config, rng, residual)
    else:
        a = _generator(config, rng, residual)
        b = _downsampler(config, rng, 1, residual=residual,
                         batchnorm=fam != "sngan", spectral=fam == "sngan")
    net = GenerativeNetwork(config, a, b)
    log.debug("built %s with %d parameters", fam, net.num_parameters())
    return net


# ---------------------------------------------------------------- sampling

def reparameterize(mu, logvar, rng=None, eps=None):
    """``mu + exp(logvar / 2) * eps`` with ``eps ~ N(0, I)`` held constant.

    ``logvar`` is clamped to [-30, 20] before exponentiation.
    """
    if mu.shape != logvar.shape:
        raise ContractError(f"reparameterize: mu {mu.shape} vs logvar {logvar.shape}")
    if eps is None:
        rng = rng if rng is not None else np.random.default_rng()
        eps = rng.standard_normal(mu.shape)
    eps = np.asarray(eps, dtype=np.float64)
    std = F.exp(F.mul(F.clamp(logvar, *LOGVAR_RANGE), 0.5))
    return F.add(mu, F.mul(std, Tensor(eps)))


def split_moments(h, latent_dim):
    return F.getitem(h, (slice(None), slice(0, latent_dim))), F.getitem(h, (slice(None), slice(latent_dim, None)))


def _rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def generate(net, n, rng=None, batch_size=256):
    """Sample ``n`` images from a GAN generator or VAE decoder (eval mode)."""
    cfg = net.config
    if cfg.kind == "ae":
        raise UsageError(f"{cfg.family} does not model a latent prior; use reconstruct(net, images)")
    rng = _rng(rng)
    z = rng.standard_normal((n, cfg.latent_dim))
    dec = net.a if cfg.kind == "gan" else net.b
    return _run_eval(net, dec, z, batch_size, (cfg.channels, cfg.image_size, cfg.image_size))


def reconstruct(net, images, batch_size=256):
    """Encode and decode ``images``; VAEs decode the posterior mean."""
    cfg = net.config
    if cfg.kind == "gan":
        raise UsageError("GANs have no encoder; use generate(net, n, rng)")

    def ae(x):
        h = net.a(x)
        if cfg.kind == "vae":
            h = F.getitem(h, (slice(None), slice(0, cfg.latent_dim)))
        return net.b(h)

    return _run_eval(net, ae, np.asarray(images), batch_size, images.shape[1:])


def _run_eval(net, fn, inputs, batch_size, out_shape):
    was = net.a.training
    net.eval()
    try:
        outs = [fn(Tensor(inputs[i:i + batch_size])).data for i in range(0, len(inputs), batch_size)]
    finally:
        net.train(was)
    if not outs:
        return np.zeros((0,) + tuple(out_shape))
    return np.concatenate(outs)


def discriminator_scores(net, images, batch_size=256):
    """Raw discriminator outputs (logits, or critic values for WGAN)."""
    return _run_eval(net, net.b, np.asarray(images), batch_size, (1,)).reshape(-1)


# ---------------------------------------------------------------- training

@dataclass
class TrainSettings:
    """Optimizer and batching knobs; ``None`` picks the family default."""

    batch_size: int = 64
    lr: float | None = None
    lr_b: float | None = None
    betas: tuple | None = None
    validate: bool = True

    def resolved(self, kind):
        lr = self.lr if self.lr is not None else (2e-4 if kind == "gan" else 1e-3)
        lr_b = self.lr_b if self.lr_b is not None else lr
        betas = self.betas if self.betas is not None else ((0.5, 0.999) if kind == "gan" else (0.9, 0.999))
        return lr, lr_b, tuple(betas)


@dataclass
class TrainReport:
    curves: dict = field(default_factory=dict)
    seconds: float = 0.0
    flops: list = field(default_factory=list)
    final_iteration: int = 0
    checkpoints: dict = field(default_factory=dict)
    ledger: FlopLedger = field(default_factory=FlopLedger)
    start_epoch: int = 0

    @property
    def epochs(self):
        return len(self.flops)


def mask_entries(net, mask):
    """Validate a mask against ``net``; return ``[(param, array)]``."""
    if mask is None:
        return []
    entries = getattr(mask, "entries", mask)
    params = net.parameters()
    bad = [n for n, m in entries.items() if n not in params or params[n].shape != np.shape(m)]
    if bad:
        raise ContractError(f"mask does not match network parameters: {bad}")
    return [(params[n], np.asarray(m, dtype=np.float64)) for n, m in sorted(entries.items())]


class Trainer:
    """Stateful training loop; one instance owns its optimizers and RNG.

    Data order and noise for epoch ``e`` come from ``default_rng([seed, e])``,
    so a run restarted at an epoch boundary sees the same batches as the
    original would have.
    """

    def __init__(self, net, dataset, mask=None, settings=None, seed=0, ledger=None):
        self.net = net
        self.dataset = dataset
        self.cfg = net.config
        self.settings = settings or TrainSettings()
        self.seed = seed
        self.ledger = ledger if ledger is not None else FlopLedger()
        self.masked = mask_entries(net, mask)
        self._mask_obj = mask
        lr, lr_b, betas = self.settings.resolved(self.cfg.kind)
        if self.cfg.kind == "gan":
            self.opt_a = OptimizerState(lr=lr, betas=betas)
            self.opt_b = OptimizerState(lr=lr_b, betas=betas, clip=self.cfg.wgan_clip)
        else:
            self.opt = OptimizerState(lr=lr, betas=betas)
        self.iteration = 0
        self.apply_mask()
        self._costs = None

    @property
    def steps_per_epoch(self):
        n, bs = len(self.dataset.train_x), self.settings.batch_size
        return n // bs if n >= bs else 1

    def apply_mask(self):
        for p, m in self.masked:
            p.data *= m

    def _mask_grads(self):
        for p, m in self.masked:
            if p.grad is not None:
                p.grad *= m

    def replace_network(self, net, remap=None):
        """Swap in a structurally changed network (channel compression).

        ``remap(name, array)`` slices optimizer moments to the new shapes;
        without it the moments are reset.
        """
        self.net = net
        self._costs = None
        opts = [self.opt_a, self.opt_b] if self.cfg.kind == "gan" else [self.opt]
        for opt in opts:
            for store in (opt.m, opt.v):
                for name in list(store):
                    store[name] = remap(name, store[name]) if remap else np.zeros_like(store[name])
        self.masked = mask_entries(net, self._mask_obj) if self._mask_obj is not None else []

    # -- accounting
    def _charge(self, which, batch, backward):
        if self._costs is None:
            self._costs = {w: pass_cost(m, s) for w, (m, s) in zip("ab", self.net.component_shapes())}
        flops, nbytes = self._costs[which]
        self.ledger.forward += flops * batch
        self.ledger.bytes_moved += nbytes * batch
        if backward:
            self.ledger.backward += 2 * flops * batch
            self.ledger.bytes_moved += 2 * nbytes * batch

    # -- single steps
    def _step(self, params, opt, loss, tape):
        zero_grad(self.net.parameters().values())
        tape.backward(loss)
        self._mask_grads()
        adam_step(params, opt)
        self.apply_mask()

    def _ae_step(self, x, rng):
        net = self.net
        with Tape() as tape:
            recon = net.b(net.a(Tensor(x)))
            loss = F.mse_loss(recon, x)
        self._step(list(net.parameters().values()), self.opt, loss, tape)
        self._charge("a", len(x), True)
        self._charge("b", len(x), True)
        return {"reconstruction": loss.item()}

    def _vae_step(self, x, rng):
        net, cfg = self.net, self.cfg
        eps = rng.standard_normal((len(x), cfg.latent_dim))
        with Tape() as tape:
            mu, logvar = split_moments(net.a(Tensor(x)), cfg.latent_dim)
            z = reparameterize(mu, logvar, eps=eps)
            rec = F.mse_loss(net.b(z), x, reduction="sum_per_sample")
            kl = F.gaussian_kl_loss(mu, logvar, beta=1.0)
            total = F.add(rec, F.mul(kl, cfg.beta))
        self._step(list(net.parameters().values()), self.opt, total, tape)
        self._charge("a", len(x), True)
        self._charge("b", len(x), True)
        return {"reconstruction": rec.item(), "kl": kl.item(), "total": total.item()}

    def _critic_loss(self, real, fake):
        if self.cfg.family == "wgan":
            return F.sub(F.mean(fake), F.mean(real))
        return F.add(F.bce_with_logits_loss(real, 1.0), F.bce_with_logits_loss(fake, 0.0))

    def _gan_d_step(self, x, rng):
        net = self.net
        z = rng.standard_normal((len(x), self.cfg.latent_dim))
        fake = net.a(Tensor(z)).data  # outside any tape: detached
        with Tape() as tape:
            loss = self._critic_loss(net.b(Tensor(x)), net.b(Tensor(fake)))
        self._step(self.net.component_parameters("b"), self.opt_b, loss, tape)
        self._charge("a", len(x), False)
        self._charge("b", 2 * len(x), True)
        return loss.item()

    def _gan_g_step(self, n, rng):
        net = self.net
        z = rng.standard_normal((n, self.cfg.latent_dim))
        with Tape() as tape:
            score = net.b(net.a(Tensor(z)))
            if self.cfg.family == "wgan":
                loss = F.mul(F.mean(score), -1.0)
            else:
                loss = F.bce_with_logits_loss(score, 1.0)
        self._step(self.net.component_parameters("a"), self.opt_a, loss, tape)
        self._charge("a", n, True)
        self._charge("b", n, True)
        return loss.item()

    # -- epochs
    def run_epoch(self, epoch, skip=0):
        """Train one epoch; returns mean losses keyed by curve name."""
        rng = np.random.default_rng([self.seed, epoch])
        data = self.dataset.train_x
        sums, counts = {}, {}

        def add(k, v):
            sums[k] = sums.get(k, 0.0) + v
            counts[k] = counts.get(k, 0) + 1

        kind = self.cfg.kind
        for bi, idx in enumerate(batches(len(data), self.settings.batch_size, rng)):
            if bi < skip:
                continue
            x = data[idx]
            if kind == "ae":
                for k, v in self._ae_step(x, rng).items():
                    add(k, v)
            elif kind == "vae":
                for k, v in self._vae_step(x, rng).items():
                    add(k, v)
            else:
                add("discriminator", self._gan_d_step(x, rng))
                if (self.iteration + 1) % self.cfg.critic_steps == 0:
                    add("generator", self._gan_g_step(len(x), rng))
            self.iteration += 1
            self._maybe_snapshot()
        return {k: sums[k] / counts[k] for k in sums}

    def _maybe_snapshot(self):
        if self.iteration in self._wanted:
            self._report.checkpoints[self.iteration] = self.net.state_dict()

    def validation_loss(self):
        x = self.dataset.test_x
        recon = reconstruct(self.net, x)
        return float(np.mean((recon - x) ** 2))

    def run(self, epochs, checkpoint_at=(), start_iteration=0, epoch_callback=None):
        """Train until iteration ``epochs * steps_per_epoch``.

        ``epoch_callback(trainer, epoch)`` runs after each epoch; returning
        True stops training early.
        """
        spe = self.steps_per_epoch
        self._wanted = set(int(i) for i in checkpoint_at)
        self._report = report = TrainReport(ledger=self.ledger)
        self.iteration = start_iteration
        if self.iteration in self._wanted:
            report.checkpoints[self.iteration] = self.net.state_dict()
        t0 = time.perf_counter()
        first = start_iteration // spe
        report.start_epoch = first
        self.net.train()
        for epoch in range(first, epochs):
            try:
                losses = self.run_epoch(epoch, skip=start_iteration - epoch * spe if epoch == first else 0)
                if self.cfg.kind != "gan" and self.settings.validate:
                    losses["val_reconstruction"] = self.validation_loss()
            except NumericError as e:
                raise NumericError(f"epoch {epoch}: {e}") from e
            for k, v in losses.items():
                report.curves.setdefault(k, []).append(v)
            report.flops.append(self.ledger.total)
            if epoch_callback is not None and epoch_callback(self, epoch):
                break
        report.seconds = time.perf_counter() - t0
        report.final_iteration = self.iteration
        return report


def train(net, dataset, epochs, mask=None, checkpoint_at=(), settings=None, seed=0,
          start_iteration=0, ledger=None):
    """Train ``net`` in place and return a :class:`TrainReport`.

    Masked weights are zeroed before training and after every optimizer
    step.  ``checkpoint_at`` lists iteration indices (optimizer steps
    completed) at which a full state snapshot is kept.
    """
    trainer = Trainer(net, dataset, mask=mask, settings=settings, seed=seed, ledger=ledger)
    return trainer.run(epochs, checkpoint_at=checkpoint_at, start_iteration=start_iteration)
