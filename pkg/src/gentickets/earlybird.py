"""Early-bird tickets: batchnorm-scale channel masks, mask-distance
detection over a look-back window, and physical channel compression.

Channels are grouped by structure.  A group is the set of batchnorm
layers whose channels must be removed together (a residual skip ties the
block's last batchnorm to the one feeding the block), together with the
layers that produce those channels and the layers that consume them.
"""

import time
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from math import floor

import numpy as np

from .errors import ContractError, StructuralError, UnsupportedArchitectureError
from .flops import FlopLedger, count_flops, pass_cost
from .models import Trainer, build_model
from .nn import (BatchNorm2d, Conv2d, ConvTranspose2d, Flatten, Linear, ResidualBlock, Sequential,
                 Unflatten)

__all__ = [
    "ChannelGroup", "ChannelMask", "EBConfig", "EBReport", "EBVerdict", "MaskHistory",
    "apply_channel_mask", "channel_groups", "channel_mask", "compress", "count_flops",
    "detect_eb", "mask_distance", "run_earlybird", "training_ledger",
]

POOLINGS = ("global", "per_component")


# ---------------------------------------------------------------- structure

@dataclass
class ChannelGroup:
    bns: list
    size: int
    producers: list = field(default_factory=list)  # (layer path, axis, block)
    consumers: list = field(default_factory=list)

    @property
    def key(self):
        return min(self.bns)


def _out_axis(layer):
    return 1 if isinstance(layer, ConvTranspose2d) else 0


def _in_axis(layer):
    return 0 if isinstance(layer, ConvTranspose2d) else 1


class _Walker:
    def __init__(self):
        self.groups = []
        self.open = None
        self.producer = None
        self.flat_block = 1

    def weight_layer(self, path, layer, shape):
        if self.open is not None:
            self.open.consumers.append((path, _in_axis(layer), self.flat_block))
            self.open = None
        self.flat_block = 1
        self.producer = (path, _out_axis(layer), 1)

    def walk(self, seq, prefix, shape):
        for name, layer in seq.layers:
            path = f"{prefix}.{name}"
            if isinstance(layer, ResidualBlock):
                self.residual(layer, path, shape)
            elif isinstance(layer, Sequential):
                shape = self.walk(layer, path, shape)
                continue
            elif isinstance(layer, (Linear, Conv2d, ConvTranspose2d)):
                self.weight_layer(path, layer, shape)
            elif isinstance(layer, Unflatten):
                if self.producer is not None:
                    self.producer = (self.producer[0], self.producer[1], layer.h * layer.w)
            elif isinstance(layer, Flatten):
                self.flat_block = int(np.prod(shape[1:]))
            elif isinstance(layer, BatchNorm2d):
                if self.producer is None:
                    raise UnsupportedArchitectureError(f"batchnorm {path} has no producing layer")
                g = ChannelGroup(bns=[path], size=layer.channels, producers=[self.producer])
                self.groups.append(g)
                self.open, self.producer = g, None
            shape = layer.out_shape(shape)
        return shape

    def residual(self, block, path, shape):
        skip = self.open
        if skip is None:
            raise UnsupportedArchitectureError(f"residual block {path} is not fed by a batchnorm layer")
        layers = dict(block.layers)
        skip.consumers.append((f"{path}.conv1", 1, 1))
        inner = ChannelGroup(bns=[f"{path}.bn1"], size=layers["bn1"].channels,
                             producers=[(f"{path}.conv1", 0, 1)], consumers=[(f"{path}.conv2", 1, 1)])
        self.groups.append(inner)
        if layers["bn2"].channels != skip.size:
            raise StructuralError(f"residual block {path}: skip has {skip.size} channels, body {layers['bn2'].channels}")
        skip.bns.append(f"{path}.bn2")
        skip.producers.append((f"{path}.conv2", 0, 1))
        self.open = skip


def channel_groups(net):
    """All channel groups of ``net``, in network order."""
    groups = []
    for comp, (module, shape) in zip("ab", net.component_shapes()):
        w = _Walker()
        w.walk(module, comp, tuple(shape))
        if w.open is not None:
            raise StructuralError(f"batchnorm group {w.open.bns} has no consuming layer")
        groups.extend(w.groups)
    if not groups:
        raise UnsupportedArchitectureError(f"{net.config.family} has no batchnorm layers to rank")
    return groups


def _layers(net):
    out = {}

    def visit(module, path):
        if isinstance(module, Sequential):
            for name, layer in module.layers:
                visit(layer, f"{path}.{name}")
        out[path] = module

    visit(net.a, "a")
    visit(net.b, "b")
    return out


# ---------------------------------------------------------------- masks

@dataclass(frozen=True, eq=False)
class ChannelMask:
    """Keep-vectors per batchnorm layer plus the ratio they were cut at."""

    entries: dict
    ratio: float

    def __post_init__(self):
        clean = {}
        for k, v in self.entries.items():
            a = np.array(v, dtype=np.uint8).reshape(-1)
            if not np.isin(a, (0, 1)).all():
                raise ContractError(f"channel mask {k} is not binary")
            a.setflags(write=False)
            clean[k] = a
        object.__setattr__(self, "entries", clean)

    def total(self):
        return sum(v.size for v in self.entries.values())

    def kept(self):
        return sum(int(v.sum()) for v in self.entries.values())

    @property
    def pruned_fraction(self):
        return Fraction(self.total() - self.kept(), self.total())

    def __eq__(self, other):
        return (isinstance(other, ChannelMask) and self.entries.keys() == other.entries.keys()
                and all(np.array_equal(v, other.entries[k]) for k, v in self.entries.items()))

    __hash__ = None


def _component(group):
    return group.bns[0].split(".", 1)[0]


def _split_target(r, groups):
    """Per-component cut sizes summing to ``floor(r * channels)``; the
    leftover channels go to the components with the largest remainders."""
    sizes = {}
    for g in groups:
        sizes[_component(g)] = sizes.get(_component(g), 0) + g.size * len(g.bns)
    exact = {c: Fraction(str(r)) * n for c, n in sizes.items()}
    out = {c: floor(x) for c, x in exact.items()}
    spare = floor(sum(exact.values())) - sum(out.values())
    for c in sorted(exact, key=lambda c: (out[c] - exact[c], c))[:spare]:
        out[c] += 1
    return out


def channel_mask(net, r, groups=None, pooling="global"):
    """Prune the ``floor(r * channels)`` channels with smallest ``|gamma|``.

    Channels are ranked globally by ``|gamma|``, ties broken by layer name
    and then channel index.  A channel shared by a residual skip counts once
    per batchnorm layer it spans and is scored by the largest ``|gamma|``
    among them.  Every layer keeps at least one channel; a cut that would
    empty a layer is skipped in favour of the next candidate.

    ``pooling="per_component"`` runs the same ranking separately inside
    each component, so a GAN's generator and discriminator each lose
    about ``r`` of their channels instead of competing on one scale.
    """
    if not 0 < r < 1:
        raise ContractError(f"compression ratio must be in (0, 1), got {r}")
    if pooling not in POOLINGS:
        raise ContractError(f"unknown pooling {pooling!r}")
    groups = groups if groups is not None else channel_groups(net)
    params = net.parameters()
    units = []
    for gi, g in enumerate(groups):
        score = np.max([np.abs(params[f"{bn}.weight"].data) for bn in g.bns], axis=0)
        for c in range(g.size):
            units.append((float(score[c]), g.key, c, gi))
    units.sort()
    total = sum(g.size * len(g.bns) for g in groups)
    if pooling == "global":
        targets = {None: floor(Fraction(str(r)) * total)}
        pool = [None] * len(groups)
    else:
        targets = _split_target(r, groups)
        pool = [_component(g) for g in groups]
    keep = [np.ones(g.size, np.uint8) for g in groups]
    left = [g.size for g in groups]
    pruned = dict.fromkeys(targets, 0)
    for _, _, c, gi in units:
        w, key = len(groups[gi].bns), pool[gi]
        if left[gi] <= 1 or pruned[key] + w > targets[key]:
            continue
        keep[gi][c] = 0
        left[gi] -= 1
        pruned[key] += w
    entries = {}
    for g, k in zip(groups, keep):
        for bn in g.bns:
            entries[bn] = k
    order = [bn for g in groups for bn in g.bns]
    return ChannelMask({bn: entries[bn] for bn in sorted(order)}, float(r))


def mask_distance(a, b):
    """Normalized Hamming distance as an exact fraction."""
    if a.entries.keys() != b.entries.keys():
        raise ContractError("channel masks cover different layers")
    diff = total = 0
    for k, va in a.entries.items():
        vb = b.entries[k]
        if va.shape != vb.shape:
            raise ContractError(f"channel mask {k}: {va.size} vs {vb.size} channels")
        diff += int(np.count_nonzero(va != vb))
        total += va.size
    if total == 0:
        raise ContractError("empty channel masks")
    return Fraction(diff, total)


# ---------------------------------------------------------------- detection

@dataclass(frozen=True)
class EBConfig:
    delta: float = 0.1
    lookback: int = 5
    ratio: float = 0.5
    aggregation: str = "fifo_max"
    pooling: str = "global"

    def __post_init__(self):
        if not 0 < self.delta <= 1:
            raise ContractError(f"delta must be in (0, 1], got {self.delta}")
        if self.lookback < 1:
            raise ContractError("lookback must be >= 1")
        if not 0 < self.ratio < 1:
            raise ContractError(f"ratio must be in (0, 1), got {self.ratio}")
        if self.aggregation not in ("fifo_max", "consecutive"):
            raise ContractError(f"unknown aggregation {self.aggregation!r}")
        if self.pooling not in POOLINGS:
            raise ContractError(f"unknown pooling {self.pooling!r}")


class MaskHistory:
    """The last ``lookback`` channel masks with their epoch numbers."""

    def __init__(self, lookback=5):
        if lookback < 1:
            raise ContractError("lookback must be >= 1")
        self.lookback = lookback
        self.items = deque(maxlen=lookback)

    def push(self, epoch, mask):
        if self.items and epoch <= self.items[-1][0]:
            raise ContractError(f"epoch {epoch} does not follow {self.items[-1][0]}")
        self.items.append((epoch, mask))

    def __len__(self):
        return len(self.items)

    @property
    def full(self):
        return len(self.items) == self.lookback

    @property
    def epochs(self):
        return [e for e, _ in self.items]


@dataclass(frozen=True)
class EBVerdict:
    found: bool
    epoch: int | None
    distance: Fraction | None


def detect_eb(history, config):
    """Positive once the window is full and the newest mask is within
    ``delta`` of every older mask in it.  With ``consecutive`` aggregation
    every adjacent pair in the window must be within ``delta`` instead."""
    if not len(history):
        raise ContractError("detect_eb needs a non-empty history")
    epoch, newest = history.items[-1]
    if not history.full:
        return EBVerdict(False, None, None)
    masks = [m for _, m in history.items]
    if len(masks) == 1:
        return EBVerdict(True, epoch, Fraction(0))
    if config.aggregation == "consecutive":
        d = max(mask_distance(a, b) for a, b in zip(masks, masks[1:]))
    else:
        d = max(mask_distance(newest, m) for m in masks[:-1])
    found = d < Fraction(str(config.delta))
    return EBVerdict(found, epoch if found else None, d)


# ---------------------------------------------------------------- compression

def _take(a, axis, keep, block):
    idx = (np.repeat(np.flatnonzero(keep) * block, block) + np.tile(np.arange(block), int(keep.sum())))
    return np.ascontiguousarray(np.take(a, idx, axis=axis))


def apply_channel_mask(net, mask):
    """Copy of ``net`` with pruned channels' gamma and beta zeroed.

    This is the reference the compressed network must reproduce.
    """
    out = net.clone()
    params = out.parameters()
    for bn, keep in mask.entries.items():
        for suffix in ("weight", "bias"):
            p = params[f"{bn}.{suffix}"]
            p.data[...] = np.where(keep.astype(bool), p.data, 0.0)
    return out


def compress(net, mask, with_remap=False):
    """Physically remove pruned channels.

    Removes each pruned channel from its batchnorm layers, the producing
    filters and the matching input slices of every consumer.  With
    ``with_remap`` also returns ``remap(name, array)`` that slices any
    per-parameter array (optimizer moments) the same way.
    """
    groups = channel_groups(net)
    if sorted(b for g in groups for b in g.bns) != sorted(mask.entries):
        raise ContractError("channel mask does not match the network's batchnorm layers")
    out = apply_channel_mask(net, mask)
    layers = _layers(out)
    plan = {}  # param name -> [(axis, keep, block)]
    for g in groups:
        keep = mask.entries[g.bns[0]]
        for bn in g.bns[1:]:
            if not np.array_equal(mask.entries[bn], keep):
                raise StructuralError(f"residual group {g.bns} has mismatched keep-sets")
        if keep.sum() == 0:
            raise StructuralError(f"group {g.bns} would lose every channel")
        for bn in g.bns:
            for s in ("weight", "bias"):
                plan.setdefault(f"{bn}.{s}", []).append((0, keep, 1))
            layer = layers[bn]
            layer.running_mean = _take(layer.running_mean, 0, keep, 1)
            layer.running_var = _take(layer.running_var, 0, keep, 1)
        for path, axis, block in g.producers:
            plan.setdefault(f"{path}.weight", []).append((axis, keep, block))
            if layers[path].bias is not None:
                plan.setdefault(f"{path}.bias", []).append((0, keep, block))
        for path, axis, block in g.consumers:
            plan.setdefault(f"{path}.weight", []).append((axis, keep, block))

    def remap(name, a):
        for axis, keep, block in plan.get(name, ()):
            a = _take(a, axis, keep, block)
        return a

    for name, p in out.named_parameters():
        if name in plan:
            p.data = remap(name, p.data)
            p.grad = None
    if with_remap:
        return out, remap
    return out


# ---------------------------------------------------------------- runs

def training_ledger(net, steps, batch_size, ledger=None, precision="fp32"):
    """FLOPs of ``steps`` optimizer steps on ``net``, charged the way the
    trainer charges them."""
    ledger = ledger if ledger is not None else FlopLedger()
    cost = {w: pass_cost(m, s, precision) for w, (m, s) in zip("ab", net.component_shapes())}

    def charge(which, n, backward):
        f, b = cost[which]
        ledger.forward += f * n
        ledger.bytes_moved += b * n
        if backward:
            ledger.backward += 2 * f * n
            ledger.bytes_moved += 2 * b * n

    cfg = net.config
    for it in range(steps):
        if cfg.kind == "gan":
            charge("a", batch_size, False)
            charge("b", 2 * batch_size, True)
            if (it + 1) % cfg.critic_steps == 0:
                charge("a", batch_size, True)
                charge("b", batch_size, True)
        else:
            charge("a", batch_size, True)
            charge("b", batch_size, True)
    return ledger


@dataclass
class EBReport:
    verdict: EBVerdict
    detection_epoch: int | None
    mask: ChannelMask | None
    net: object = field(repr=False)
    ledger: FlopLedger
    dense_ledger: FlopLedger
    seconds: float
    distances: list
    train_report: object = field(default=None, repr=False)
    metrics: object = None
    dense_weights: int = 0
    seed: int = 0

    @property
    def found(self):
        return self.detection_epoch is not None

    @property
    def weights(self):
        return self.net.num_prunable()

    @property
    def weight_sparsity(self):
        return Fraction(self.dense_weights - self.weights, self.dense_weights)

    @property
    def flop_savings(self):
        return 1.0 - self.ledger.total / self.dense_ledger.total


def run_earlybird(config, seed, dataset, evaluator=None):
    """Train, check the channel mask each epoch, compress at detection and
    keep training the compressed network to the epoch budget."""
    eb = config.eb
    net = build_model(config.model, seed)
    groups = channel_groups(net)
    dense_prunable = net.num_prunable()
    settings = getattr(config, "train", None)
    trainer = Trainer(net, dataset, settings=settings, seed=seed, ledger=FlopLedger())
    history = MaskHistory(eb.lookback)
    found = {}
    distances = []
    n_channels = sum(g.size * len(g.bns) for g in groups)

    def check(tr, epoch):
        if found:
            return False
        m = channel_mask(tr.net, eb.ratio, groups, eb.pooling)
        tr.ledger.pruning += n_channels  # one ranking pass over |gamma|
        if len(history):
            distances.append(float(mask_distance(m, history.items[-1][1])))
        history.push(epoch + 1, m)
        v = detect_eb(history, eb)
        if v.found:
            small, remap = compress(tr.net, m, with_remap=True)
            tr.replace_network(small, remap)
            found.update(epoch=epoch + 1, mask=m, verdict=v)
        return False

    t0 = time.perf_counter()
    rep = trainer.run(config.epochs, epoch_callback=check)
    seconds = time.perf_counter() - t0
    final = trainer.net
    dense_ledger = training_ledger(build_model(config.model, seed), rep.final_iteration, trainer.settings.batch_size)
    metrics = None
    if evaluator is not None:
        metrics = evaluator(final)
    verdict = found.get("verdict", EBVerdict(False, None, None))
    return EBReport(verdict=verdict, detection_epoch=found.get("epoch"), mask=found.get("mask"), net=final,
                    ledger=trainer.ledger, dense_ledger=dense_ledger, seconds=seconds, distances=distances,
                    train_report=rep, metrics=metrics, dense_weights=dense_prunable, seed=seed)
