"""Lottery-ticket machinery: global magnitude masks, iterative and one-shot
pruning with late rewinding, random tickets, ticket transfer between
components, and the SNIP / GraSP pruning-at-init baselines.

Only conv kernels and linear weights are ever masked.  Sparsity on a
:class:`TicketState` is measured against the weights in the mask's scope;
``full_sparsity`` is measured against every prunable weight of the network
and is what reports plot.
"""

import logging
import warnings
from dataclasses import dataclass, field, replace
from fractions import Fraction
from math import floor

import numpy as np

from . import functional as F
from .errors import ContractError, DegenerateSaliencyError, IncompatibleError, NumericError
from .models import Trainer, build_model, reparameterize, split_moments, train
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

SCOPES = {
    "both_components": ("a", "b"),
    "component_a_only": ("a",),
    "component_b_only": ("b",),
}


class EmptyLayerWarning(UserWarning):
    """Global pruning removed every weight of some layer."""


def scope_names(net, scope):
    """Prunable parameter names in ``scope``, in network order."""
    if scope not in SCOPES:
        raise ContractError(f"unknown scope {scope!r}; expected one of {sorted(SCOPES)}")
    comps = SCOPES[scope]
    return [n for n, p in net.named_parameters() if p.kind.prunable and n.split(".", 1)[0] in comps]


def _frozen(a):
    a = np.array(a, dtype=np.uint8)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary keep-masks for the prunable parameters in ``scope``."""

    entries: dict
    scope: str = "both_components"

    def __post_init__(self):
        if self.scope not in SCOPES:
            raise ContractError(f"unknown scope {self.scope!r}")
        clean = {}
        for name, m in self.entries.items():
            arr = np.asarray(m)
            if arr.size and not np.isin(arr, (0, 1)).all():
                raise ContractError(f"mask entry {name} is not binary")
            clean[name] = _frozen(arr)
        object.__setattr__(self, "entries", clean)

    @classmethod
    def dense(cls, net, scope="both_components"):
        params = net.parameters()
        return cls({n: np.ones(params[n].shape, np.uint8) for n in scope_names(net, scope)}, scope)

    def kept(self):
        return sum(int(m.sum()) for m in self.entries.values())

    def total(self):
        return sum(m.size for m in self.entries.values())

    @property
    def sparsity(self):
        total = self.total()
        return Fraction(total - self.kept(), total) if total else Fraction(0)

    def full_sparsity(self, net):
        """Pruned weights over all prunable weights of ``net``."""
        return Fraction(self.total() - self.kept(), net.num_prunable())

    def validate(self, net):
        names = scope_names(net, self.scope)
        if sorted(names) != sorted(self.entries):
            extra = sorted(set(self.entries) - set(names))
            missing = sorted(set(names) - set(self.entries))
            raise ContractError(f"mask does not cover scope {self.scope}: extra={extra} missing={missing}")
        params = net.parameters()
        for n in names:
            if params[n].shape != self.entries[n].shape:
                raise ContractError(f"mask entry {n} has shape {self.entries[n].shape}, "
                                    f"parameter has {params[n].shape}")
        return self

    def __eq__(self, other):
        if not isinstance(other, Mask) or self.scope != other.scope or self.entries.keys() != other.entries.keys():
            return False
        return all(np.array_equal(v, other.entries[k]) for k, v in self.entries.items())

    __hash__ = None

    def leq(self, other):
        """True if every weight kept here is also kept in ``other``."""
        return all((self.entries[k] <= other.entries[k]).all() for k in self.entries)

    def summary(self):
        """Plain-text per-layer kept/total table."""
        lines = [f"scope {self.scope}"]
        width = max((len(n) for n in self.entries), default=4)
        for n, m in self.entries.items():
            kept = int(m.sum())
            lines.append(f"{n:<{width}}  {kept:>8d} / {m.size:<8d}  {kept / max(m.size, 1):7.2%} kept")
        lines.append(f"{'total':<{width}}  {self.kept():>8d} / {self.total():<8d}  "
                     f"{float(self.sparsity):7.2%} pruned")
        return "\n".join(lines) + "\n"


def apply_mask(net, mask):
    """Zero pruned weights of ``net`` in place."""
    params = net.parameters()
    for n, m in mask.entries.items():
        p = params[n]
        p.data[...] = np.where(m.astype(bool), p.data, 0.0)
    return net


# ---------------------------------------------------------------- ranking

def _keep_top(net, mask, scores, n_keep):
    """Keep the ``n_keep`` highest-scoring weights among those ``mask`` keeps.

    Ties go to the parameter name that sorts first, then the lower flat
    index, so the cut is fully deterministic.
    """
    names = sorted(mask.entries)
    flat_scores, flat_alive, sizes = [], [], []
    for n in names:
        flat_scores.append(np.asarray(scores[n], dtype=np.float64).reshape(-1))
        flat_alive.append(mask.entries[n].reshape(-1).astype(bool))
        sizes.append(mask.entries[n].size)
    s = np.concatenate(flat_scores) if names else np.zeros(0)
    alive = np.concatenate(flat_alive) if names else np.zeros(0, bool)
    cand = np.flatnonzero(alive)
    if not 0 <= n_keep <= cand.size:
        raise ContractError(f"cannot keep {n_keep} of {cand.size} surviving weights")
    if np.isnan(s[cand]).any():
        raise NumericError("pruning scores contain NaN")
    order = cand[np.argsort(-s[cand], kind="stable")]
    new = np.zeros(s.size, np.uint8)
    new[order[:n_keep]] = 1
    entries, start = {}, 0
    for n, size in zip(names, sizes):
        entries[n] = new[start:start + size].reshape(mask.entries[n].shape)
        start += size
    out = Mask({n: entries[n] for n in mask.entries}, mask.scope)
    emptied = [n for n in mask.entries if out.entries[n].sum() == 0 and mask.entries[n].sum() > 0]
    if emptied:
        warnings.warn(f"global pruning emptied layers: {emptied}", EmptyLayerWarning, stacklevel=3)
    return out


def _magnitudes(net, mask):
    params = net.parameters()
    return {n: np.abs(params[n].data) for n in mask.entries}


def global_magnitude_prune(net, current, p):
    """Zero the ``floor(p * surviving)`` smallest-magnitude surviving weights,
    pooled across every layer in the mask's scope."""
    p = Fraction(str(p)) if not isinstance(p, Fraction) else p
    if not 0 < p < 1:
        raise ContractError(f"prune fraction must be in (0, 1), got {p}")
    current.validate(net)
    alive = current.kept()
    return _keep_top(net, current, _magnitudes(net, current), alive - floor(p * alive))


def prune_to_sparsity(net, current, target):
    """Magnitude-prune surviving weights until the in-scope sparsity is
    ``floor(target * N) / N``."""
    target = Fraction(str(target)) if not isinstance(target, Fraction) else target
    if not 0 <= target < 1:
        raise ContractError(f"target sparsity must be in [0, 1), got {target}")
    current.validate(net)
    n = current.total()
    keep = n - floor(target * n)
    if keep > current.kept():
        raise ContractError(f"target {float(target):.4f} is below the current sparsity "
                            f"{float(current.sparsity):.4f}")
    return _keep_top(net, current, _magnitudes(net, current), keep)


# ---------------------------------------------------------------- schedule and tickets

@dataclass(frozen=True)
class PruneSchedule:
    """``rewind_iteration=None`` means the end of the first epoch."""

    p: float = 0.2
    rounds: int = 20
    rewind_iteration: int | None = None
    strategy: str = "iterative"

    def __post_init__(self):
        if not 0 < Fraction(str(self.p)) < 1:
            raise ContractError(f"per-round fraction must be in (0, 1), got {self.p}")
        if self.rounds < 0:
            raise ContractError("rounds must be >= 0")
        if self.strategy not in ("iterative", "one_shot"):
            raise ContractError(f"unknown strategy {self.strategy!r}")
        if self.rewind_iteration is not None and self.rewind_iteration < 0:
            raise ContractError("rewind_iteration must be >= 0")

    def target_sparsity(self, k):
        """``1 - (1 - p)^k`` as an exact fraction."""
        return 1 - (1 - Fraction(str(self.p))) ** k

    def resolve_rewind(self, steps_per_epoch):
        return steps_per_epoch if self.rewind_iteration is None else self.rewind_iteration


@dataclass(frozen=True, eq=False)
class TicketState:
    mask: Mask
    rewind_weights: dict = field(repr=False)
    rewind_iteration: int
    round: int
    model: object = None
    seed: int = 0
    final_weights: dict | None = field(default=None, repr=False)
    report: object = field(default=None, repr=False)
    metrics: object = None
    label: str = "winning"

    @property
    def sparsity(self):
        return self.mask.sparsity

    def full_sparsity(self, net=None):
        net = net if net is not None else build_model(self.model, 0)
        return self.mask.full_sparsity(net)

    def check(self, net):
        self.mask.validate(net)
        state = net.state_dict()
        for n, a in state.items():
            if n not in self.rewind_weights or self.rewind_weights[n].shape != a.shape:
                raise ContractError(f"rewind weights do not match the network at {n}")
        return self


def rewind(net, ticket):
    """Load the ticket's rewind weights and zero pruned entries."""
    ticket.check(net)
    net.load_state_dict(ticket.rewind_weights)
    return apply_mask(net, ticket.mask)


def random_ticket(ticket, rng_seed):
    """Same mask, fresh initial weights drawn as :func:`build_model` draws them."""
    fresh = build_model(ticket.model, rng_seed)
    return replace(ticket, rewind_weights=fresh.state_dict(), rewind_iteration=0, seed=ticket.seed,
                   final_weights=None, report=None, metrics=None, label="random")


# ---------------------------------------------------------------- runs

def _settings(config):
    return getattr(config, "train", None)


def _evaluate(evaluator, net, report, config):
    if evaluator is None:
        return None
    curve, offset = None, 0
    key = getattr(config, "stop_curve", None)
    if key and report is not None:
        curve, offset = report.curves.get(key), report.start_epoch
    return evaluator(net, loss_curve=curve, patience=getattr(config, "patience", 5),
                     min_delta=getattr(config, "min_delta", 1e-4), curve_offset=offset)


def train_ticket(config, ticket, dataset, evaluator=None, seed=None):
    """Rewind a fresh network to ``ticket`` and train it to the epoch budget."""
    seed = ticket.seed if seed is None else seed
    net = build_model(config.model, seed)
    rewind(net, ticket)
    report = train(net, dataset, config.epochs, mask=ticket.mask, settings=_settings(config),
                   seed=seed, start_iteration=ticket.rewind_iteration)
    return replace(ticket, final_weights=net.state_dict(), report=report,
                   metrics=_evaluate(evaluator, net, report, config)), net


def train_dense(config, dataset, seed, evaluator=None, rewind_iteration=None):
    """Round 0: train the dense network, snapshotting the rewind point."""
    net = build_model(config.model, seed)
    scope = getattr(config, "scope", "both_components")
    if rewind_iteration is None:
        spe = Trainer(net, dataset, settings=_settings(config)).steps_per_epoch
        rewind_iteration = config.schedule.resolve_rewind(spe)
    report = train(net, dataset, config.epochs, checkpoint_at=[0, rewind_iteration],
                   settings=_settings(config), seed=seed)
    if rewind_iteration not in report.checkpoints:
        raise ContractError(f"rewind iteration {rewind_iteration} is beyond the training budget")
    ticket = TicketState(mask=Mask.dense(net, scope), rewind_weights=report.checkpoints[rewind_iteration],
                         rewind_iteration=rewind_iteration, round=0, model=config.model, seed=seed,
                         final_weights=net.state_dict(), report=report,
                         metrics=_evaluate(evaluator, net, report, config))
    init = report.checkpoints[0]
    report.checkpoints = {}
    return ticket, init, net


def run_imp(config, seed, dataset, evaluator=None, rounds=None, dense=None, on_round=None):
    """Iterative magnitude pruning with rewinding; returns rounds 0..n.

    ``dense`` may pass in an already-trained round-0 ticket to share it
    across comparisons.  ``on_round(ticket)`` is called as each round
    completes.
    """
    sched = config.schedule
    if sched.strategy != "iterative":
        raise ContractError("run_imp needs an iterative schedule")
    rounds = sched.rounds if rounds is None else rounds
    ticket = dense if dense is not None else train_dense(config, dataset, seed, evaluator)[0]
    tickets = [ticket]
    if on_round:
        on_round(ticket)
    net = build_model(config.model, seed)
    for k in range(1, rounds + 1):
        net.load_state_dict(ticket.final_weights)
        mask = prune_to_sparsity(net, ticket.mask, sched.target_sparsity(k))
        nxt = replace(ticket, mask=mask, round=k, final_weights=None, report=None, metrics=None)
        try:
            ticket, _ = train_ticket(config, nxt, dataset, evaluator, seed)
        except NumericError as e:
            raise NumericError(f"IMP round {k}: {e}") from e
        log.info("seed %d round %d sparsity %.4f", seed, k, float(ticket.sparsity))
        tickets.append(ticket)
        if on_round:
            on_round(ticket)
    return tickets


def one_shot_prune(config, target_sparsity, seed, dataset, evaluator=None, dense=None):
    """Train once, cut to ``target_sparsity`` in one step, rewind, retrain."""
    if not 0 < Fraction(str(target_sparsity)) < 1:
        raise ContractError(f"target sparsity must be in (0, 1), got {target_sparsity}")
    dense = dense if dense is not None else train_dense(config, dataset, seed, evaluator)[0]
    net = build_model(config.model, seed)
    net.load_state_dict(dense.final_weights)
    mask = prune_to_sparsity(net, dense.mask, target_sparsity)
    ticket = replace(dense, mask=mask, round=1, final_weights=None, report=None, metrics=None,
                     label="one_shot")
    return train_ticket(config, ticket, dataset, evaluator, seed)[0]


# ---------------------------------------------------------------- transfer

def _component_prunables(names, comp):
    return [n for n in names if n.startswith(comp + ".")]


def transfer_mask(source, source_component, target_net, target_component):
    """Copy the source ticket's ``source_component`` mask onto
    ``target_component`` of ``target_net``; the other component is unmasked."""
    scope = {"a": "component_a_only", "b": "component_b_only"}[target_component]
    src = _component_prunables(list(source.mask.entries), source_component)
    dst = scope_names(target_net, scope)
    if not src:
        raise ContractError(f"source mask does not cover component {source_component!r}")
    params = target_net.parameters()
    if len(src) != len(dst):
        raise IncompatibleError(f"source component has {len(src)} prunable parameters, "
                                f"target has {len(dst)}")
    for s, d in zip(src, dst):
        if source.mask.entries[s].shape != params[d].shape:
            raise IncompatibleError(f"incompatible parameter {s} {source.mask.entries[s].shape} -> "
                                    f"{d} {params[d].shape}")
    return Mask({d: source.mask.entries[s] for s, d in zip(src, dst)}, scope)


def transfer_ticket(source, source_component, target_config, target_component, seed, mask_only=False):
    """A ticket for ``target_config`` carrying the source component's mask and,
    unless ``mask_only``, its rewind weights (BN statistics included)."""
    target = build_model(target_config, seed)
    mask = transfer_mask(source, source_component, target, target_component)
    state = target.state_dict()
    if not mask_only:
        prefix_s, prefix_t = source_component + ".", target_component + "."
        moved = 0
        for n, a in source.rewind_weights.items():
            if n.startswith(prefix_s):
                t = prefix_t + n[len(prefix_s):]
                if t not in state or state[t].shape != a.shape:
                    raise IncompatibleError(f"cannot carry {n} onto {t}")
                state[t] = a.copy()
                moved += 1
        log.debug("transfer carried %d arrays", moved)
    return TicketState(mask=mask, rewind_weights=state, rewind_iteration=0, round=source.round,
                       model=target_config, seed=seed, label="transfer")


# ---------------------------------------------------------------- pruning at init

def _restore(net, state):
    net.load_state_dict(state)


def _loss_groups(net, batch, seed):
    """``[(component, loss_fn)]`` for init-time saliency.

    Each ``loss_fn()`` builds its loss under a fresh tape with fixed noise,
    so repeated calls see identical randomness.  GAN components are scored
    against their own loss: the discriminator on real-vs-fake, the
    generator on the non-saturating objective.
    """
    cfg = net.config
    x = np.asarray(batch, dtype=np.float64)
    rng = np.random.default_rng([seed, 0x5A11])
    if cfg.kind == "ae":
        def ae():
            return F.mse_loss(net.b(net.a(Tensor(x))), x)
        return [(("a", "b"), ae)]
    if cfg.kind == "vae":
        eps = rng.standard_normal((len(x), cfg.latent_dim))

        def vae():
            mu, lv = split_moments(net.a(Tensor(x)), cfg.latent_dim)
            rec = F.mse_loss(net.b(reparameterize(mu, lv, eps=eps)), x, reduction="sum_per_sample")
            return F.add(rec, F.mul(F.gaussian_kl_loss(mu, lv), cfg.beta))
        return [(("a", "b"), vae)]
    z_d = rng.standard_normal((len(x), cfg.latent_dim))
    z_g = rng.standard_normal((len(x), cfg.latent_dim))
    wgan = cfg.family == "wgan"

    def d_loss():
        fake = Tensor(net.a(Tensor(z_d)).data)
        real_s, fake_s = net.b(Tensor(x)), net.b(fake)
        if wgan:
            return F.sub(F.mean(fake_s), F.mean(real_s))
        return F.add(F.bce_with_logits_loss(real_s, 1.0), F.bce_with_logits_loss(fake_s, 0.0))

    def g_loss():
        s = net.b(net.a(Tensor(z_g)))
        return F.mul(F.mean(s), -1.0) if wgan else F.bce_with_logits_loss(s, 1.0)
    return [(("b",), d_loss), (("a",), g_loss)]


def _grads(net, loss_fn, names):
    params = net.parameters()
    state = net.state_dict()
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    out = {n: (params[n].grad.copy() if params[n].grad is not None else np.zeros(params[n].shape))
           for n in names}
    for p in params.values():
        p.grad = None
    _restore(net, state)  # undo BN running-stat and power-iteration side effects
    return out


def _group_names(mask, comps):
    return [n for n in mask.entries if n.split(".", 1)[0] in comps]


def saliency_gradients(net, batch, scope="both_components", seed=0):
    """Gradients of each in-scope prunable weight at the current weights."""
    base = Mask.dense(net, scope)
    grads = {}
    for comps, fn in _loss_groups(net, batch, seed):
        names = _group_names(base, comps)
        if names:
            grads.update(_grads(net, fn, names))
    return base, grads


def snip_scores(net, batch, scope="both_components", seed=0):
    base, grads = saliency_gradients(net, batch, scope, seed)
    params = net.parameters()
    if all(not np.any(g) for g in grads.values()):
        raise DegenerateSaliencyError("all gradients are zero at initialization")
    return base, {n: np.abs(grads[n] * params[n].data) for n in base.entries}


def snip_prune(net, batch, target_sparsity, scope="both_components", seed=0):
    """Keep the weights with the largest connection sensitivity ``|g * w|``."""
    base, scores = snip_scores(net, batch, scope, seed)
    n = base.total()
    return _keep_top(net, base, scores, n - floor(Fraction(str(target_sparsity)) * n))


def hessian_gradient_product(grad_fn, weights, rel_step=1e-4):
    """Finite-difference ``H g`` where ``g = grad_fn(weights)``.

    ``h = rel_step * ||w|| / ||g||`` and ``Hg ~ (g(w + h g) - g(w)) / h``.
    Returns ``(g, Hg)`` as dicts keyed like ``weights``.
    """
    g = grad_fn(weights)
    gnorm = np.sqrt(sum(float(np.sum(v * v)) for v in g.values()))
    if gnorm < 1e-12:
        raise DegenerateSaliencyError(f"gradient norm {gnorm:.2e} is too small for a Hessian-gradient product")
    wnorm = np.sqrt(sum(float(np.sum(v * v)) for v in weights.values()))
    h = rel_step * max(wnorm, 1e-12) / gnorm
    shifted = {n: weights[n] + h * g[n] for n in weights}
    g2 = grad_fn(shifted)
    return g, {n: (g2[n] - g[n]) / h for n in weights}


def grasp_scores(net, batch, scope="both_components", seed=0):
    """``-w * Hg`` per weight, with ``Hg`` per loss group."""
    base = Mask.dense(net, scope)
    params = net.parameters()
    scores = {}
    for comps, fn in _loss_groups(net, batch, seed):
        names = _group_names(base, comps)
        if not names:
            continue

        def grad_fn(ws, names=names, fn=fn):
            saved = {n: params[n].data.copy() for n in names}
            try:
                for n in names:
                    params[n].data[...] = ws[n]
                return _grads(net, fn, names)
            finally:
                for n in names:
                    params[n].data[...] = saved[n]

        w = {n: params[n].data.copy() for n in names}
        _, hg = hessian_gradient_product(grad_fn, w)
        for n in names:
            scores[n] = -w[n] * hg[n]
    return base, scores


def grasp_prune(net, batch, target_sparsity, scope="both_components", seed=0):
    """Remove the weights with the highest ``-w * Hg`` scores."""
    base, scores = grasp_scores(net, batch, scope, seed)
    n = base.total()
    neg = {k: -v for k, v in scores.items()}
    return _keep_top(net, base, neg, n - floor(Fraction(str(target_sparsity)) * n))


PRUNE_AT_INIT = {"snip": snip_prune, "grasp": grasp_prune}


def pruned_at_init_ticket(config, method, target_sparsity, seed, dataset, evaluator=None, batch_size=None):
    """Prune a fresh network with SNIP or GraSP, then train it."""
    if method not in PRUNE_AT_INIT:
        raise ContractError(f"unknown pruning-at-init method {method!r}")
    net = build_model(config.model, seed)
    bs = batch_size or getattr(_settings(config), "batch_size", 64)
    idx = np.random.default_rng([seed, 0xBA7C]).permutation(len(dataset.train_x))[:bs]
    scope = getattr(config, "scope", "both_components")
    mask = PRUNE_AT_INIT[method](net, dataset.train_x[idx], target_sparsity, scope, seed)
    ticket = TicketState(mask=mask, rewind_weights=net.state_dict(), rewind_iteration=0, round=1,
                         model=config.model, seed=seed, label=method)
    return train_ticket(config, ticket, dataset, evaluator, seed)[0]
