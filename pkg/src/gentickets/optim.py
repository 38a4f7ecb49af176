"""Adam with optional post-step weight clipping (WGAN critic)."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    clip: float | None = None
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def arrays(self):
        """Moment arrays keyed ``m/<name>`` and ``v/<name>`` (checkpointing)."""
        out = {f"m/{k}": a for k, a in self.m.items()}
        out.update({f"v/{k}": a for k, a in self.v.items()})
        return out


def adam_step(params, state):
    """One bias-corrected Adam update, in place.

    ``params`` is a list of :class:`~gentickets.tensor.Parameter`; each
    must carry a gradient.  With ``state.clip`` set, every parameter is
    clamped to ``[-clip, clip]`` after the update.
    """
    for p in params:
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {p.name or '<unnamed>'} has no gradient")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p in params:
        g = p.grad
        m = state.m.get(p.name)
        if m is None or m.shape != g.shape:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.clip is not None:
            np.clip(p.data, -state.clip, state.clip, out=p.data)


def zero_grad(params):
    for p in params:
        p.grad = None
