"""Spectral normalization by persistent power iteration."""

from dataclasses import dataclass

import numpy as np

from .tensor import record


def _unit(x):
    n = np.linalg.norm(x)
    return x / n if n > 0 else x


@dataclass
class SpectralState:
    """Left singular vector estimate ``u`` for one weight matrix."""

    u: np.ndarray
    iterations: int = 0

    @classmethod
    def for_weight(cls, weight_shape, rng):
        u = rng.standard_normal(weight_shape[0])
        return cls(u=_unit(u))


def power_iteration(w2, state, iters=1):
    """Advance ``state.u`` by ``iters`` steps; return ``(sigma, u, v)``.

    ``sigma = u^T W v`` equals ``||W v||`` and never exceeds the top
    singular value.
    """
    u = state.u
    v = _unit(w2.T @ u)
    for _ in range(iters):
        v = _unit(w2.T @ u)
        u = _unit(w2 @ v)
    state.u = u
    state.iterations += iters
    return float(u @ w2 @ v), u, v


def spectral_normalize(weight, state, iters=1, update=True):
    """Return ``weight / sigma_hat`` as a differentiable tensor.

    ``u`` and ``v`` are treated as constants in the backward pass, so the
    gradient includes the ``sigma_hat(W)`` term.  An all-zero weight is
    returned unchanged (sigma treated as 1).
    """
    w2 = weight.data.reshape(weight.shape[0], -1)
    if not np.any(w2):
        return record(weight.data.copy(), (weight,), lambda g: (g,), "spectral_normalize")
    if update:
        sigma, u, v = power_iteration(w2, state, iters)
    else:
        u = state.u
        v = _unit(w2.T @ u)
        sigma = float(u @ w2 @ v)
    out = weight.data / sigma

    def bw(g):
        g2 = g.reshape(w2.shape)
        coef = float((g2 * w2).sum()) / sigma ** 2
        return ((g2 / sigma - coef * np.outer(u, v)).reshape(weight.shape),)

    return record(out, (weight,), bw, "spectral_normalize")
