"""Shared test utilities: finite-difference gradient checks and op cases."""

import numpy as np

from gentickets import functional as F
from gentickets.spectral import SpectralState, spectral_normalize
from gentickets.tensor import Tape, Tensor

FD_STEP = 1e-5
GRAD_RTOL = 1e-4


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-8))


def numeric_grad(scalar_fn, arrays, i, h=FD_STEP):
    x = arrays[i]
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = scalar_fn(arrays)
        x[idx] = old - h
        fm = scalar_fn(arrays)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def gradcheck(fn, arrays, rng, wrt=None):
    """Worst relative error between tape gradients and central differences.

    ``fn`` maps tensors to a tensor; it is contracted with a fixed random
    weight so that every output element contributes to the checked scalar.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    probe = fn(*[Tensor(a) for a in arrays]).data
    weight = rng.standard_normal(probe.shape)

    def scalar(arrs):
        return float((fn(*[Tensor(a) for a in arrs]).data * weight).sum())

    ts = [Tensor(a.copy(), requires_grad=i in wrt) for i, a in enumerate(arrays)]
    with Tape() as tape:
        out = fn(*ts)
        loss = F.sum(F.mul(out, Tensor(weight)))
        tape.backward(loss)
    worst = 0.0
    for i in wrt:
        num = numeric_grad(scalar, arrays, i)
        got = ts[i].grad if ts[i].grad is not None else np.zeros_like(arrays[i])
        worst = max(worst, rel_error(got, num))
    return worst


def _away_from(x, points, gap=0.05):
    """Push entries at least ``gap`` away from each kink in ``points``."""
    x = x.copy()
    for p in points:
        close = np.abs(x - p) < gap
        x[close] = p + np.where(x[close] >= p, gap, -gap) * 2
    return x


def _shape(rng, ndim=2, lo=1, hi=4):
    return tuple(int(n) for n in rng.integers(lo, hi + 1, size=ndim))


def _binary(op):
    def case(rng):
        s = _shape(rng)
        other = s if rng.random() < 0.5 else (1, s[1])
        return op, [rng.standard_normal(s), rng.standard_normal(other)], None
    return case


def _unary(op, kinks=()):
    def case(rng):
        return op, [_away_from(rng.standard_normal(_shape(rng, 3)), kinks)], None
    return case


def _conv(rng):
    n, c, o = (int(v) for v in rng.integers(1, 3, size=3))
    k, stride, pad = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(0, 2))
    size = int(rng.integers(k, k + 3))
    x = rng.standard_normal((n, c, size, size))
    w = rng.standard_normal((o, c, k, k))
    b = rng.standard_normal(o)
    return (lambda x, w, b: F.conv2d(x, w, b, stride=stride, padding=pad)), [x, w, b], None


def _conv_t(rng):
    n, c, o = (int(v) for v in rng.integers(1, 3, size=3))
    k, stride = int(rng.integers(2, 5)), int(rng.integers(1, 3))
    pad = int(rng.integers(0, min(2, k)))
    size = int(rng.integers(2, 4))
    x = rng.standard_normal((n, c, size, size))
    w = rng.standard_normal((c, o, k, k))
    b = rng.standard_normal(o)
    return (lambda x, w, b: F.conv_transpose2d(x, w, b, stride=stride, padding=pad)), [x, w, b], None


def _bn(training):
    def case(rng):
        n, c, h = int(rng.integers(2, 4)), int(rng.integers(1, 4)), int(rng.integers(2, 4))
        x = rng.standard_normal((n, c, h, h)) * 2 + 1
        g, b = rng.standard_normal(c), rng.standard_normal(c)
        rm, rv = rng.standard_normal(c), rng.random(c) + 0.5

        def f(x, g, b):
            return F.batchnorm2d(x, g, b, rm.copy(), rv.copy(), training=training)
        return f, [x, g, b], None
    return case


def _matmul(rng):
    m, k, n = _shape(rng, 3)
    return F.matmul, [rng.standard_normal((m, k)), rng.standard_normal((k, n))], None


def _linear(rng):
    n, i, o = _shape(rng, 3)
    return F.linear, [rng.standard_normal((n, i)), rng.standard_normal((o, i)), rng.standard_normal(o)], None


def _mse(reduction):
    def case(rng):
        s = _shape(rng, 3)
        return (lambda p, t: F.mse_loss(p, t, reduction=reduction)), [rng.standard_normal(s), rng.standard_normal(s)], None
    return case


def _bce(rng):
    s = _shape(rng)
    t = rng.random(s)
    return (lambda z: F.bce_with_logits_loss(z, t)), [rng.standard_normal(s) * 3], None


def _kl(rng):
    s = _shape(rng)
    return (lambda m, lv: F.gaussian_kl_loss(m, lv, beta=2.5)), [rng.standard_normal(s), rng.standard_normal(s)], None


def _ce(rng):
    n, c = int(rng.integers(1, 5)), int(rng.integers(2, 5))
    labels = rng.integers(0, c, size=n)
    return (lambda z: F.cross_entropy(z, labels)), [rng.standard_normal((n, c))], None


def _reshape(rng):
    s = _shape(rng, 3)
    return (lambda x: F.reshape(x, (s[0], -1))), [rng.standard_normal(s)], None


def _getitem(rng):
    s = _shape(rng, 2, 2, 5)
    return (lambda x: F.getitem(x, (slice(None), slice(0, 1 + s[1] // 2)))), [rng.standard_normal(s)], None


def _clamp(rng):
    return (lambda x: F.clamp(x, -0.5, 0.7)), [_away_from(rng.standard_normal(_shape(rng, 3)), (-0.5, 0.7))], None


def _scalar_mul(rng):
    c = float(rng.standard_normal())
    return (lambda x: F.mul(x, c)), [rng.standard_normal(_shape(rng))], None


def _spectral(rng):
    o, i = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    w = rng.standard_normal((o, i))
    st = SpectralState.for_weight(w.shape, rng)
    # converge u so the frozen-u forward used by the finite differences is smooth
    for _ in range(200):
        spectral_normalize(Tensor(w), st)
    return (lambda w: spectral_normalize(w, st, update=False)), [w], None


OP_CASES = {
    "add": _binary(F.add),
    "sub": _binary(F.sub),
    "mul": _binary(F.mul),
    "mul_scalar": _scalar_mul,
    "exp": _unary(F.exp),
    "clamp": _clamp,
    "relu": _unary(F.relu, (0.0,)),
    "leaky_relu": _unary(F.leaky_relu, (0.0,)),
    "tanh": _unary(F.tanh),
    "sigmoid": _unary(F.sigmoid),
    "sum": _unary(F.sum),
    "mean": _unary(F.mean),
    "reshape": _reshape,
    "getitem": _getitem,
    "matmul": _matmul,
    "linear": _linear,
    "conv2d": _conv,
    "conv_transpose2d": _conv_t,
    "batchnorm2d_train": _bn(True),
    "batchnorm2d_eval": _bn(False),
    "mse_loss_mean": _mse("mean"),
    "mse_loss_sum_per_sample": _mse("sum_per_sample"),
    "bce_with_logits_loss": _bce,
    "gaussian_kl_loss": _kl,
    "cross_entropy": _ce,
    "spectral_normalize": _spectral,
}


def check_op(name, instances=20, seed=0):
    """Worst relative gradient error over ``instances`` random cases of one op."""
    rng = np.random.default_rng([seed, sorted(OP_CASES).index(name)])
    worst = 0.0
    for _ in range(instances):
        fn, arrays, wrt = OP_CASES[name](rng)
        worst = max(worst, gradcheck(fn, arrays, rng, wrt))
    return worst


def jacobi_eigvals(sym, sweeps=60, tol=1e-15):
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations."""
    a = np.array(sym, dtype=np.float64)
    n = a.shape[0]
    for _ in range(sweeps):
        off = np.sqrt(((a - np.diag(np.diag(a))) ** 2).sum())
        if off < tol * max(1.0, np.abs(a).max()):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
                if theta == 0:
                    t = 1.0
                elif abs(theta) > 1e150:
                    t = 1 / (2 * theta)
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1))
                c = 1 / np.sqrt(t * t + 1)
                s = t * c
                r = np.eye(n)
                r[p, p] = r[q, q] = c
                r[p, q], r[q, p] = s, -s
                a = r.T @ a @ r
    return np.sort(np.diag(a))


def jacobi_top_singular(m):
    return float(np.sqrt(max(jacobi_eigvals(m.T @ m)[-1], 0.0)))


class ToyNet:
    """Just enough of a network for the mask functions: named prunable arrays."""

    def __init__(self, arrays):
        from gentickets.tensor import Parameter, ParamKind

        self._params = {}
        for name, a in arrays.items():
            p = Parameter(np.array(a, dtype=np.float64), ParamKind.LINEAR_WEIGHT, name=name)
            self._params[name] = p

    def named_parameters(self):
        return list(self._params.items())

    def parameters(self):
        return dict(self._params)

    def num_prunable(self):
        return sum(p.size for p in self._params.values())
