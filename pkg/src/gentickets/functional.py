"""Differentiable operations on :class:`~gentickets.tensor.Tensor`.

Every op validates shapes, computes its output with numpy, and (inside an
active tape) records a closure that maps the output gradient to input
gradients.  Convolutions go through an explicit im2col layout
``(C, K, K, N, Ho, Wo)`` so that forward and both backward products are
single GEMMs.
"""

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, record

LEAKY_SLOPE = 0.2
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return record(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = as_tensor(a)
        c = float(b)
        return record(a.data * c, (a,), lambda g: (g * c,), "mul")
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record(a.data * b.data, (a, b), bw, "mul")


def exp(x):
    out = np.exp(x.data)
    return record(out, (x,), lambda g: (g * out,), "exp")


def clamp(x, lo, hi):
    inside = (x.data >= lo) & (x.data <= hi)
    return record(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clamp")


def relu(x):
    pos = x.data > 0
    return record(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def leaky_relu(x, slope=LEAKY_SLOPE):
    scale = np.where(x.data > 0, 1.0, slope)
    return record(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def tanh(x):
    out = np.tanh(x.data)
    return record(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(v):
    # split by sign to avoid overflow in exp
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x):
    out = _sigmoid(x.data)
    return record(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# ---------------------------------------------------------------- reductions / views

def sum(x):  # noqa: A001 - mirrors numpy naming
    return record(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean(x):
    n = x.size
    if n == 0:
        raise ContractError("mean of an empty tensor")
    return record(np.asarray(x.data.mean()), (x,),
                  lambda g: (np.full(x.shape, float(g) / n),), "mean")


def reshape(x, shape):
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    return record(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def getitem(x, index):
    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return record(np.array(x.data[index]), (x,), bw, "getitem")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return record(a.data @ b.data, (a, b), bw, "matmul")


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with weight laid out ``(out, in)``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return record(out, parents, bw, "linear")


def _im2col(xp, k, stride, ho, wo):
    n, c = xp.shape[:2]
    cols = np.empty((c, k, k, n, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride].transpose(1, 0, 2, 3)
    return cols


def _col2im(cols, out, k, stride, ho, wo):
    """Scatter-add ``cols (C,K,K,N,Ho,Wo)`` into padded ``out (N,C,Hp,Wp)``."""
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j].transpose(1, 0, 2, 3)
    return out


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation, NCHW input, weight ``(C_out, C_in, K, K)``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    co, ci, k, k2 = weight.shape
    if ci != c or k != k2:
        raise DimensionError(f"conv2d: input {x.shape} does not match kernel {weight.shape}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv2d: kernel {k} too large for input {x.shape} with padding {padding}")

    cols = _im2col(_pad(x.data, padding), k, stride, ho, wo).reshape(c * k * k, n * ho * wo)
    w2 = weight.data.reshape(co, -1)
    out = (w2 @ cols).reshape(co, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, co, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(co, -1)
        dw = (g2 @ cols.T).reshape(weight.shape)
        dx = None
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(c, k, k, n, ho, wo)
            dxp = _col2im(dcols, np.zeros((n, c, h + 2 * padding, w + 2 * padding)), k, stride, ho, wo)
            dx = dxp[:, :, padding:padding + h, padding:padding + w]
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return record(np.ascontiguousarray(out), parents, bw, "conv2d")


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0):
    """Transposed convolution, weight ``(C_in, C_out, K, K)``.

    Output side is ``(H - 1) * stride - 2 * padding + K``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(
            f"conv_transpose2d: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    ci, co, k, k2 = weight.shape
    if ci != c or k != k2:
        raise DimensionError(f"conv_transpose2d: input {x.shape} does not match kernel {weight.shape}")
    hp, wp = (h - 1) * stride + k, (w - 1) * stride + k
    ho, wo = hp - 2 * padding, wp - 2 * padding
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv_transpose2d: padding {padding} too large for input {x.shape}")

    x2 = x.data.transpose(1, 0, 2, 3).reshape(c, -1)
    w2 = weight.data.reshape(c, -1)
    cols = (w2.T @ x2).reshape(co, k, k, n, h, w)
    outp = _col2im(cols, np.zeros((n, co, hp, wp)), k, stride, h, w)
    out = outp[:, :, padding:padding + ho, padding:padding + wo]
    if bias is not None:
        out = out + bias.data.reshape(1, co, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gcols = _im2col(_pad(g, padding), k, stride, h, w).reshape(co * k * k, -1)
        dw = (x2 @ gcols.T).reshape(weight.shape)
        dx = None
        if x.requires_grad:
            dx = (w2 @ gcols).reshape(c, n, h, w).transpose(1, 0, 2, 3)
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return record(np.ascontiguousarray(out), parents, bw, "conv_transpose2d")


def batchnorm2d(x, gamma, beta, running_mean=None, running_var=None, training=True,
                momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch normalization over (N, H, W).

    In training mode the batch statistics normalize the input and the
    running buffers (if given) are updated in place; the running variance
    uses the unbiased estimate.  In eval mode the running buffers are used.
    """
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d: expected NCHW input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm2d: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    axes = (0, 2, 3)
    m = x.size // c
    if training:
        if m < 2:
            raise ContractError("batchnorm2d: training mode needs more than one value per channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * var * m / (m - 1)
    else:
        mu, var = running_mean, running_var
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * invstd.reshape(1, c, 1, 1)
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(1, c, 1, 1)
        if training:
            dx = (invstd.reshape(1, c, 1, 1) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(1, c, 1, 1)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(1, c, 1, 1))
        else:
            dx = dxhat * invstd.reshape(1, c, 1, 1)
        return dx, dgamma, dbeta

    return record(out, (x, gamma, beta), bw, "batchnorm2d")


# ---------------------------------------------------------------- losses

def mse_loss(pred, target, reduction="mean"):
    """Squared error.  ``reduction="sum_per_sample"`` sums within a sample
    and averages over the batch (the VAE reconstruction term)."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    if reduction == "mean":
        scale = 1.0 / diff.size
    elif reduction == "sum_per_sample":
        scale = 1.0 / diff.shape[0]
    else:
        raise ContractError(f"mse_loss: unknown reduction {reduction!r}")
    out = np.asarray((diff * diff).sum() * scale)

    def bw(g):
        d = 2.0 * scale * float(g) * diff
        return d, -d

    return record(out, (pred, target), bw, "mse_loss")


def bce_with_logits_loss(logits, target):
    """Mean binary cross-entropy on raw scores; ``target`` may be a scalar."""
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), logits.shape)
    z = logits.data
    out = np.asarray((np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))).mean())
    n = z.size

    def bw(g):
        return ((_sigmoid(z) - t) * (float(g) / n),)

    return record(out, (logits,), bw, "bce_with_logits_loss")


def gaussian_kl_loss(mu, logvar, beta=1.0):
    """``beta * KL(N(mu, exp(logvar)) || N(0, I))`` summed over latent dims,
    averaged over the batch."""
    if mu.shape != logvar.shape:
        raise DimensionError(f"gaussian_kl_loss: mu {mu.shape} vs logvar {logvar.shape}")
    n = mu.shape[0] if mu.ndim > 1 else 1
    ev = np.exp(logvar.data)
    kl = -0.5 * (1.0 + logvar.data - mu.data ** 2 - ev).sum() / n
    out = np.asarray(beta * kl)

    def bw(g):
        s = float(g) * beta / n
        return s * mu.data, s * 0.5 * (ev - 1.0)

    return record(out, (mu, logvar), bw, "gaussian_kl_loss")


def log_softmax(v):
    shifted = v - v.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels):
    """Mean categorical cross-entropy with integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    lp = log_softmax(logits.data)
    n = labels.size
    rows = np.arange(n)
    out = np.asarray(-lp[rows, labels].mean())

    def bw(g):
        d = np.exp(lp)
        d[rows, labels] -= 1.0
        return (d * (float(g) / n),)

    return record(out, (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------- dispatcher

_OPS = {
    "matmul": matmul,
    "conv2d": conv2d,
    "conv_transpose2d": conv_transpose2d,
    "batchnorm2d": batchnorm2d,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "add": add,
    "reshape": reshape,
    "mse_loss": mse_loss,
    "bce_with_logits_loss": bce_with_logits_loss,
    "gaussian_kl_loss": gaussian_kl_loss,
    "mean": mean,
}


def forward_op(op, inputs, **attrs):
    """Apply a named op to a list of input tensors.

    ``forward_op("conv2d", [x, w], stride=2, padding=1)``
    """
    try:
        fn = _OPS[op]
    except KeyError:
        raise ContractError(f"unknown op {op!r}; expected one of {sorted(_OPS)}") from None
    return fn(*inputs, **attrs)
