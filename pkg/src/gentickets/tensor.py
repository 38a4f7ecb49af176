"""Dense float64 tensors and the tape that records operations on them.

Operations only record onto a :class:`Tape` while one is active on the
current thread; outside a tape every op is a plain numpy computation.  This
keeps evaluation passes free of graph bookkeeping without a separate
``no_grad`` switch.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> tape.backward(loss)
    >>> x.grad
    array([2., 4., 6.])
"""

import threading
from enum import Enum

import numpy as np

from .errors import ContractError, NumericError

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    """Innermost tape open on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense n-d array of float64 with an optional gradient slot."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.require(np.asarray(data, dtype=np.float64), requirements="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # operator sugar; the ops live in functional
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import functional as F
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return F.mul(self, 1.0 / other)

    def __neg__(self):
        from . import functional as F
        return F.mul(self, -1.0)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def __getitem__(self, index):
        from . import functional as F
        return F.getitem(self, index)

    def sum(self):
        from . import functional as F
        return F.sum(self)

    def mean(self):
        from . import functional as F
        return F.mean(self)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)


def _not_scalar(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


class ParamKind(str, Enum):
    CONV_KERNEL = "conv_kernel"
    LINEAR_WEIGHT = "linear_weight"
    BIAS = "bias"
    BN_SCALE = "bn_scale"
    BN_SHIFT = "bn_shift"

    @property
    def prunable(self):
        return self in (ParamKind.CONV_KERNEL, ParamKind.LINEAR_WEIGHT)


class Parameter(Tensor):
    """A trainable tensor with a network-unique name and a kind tag."""

    def __init__(self, data, kind, name=""):
        super().__init__(data, requires_grad=True)
        self.kind = ParamKind(kind)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, kind={self.kind.value}, shape={self.shape})"


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager around a forward pass, then call
    :meth:`backward` once.  Recording order is a topological order, so the
    reverse replay visits each op after every op that consumed its output.
    """

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misnested tapes
            stack.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, parents, backward_fn):
        self.nodes.append(_Node(out, parents, backward_fn))

    def backward(self, loss):
        backward(self, loss)


def record(out_data, parents, backward_fn, op_name):
    """Wrap an op result, checking finiteness and recording it if needed.

    ``backward_fn(grad_out)`` must return one gradient (or None) per parent.
    """
    if not np.all(np.isfinite(out_data)):
        raise NumericError(f"{op_name}: non-finite values in output")
    tape = active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.record(out, parents, backward_fn)
    return out


def backward(tape, loss):
    """Propagate d(loss)/d(tensor) into ``.grad`` of every reachable leaf.

    Gradients accumulate into leaves that already hold one, matching the
    usual zero-then-backward training idiom.  The tape is emptied afterwards.
    """
    if tape.consumed:
        raise ContractError("tape has already been replayed")
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")

    recorded = {id(n.out) for n in tape.nodes}
    if id(loss) not in recorded:
        # loss is itself a leaf
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
    interm = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = interm.pop(id(node.out), None)
        if g is None:
            continue
        grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in recorded:
                prev = interm.get(key)
                interm[key] = pg if prev is None else prev + pg
            else:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
    tape.nodes.clear()
    tape.consumed = True
