"""FLOP and byte accounting for conv, linear and batchnorm layers.

Per sample, a forward pass costs ``2*C_out*C_in*K*K*H_out*W_out`` for a
convolution (input-side ``H*W`` for a transposed one), ``2*m*n`` for a
linear layer and ``4*elements`` for batchnorm.  A backward pass is counted
as twice the forward.  Activations and elementwise ops are free.

Mixed precision is an accounting device only: FLOPs are unchanged and the
byte counters for conv/linear weights and activations use 2-byte elements.
"""

from dataclasses import dataclass

import numpy as np

from .nn import BatchNorm2d, Conv2d, ConvTranspose2d, Linear, Sequential

COUNTED = (Linear, Conv2d, ConvTranspose2d, BatchNorm2d)
PRECISIONS = ("fp32", "mixed")


@dataclass
class FlopLedger:
    forward: int = 0
    backward: int = 0
    pruning: int = 0
    bytes_moved: int = 0

    @property
    def total(self):
        return self.forward + self.backward + self.pruning

    def copy(self):
        return FlopLedger(self.forward, self.backward, self.pruning, self.bytes_moved)


def walk_layers(module, in_shape):
    """Yield ``(layer, per_sample_input_shape)`` for every counted layer."""
    if isinstance(module, Sequential):
        shape = in_shape
        for _, layer in module.layers:
            yield from walk_layers(layer, shape)
            shape = layer.out_shape(shape)
    elif isinstance(module, COUNTED):
        yield module, in_shape


def layer_costs(module, in_shape, precision="fp32"):
    """Per-sample ``(flops, bytes)`` for each counted layer of ``module``."""
    if precision not in PRECISIONS:
        raise ValueError(f"precision must be one of {PRECISIONS}")
    out = []
    for layer, shape in walk_layers(module, in_shape):
        half = precision == "mixed" and not isinstance(layer, BatchNorm2d)
        width = 2 if half else 4
        elems = int(np.prod(layer.out_shape(shape))) + layer.weight.size
        out.append((int(layer.flops(shape)), elems * width))
    return out


def pass_cost(module, in_shape, precision="fp32"):
    costs = layer_costs(module, in_shape, precision)
    return sum(c[0] for c in costs), sum(c[1] for c in costs)


def count_flops(model, batch_size, ledger=None, precision="fp32", backward=True, in_shape=None):
    """Add one training step's worth of FLOPs for ``model`` to ``ledger``.

    ``model`` is either a layer container (then ``in_shape`` is required)
    or a :class:`~gentickets.models.GenerativeNetwork`, in which case both
    components are charged one forward (and backward) pass each.
    """
    ledger = ledger if ledger is not None else FlopLedger()
    if hasattr(model, "component_shapes"):
        parts = [(m, s) for m, s in model.component_shapes()]
    else:
        parts = [(model, in_shape)]
    for module, shape in parts:
        flops, nbytes = pass_cost(module, shape, precision)
        ledger.forward += flops * batch_size
        ledger.bytes_moved += nbytes * batch_size
        if backward:
            ledger.backward += 2 * flops * batch_size
            ledger.bytes_moved += 2 * nbytes * batch_size
    return ledger
