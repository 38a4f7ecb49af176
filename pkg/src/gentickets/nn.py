"""Layers and containers built on the functional ops.

Layers keep their shapes implicit in their weight arrays so that channel
compression only has to slice arrays.  Every layer can report its
per-sample output shape and forward FLOPs for a given per-sample input
shape, which is what the FLOP ledger and the channel-group analysis use.
"""

import numpy as np

from . import functional as F
from .spectral import SpectralState, spectral_normalize
from .tensor import Parameter, ParamKind

INIT_STD = 0.02


class Module:
    training = True

    def named_parameters(self, prefix=""):
        return []

    def named_buffers(self, prefix=""):
        return []

    def children(self):
        return []

    def train(self, mode=True):
        self.training = mode
        for c in self.children():
            c.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def out_shape(self, in_shape):
        return in_shape

    def flops(self, in_shape):
        return 0

    def __call__(self, x):
        return self.forward(x)


def _join(prefix, name):
    return f"{prefix}.{name}" if prefix else name


class Linear(Module):
    def __init__(self, in_features, out_features, bias=True, rng=None):
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(rng.normal(0.0, INIT_STD, (out_features, in_features)), ParamKind.LINEAR_WEIGHT)
        self.bias = Parameter(np.zeros(out_features), ParamKind.BIAS) if bias else None
        self.spectral = None

    def named_parameters(self, prefix=""):
        out = [(_join(prefix, "weight"), self.weight)]
        if self.bias is not None:
            out.append((_join(prefix, "bias"), self.bias))
        return out

    def named_buffers(self, prefix=""):
        return [(_join(prefix, "sn_u"), self.spectral)] if self.spectral is not None else []

    def effective_weight(self):
        if self.spectral is None:
            return self.weight
        return spectral_normalize(self.weight, self.spectral, update=self.training)

    def forward(self, x):
        return F.linear(x, self.effective_weight(), self.bias)

    def out_shape(self, in_shape):
        return (self.weight.shape[0],)

    def flops(self, in_shape):
        return 2 * self.weight.shape[0] * self.weight.shape[1]


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, bias=True, rng=None):
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(rng.normal(0.0, INIT_STD, (out_ch, in_ch, kernel, kernel)), ParamKind.CONV_KERNEL)
        self.bias = Parameter(np.zeros(out_ch), ParamKind.BIAS) if bias else None
        self.stride = stride
        self.padding = padding
        self.spectral = None

    named_parameters = Linear.named_parameters
    named_buffers = Linear.named_buffers
    effective_weight = Linear.effective_weight

    def forward(self, x):
        return F.conv2d(x, self.effective_weight(), self.bias, self.stride, self.padding)

    def out_shape(self, in_shape):
        co, _, k, _ = self.weight.shape
        _, h, w = in_shape
        return (co, (h + 2 * self.padding - k) // self.stride + 1, (w + 2 * self.padding - k) // self.stride + 1)

    def flops(self, in_shape):
        co, ci, k, _ = self.weight.shape
        _, ho, wo = self.out_shape(in_shape)
        return 2 * co * ci * k * k * ho * wo


class ConvTranspose2d(Module):
    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, bias=True, rng=None):
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(rng.normal(0.0, INIT_STD, (in_ch, out_ch, kernel, kernel)), ParamKind.CONV_KERNEL)
        self.bias = Parameter(np.zeros(out_ch), ParamKind.BIAS) if bias else None
        self.stride = stride
        self.padding = padding

    named_parameters = Linear.named_parameters

    def forward(self, x):
        return F.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)

    def out_shape(self, in_shape):
        _, co, k, _ = self.weight.shape
        _, h, w = in_shape
        s, p = self.stride, self.padding
        return (co, (h - 1) * s - 2 * p + k, (w - 1) * s - 2 * p + k)

    def flops(self, in_shape):
        # every input pixel scatters a full C_out x K x K patch
        ci, co, k, _ = self.weight.shape
        _, h, w = in_shape
        return 2 * ci * co * k * k * h * w


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=F.BN_MOMENTUM, eps=F.BN_EPS):
        self.weight = Parameter(np.ones(channels), ParamKind.BN_SCALE)
        self.bias = Parameter(np.zeros(channels), ParamKind.BN_SHIFT)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def named_parameters(self, prefix=""):
        return [(_join(prefix, "weight"), self.weight), (_join(prefix, "bias"), self.bias)]

    def named_buffers(self, prefix=""):
        return [(_join(prefix, "running_mean"), self.running_mean),
                (_join(prefix, "running_var"), self.running_var)]

    @property
    def channels(self):
        return self.weight.shape[0]

    def forward(self, x):
        return F.batchnorm2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                             training=self.training, momentum=self.momentum, eps=self.eps)

    def flops(self, in_shape):
        return 4 * int(np.prod(in_shape))


class ReLU(Module):
    def forward(self, x):
        return F.relu(x)


class LeakyReLU(Module):
    def __init__(self, slope=F.LEAKY_SLOPE):
        self.slope = slope

    def forward(self, x):
        return F.leaky_relu(x, self.slope)


class Tanh(Module):
    def forward(self, x):
        return F.tanh(x)


class Flatten(Module):
    def forward(self, x):
        return F.reshape(x, (x.shape[0], -1))

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


class Unflatten(Module):
    """Reshape flat features to ``(C, h, w)``; ``C`` is inferred."""

    def __init__(self, h, w):
        self.h, self.w = h, w

    def forward(self, x):
        return F.reshape(x, (x.shape[0], -1, self.h, self.w))

    def out_shape(self, in_shape):
        return (in_shape[0] // (self.h * self.w), self.h, self.w)


class Sequential(Module):
    def __init__(self, layers):
        self.layers = list(layers)

    def children(self):
        return [layer for _, layer in self.layers]

    def named_parameters(self, prefix=""):
        out = []
        for name, layer in self.layers:
            out.extend(layer.named_parameters(_join(prefix, name)))
        return out

    def named_buffers(self, prefix=""):
        out = []
        for name, layer in self.layers:
            out.extend(layer.named_buffers(_join(prefix, name)))
        return out

    def forward(self, x):
        for _, layer in self.layers:
            x = layer(x)
        return x

    def out_shape(self, in_shape):
        for _, layer in self.layers:
            in_shape = layer.out_shape(in_shape)
        return in_shape

    def flops(self, in_shape):
        total = 0
        for _, layer in self.layers:
            total += layer.flops(in_shape)
            in_shape = layer.out_shape(in_shape)
        return total


class ResidualBlock(Sequential):
    """``act(x + bn2(conv2(act(bn1(conv1(x))))))`` with 3x3 same-size convs."""

    def __init__(self, channels, act="relu", rng=None):
        make_act = ReLU if act == "relu" else LeakyReLU
        super().__init__([
            ("conv1", Conv2d(channels, channels, 3, 1, 1, bias=False, rng=rng)),
            ("bn1", BatchNorm2d(channels)),
            ("act1", make_act()),
            ("conv2", Conv2d(channels, channels, 3, 1, 1, bias=False, rng=rng)),
            ("bn2", BatchNorm2d(channels)),
        ])
        self.act = make_act()

    def forward(self, x):
        return self.act(F.add(x, super().forward(x)))

    def out_shape(self, in_shape):
        return in_shape
