"""Layer objects shared by the model builders.

A layer maps a batched :class:`Tensor` to a batched :class:`Tensor` and
exposes its :class:`Parameter` objects. Shapes passed to ``output_shape``
exclude the batch axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .exceptions import DimensionError


@dataclass
class ForwardContext:
    training: bool = False
    rng: Optional[np.random.Generator] = None
    beta: float = 1.0
    gamma: float = 0.0


class Layer:
    kind = "layer"

    def parameters(self) -> List[Parameter]:
        return []

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        raise NotImplementedError

    def output_shape(self, in_shape: tuple) -> tuple:
        return tuple(in_shape)

    def __call__(self, x: Tensor, ctx: Optional[ForwardContext] = None) -> Tensor:
        return self.forward(x, ctx or ForwardContext())

    def __repr__(self) -> str:
        return f"{type(self).__name__}()"


class Dense(Layer):
    """``y = x W^T + b`` with ``W`` stored as (out, in)."""

    kind = "dense"

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype=np.float64):
        self.in_features = in_features
        self.out_features = out_features
        bound = 1.0 / math.sqrt(in_features)
        self.weight = Parameter(rng.uniform(-bound, bound, (out_features, in_features)), prunable=True, dtype=dtype)
        self.bias = Parameter(rng.uniform(-bound, bound, out_features), dtype=dtype)

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, ctx):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionError(f"dense layer expects (B, {self.in_features}), got {x.shape}")
        return ad.matmul(x, ad.transpose(self.weight.effective())) + self.bias.effective()

    def output_shape(self, in_shape):
        return (self.out_features,)

    def __repr__(self):
        return f"Dense({self.in_features}, {self.out_features})"


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, dtype=np.float64):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        std = math.sqrt(2.0 / (out_channels * kernel_size * kernel_size))
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = Parameter(rng.normal(0.0, std, shape), prunable=True, dtype=dtype)
        self.bias = Parameter(np.zeros(out_channels), dtype=dtype)

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, ctx):
        out = ad.conv2d(x, self.weight.effective(), self.stride, self.padding)
        return out + ad.reshape(self.bias.effective(), (1, self.out_channels, 1, 1))

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise DimensionError(f"conv expects {self.in_channels} channels, got {c}")
        k, s, p = self.kernel_size, self.stride, self.padding
        return (self.out_channels, ad.conv_output_size(h, k, s, p), ad.conv_output_size(w, k, s, p))

    def __repr__(self):
        return f"Conv2D({self.in_channels}, {self.out_channels}, k={self.kernel_size})"


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, ctx):
        return ad.relu(x)


class PSwish(Layer):
    """``t * sigmoid(beta * t)`` with ``beta`` read from the forward context."""

    kind = "pswish"

    def forward(self, x, ctx):
        return ad.pswish(x, ctx.beta)


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, p: float):
        self.p = p

    def forward(self, x, ctx):
        return ad.dropout(x, self.p, ctx.rng, ctx.training)

    def __repr__(self):
        return f"Dropout({self.p})"


class MaxPool2D(Layer):
    kind = "maxpool"

    def __init__(self, size: int = 2):
        self.size = size

    def forward(self, x, ctx):
        return ad.maxpool2d(x, self.size)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        return (c, h // self.size, w // self.size)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, ctx):
        return ad.reshape(x, (x.shape[0], -1))

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


def resize_like(z: Tensor, shape: tuple) -> Tensor:
    """Resize a batched tensor to ``shape`` (batch axis excluded).

    The channel/feature axis is truncated or zero-padded; spatial axes use
    nearest-neighbour sampling.
    """
    target = tuple(shape)
    cur = z.shape[1:]
    if cur == target:
        return z
    if len(cur) != len(target):
        raise DimensionError(f"cannot resize {cur} to {target}")
    c_in, c_out = cur[0], target[0]
    if c_in > c_out:
        z = ad.index(z, (slice(None), slice(0, c_out)))
    elif c_in < c_out:
        widths = [(0, 0)] * z.ndim
        widths[1] = (0, c_out - c_in)
        z = ad.pad(z, widths)
    if len(target) == 3 and cur[1:] != target[1:]:
        rows = (np.arange(target[1]) * cur[1]) // target[1]
        cols = (np.arange(target[2]) * cur[2]) // target[2]
        z = ad.index(z, (slice(None), slice(None), rows[:, None], cols[None, :]))
    return z


class SoftSkip(Layer):
    """Wraps a block ``g`` as ``g(z) + gamma * resize(z)``; ``gamma`` comes from the context."""

    kind = "soft_skip"

    def __init__(self, inner: List[Layer]):
        self.inner = list(inner)

    def parameters(self):
        return [p for layer in self.inner for p in layer.parameters()]

    def forward(self, x, ctx):
        out = x
        for layer in self.inner:
            out = layer.forward(out, ctx)
        if ctx.gamma == 0.0:
            return out
        return out + ad.scale(resize_like(x, out.shape[1:]), ctx.gamma)

    def output_shape(self, in_shape):
        for layer in self.inner:
            in_shape = layer.output_shape(in_shape)
        return in_shape

    def __repr__(self):
        return f"SoftSkip({self.inner})"


def soft_skip_forward(block, z: Tensor, gamma: float, ctx: Optional[ForwardContext] = None) -> Tensor:
    """Evaluate ``block(z) + gamma * resize(z)``; ``block`` is a layer, a list of layers or a callable."""
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    ctx = ctx or ForwardContext()
    if isinstance(block, (list, tuple)):
        out = z
        for layer in block:
            out = layer.forward(out, ctx)
    else:
        out = block.forward(z, ctx) if isinstance(block, Layer) else block(z)
    if gamma == 0.0:
        return out
    return out + ad.scale(resize_like(z, out.shape[1:]), gamma)
