"""Butterfly and kaleidoscope matrices, and the layers built from them.

A butterfly matrix of size n = 2**m is the product F_m ... F_1 of sparse
factors. Factor F_j pairs indices (i, i + 2**(j-1)) inside contiguous groups
of 2**j and mixes each pair with its own 2x2 block, so every factor holds
2n numbers and the whole product 2n*log2(n). Vectors are hit by F_1 first.

Kaleidoscope matrices chain w products B_i C_i^T. Rectangular maps embed an
arbitrary in/out size by zero-padding to the next power of two and
truncating the result.

Structured layers are never pruned: their parameters are created with
``prunable=False``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .exceptions import ContractError, DimensionError
from .layers import ForwardContext, Layer


def _log2_exact(n: int) -> int:
    if n < 2 or n & (n - 1):
        raise ContractError(f"butterfly size must be a power of two >= 2, got {n}")
    return n.bit_length() - 1


def next_pow2(n: int) -> int:
    return max(2, 1 << (max(n, 1) - 1).bit_length())


class ButterflyMatrix:
    """Blocks of shape (log2 n, n/2, 2, 2) held in a non-prunable parameter."""

    def __init__(self, blocks, name: str = "blocks", dtype=None):
        blocks = np.asarray(blocks)
        if blocks.ndim != 4 or blocks.shape[2:] != (2, 2):
            raise DimensionError(f"blocks must be (m, n/2, 2, 2), got {blocks.shape}")
        m = _log2_exact(2 * blocks.shape[1])
        if blocks.shape[0] != m:
            raise DimensionError(f"{blocks.shape[0]} factors for size {2 * blocks.shape[1]}, need {m}")
        self.blocks = Parameter(blocks, name=name, prunable=False, dtype=dtype)

    @property
    def n(self) -> int:
        return 2 * self.blocks.shape[1]

    @property
    def depth(self) -> int:
        return self.blocks.shape[0]

    def parameters(self) -> List[Parameter]:
        return [self.blocks]

    def __repr__(self):
        return f"ButterflyMatrix(n={self.n})"


def _filled(n: int, block) -> np.ndarray:
    m = _log2_exact(n)
    return np.broadcast_to(np.asarray(block, dtype=float), (m, n // 2, 2, 2)).copy()


def bf_identity(n: int) -> ButterflyMatrix:
    return ButterflyMatrix(_filled(n, [[1.0, 0.0], [0.0, 1.0]]))


def bf_hadamard(n: int) -> ButterflyMatrix:
    """Every block [[1, 1], [1, -1]]; the product is the Sylvester Hadamard matrix."""
    return ButterflyMatrix(_filled(n, [[1.0, 1.0], [1.0, -1.0]]))


def bf_random_init(n: int, seed=None, dtype=np.float64) -> ButterflyMatrix:
    """Independent Givens rotations in every block, so the product is orthogonal."""
    m = _log2_exact(n)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=(m, n // 2))
    c, s = np.cos(phi), np.sin(phi)
    blocks = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
    return ButterflyMatrix(blocks, dtype=dtype)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def bf_matvec(B: ButterflyMatrix, x) -> Tensor:
    """``B @ x`` for x of shape (n,) or a batch of row vectors (..., n)."""
    x = _as_tensor(x)
    if x.shape[-1] != B.n:
        raise DimensionError(f"vector length {x.shape[-1]} != butterfly size {B.n}")
    return ad.butterfly_multiply(x, B.blocks.effective())


def bf_rmatvec(B: ButterflyMatrix, x) -> Tensor:
    """``B^T @ x``: factors in reverse order, each block transposed."""
    x = _as_tensor(x)
    if x.shape[-1] != B.n:
        raise DimensionError(f"vector length {x.shape[-1]} != butterfly size {B.n}")
    return ad.butterfly_multiply(x, B.blocks.effective(), transpose=True)


def bf_matmul(B: ButterflyMatrix, X) -> Tensor:
    """``B @ X`` for X of shape (n, k) (columns are vectors)."""
    X = _as_tensor(X)
    return ad.transpose(bf_matvec(B, ad.transpose(X)))


def bf_to_dense(B: ButterflyMatrix) -> Tensor:
    eye = Tensor(np.eye(B.n, dtype=B.blocks.value.dtype))
    return ad.transpose(bf_matvec(B, eye))


def bf_factor_dense(B: ButterflyMatrix, level: int) -> np.ndarray:
    """Dense n x n matrix of factor ``level`` (1-based)."""
    n = B.n
    s = 1 << (level - 1)
    blocks = B.blocks.data[level - 1]
    out = np.zeros((n, n), dtype=blocks.dtype)
    for p in range(n // 2):
        group, offset = divmod(p, s)
        i = group * 2 * s + offset
        j = i + s
        (a, b), (c, d) = blocks[p]
        out[i, i], out[i, j], out[j, i], out[j, j] = a, b, c, d
    return out


class KaleidoscopeMatrix:
    """Product of ``w`` pairs B_i C_i^T; the first pair is leftmost."""

    def __init__(self, pairs: Sequence[tuple]):
        if not pairs:
            raise ContractError("a kaleidoscope matrix needs at least one (B, C) pair")
        sizes = {mat.n for pair in pairs for mat in pair}
        if len(sizes) != 1:
            raise DimensionError(f"all butterflies must share one size, got {sorted(sizes)}")
        self.pairs = [tuple(p) for p in pairs]

    @property
    def n(self) -> int:
        return self.pairs[0][0].n

    @property
    def width(self) -> int:
        return len(self.pairs)

    def parameters(self) -> List[Parameter]:
        return [p for pair in self.pairs for mat in pair for p in mat.parameters()]

    def __repr__(self):
        return f"KaleidoscopeMatrix(n={self.n}, w={self.width})"


def kmat_random_init(n: int, width: int = 1, seed=None, dtype=np.float64) -> KaleidoscopeMatrix:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return KaleidoscopeMatrix([(bf_random_init(n, rng, dtype), bf_random_init(n, rng, dtype))
                               for _ in range(width)])


def kmat_identity(n: int, width: int = 1) -> KaleidoscopeMatrix:
    return KaleidoscopeMatrix([(bf_identity(n), bf_identity(n)) for _ in range(width)])


def kmat_matvec(K: KaleidoscopeMatrix, x) -> Tensor:
    x = _as_tensor(x)
    if x.shape[-1] != K.n:
        raise DimensionError(f"vector length {x.shape[-1]} != kaleidoscope size {K.n}")
    for B, C in reversed(K.pairs):
        x = bf_matvec(B, bf_rmatvec(C, x))
    return x


def kmat_to_dense(K: KaleidoscopeMatrix) -> Tensor:
    eye = Tensor(np.eye(K.n, dtype=K.pairs[0][0].blocks.value.dtype))
    return ad.transpose(kmat_matvec(K, eye))


Inner = Union[ButterflyMatrix, KaleidoscopeMatrix]


def _inner_apply(inner: Inner, x: Tensor) -> Tensor:
    if isinstance(inner, KaleidoscopeMatrix):
        return kmat_matvec(inner, x)
    return bf_matvec(inner, x)


@dataclass
class RectangularButterflyMap:
    """in_dim -> out_dim map: pad with zeros to ``inner.n``, multiply, truncate."""

    in_dim: int
    out_dim: int
    inner: Inner

    def __post_init__(self):
        need = next_pow2(max(self.in_dim, self.out_dim))
        if self.inner.n < max(self.in_dim, self.out_dim):
            raise DimensionError(f"inner size {self.inner.n} smaller than {need}")

    @classmethod
    def random(cls, in_dim: int, out_dim: int, seed=None, kaleidoscope: bool = False,
               width: int = 1, dtype=np.float64) -> "RectangularButterflyMap":
        n = next_pow2(max(in_dim, out_dim))
        inner = kmat_random_init(n, width, seed, dtype) if kaleidoscope else bf_random_init(n, seed, dtype)
        return cls(in_dim, out_dim, inner)

    @property
    def n(self) -> int:
        return self.inner.n

    def parameters(self) -> List[Parameter]:
        return self.inner.parameters()


def rect_matvec(R: RectangularButterflyMap, x) -> Tensor:
    x = _as_tensor(x)
    if x.shape[-1] != R.in_dim:
        raise DimensionError(f"input length {x.shape[-1]} != in_dim {R.in_dim}")
    widths = [(0, 0)] * (x.ndim - 1) + [(0, R.n - R.in_dim)]
    y = _inner_apply(R.inner, ad.pad(x, widths) if R.n > R.in_dim else x)
    if R.out_dim < R.n:
        y = ad.index(y, (Ellipsis, slice(0, R.out_dim)))
    return y


class ButterflyLinear(Layer):
    """Drop-in replacement for a dense layer: rectangular butterfly map plus bias."""

    kind = "butterfly_linear"

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype=np.float64):
        self.in_features = in_features
        self.out_features = out_features
        self.map = RectangularButterflyMap.random(in_features, out_features, rng, dtype=dtype)
        self.bias = Parameter(np.zeros(out_features), dtype=dtype)

    def parameters(self):
        return self.map.parameters() + [self.bias]

    def forward(self, x, ctx):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionError(f"butterfly layer expects (B, {self.in_features}), got {x.shape}")
        return rect_matvec(self.map, x) + self.bias.effective()

    def output_shape(self, in_shape):
        return (self.out_features,)

    def __repr__(self):
        return f"ButterflyLinear({self.in_features}, {self.out_features}, n={self.map.n})"


class KConv2D(Layer):
    """Convolution whose per-patch channel map is a rectangular kaleidoscope map.

    Patches come from the same im2col layout as :class:`~structsparse.layers.Conv2D`,
    so input and output shapes equal those of the dense convolution it replaces.
    """

    kind = "kconv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, width: int = 1, dtype=np.float64):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.map = RectangularButterflyMap.random(in_channels * kernel_size ** 2, out_channels, rng,
                                                  kaleidoscope=True, width=width, dtype=dtype)
        self.bias = Parameter(np.zeros(out_channels), dtype=dtype)

    def parameters(self):
        return self.map.parameters() + [self.bias]

    def forward(self, x, ctx):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(f"kconv expects (B, {self.in_channels}, H, W), got {x.shape}")
        b, _, h, w = x.shape
        k, s, p = self.kernel_size, self.stride, self.padding
        ho, wo = ad.conv_output_size(h, k, s, p), ad.conv_output_size(w, k, s, p)
        cols = ad.im2col(x, k, s, p)
        y = rect_matvec(self.map, cols) + self.bias.effective()
        return ad.transpose(ad.reshape(y, (b, ho, wo, self.out_channels)), (0, 3, 1, 2))

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise DimensionError(f"kconv expects {self.in_channels} channels, got {c}")
        k, s, p = self.kernel_size, self.stride, self.padding
        return (self.out_channels, ad.conv_output_size(h, k, s, p), ad.conv_output_size(w, k, s, p))

    def __repr__(self):
        return f"KConv2D({self.in_channels}, {self.out_channels}, k={self.kernel_size}, n={self.map.n})"


def kconv_forward(layer: KConv2D, x, ctx: ForwardContext = None) -> Tensor:
    return layer.forward(_as_tensor(x), ctx or ForwardContext())


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------

def _inner_of(obj):
    if isinstance(obj, (ButterflyLinear, KConv2D)):
        return obj.map.inner
    if isinstance(obj, RectangularButterflyMap):
        return obj.inner
    return obj


def structured_param_count(layer) -> int:
    """Number of butterfly block entries (biases excluded)."""
    inner = _inner_of(layer)
    if isinstance(inner, ButterflyMatrix):
        return 2 * inner.n * inner.depth
    if isinstance(inner, KaleidoscopeMatrix):
        return 4 * inner.n * _log2_exact(inner.n) * inner.width
    raise TypeError(f"not a structured layer: {layer!r}")


def _macs_per_vector(inner) -> int:
    m = _log2_exact(inner.n)
    if isinstance(inner, KaleidoscopeMatrix):
        return 4 * inner.n * m * inner.width
    return 2 * inner.n * m


def structured_flops(layer, input_shape: tuple = None) -> int:
    """Multiply-accumulates for one sample.

    Matrices and linear maps process one vector; a :class:`KConv2D` processes
    one vector per output position, so ``input_shape`` (C, H, W) is required.
    """
    per_vec = _macs_per_vector(_inner_of(layer))
    if isinstance(layer, KConv2D):
        if input_shape is None:
            raise ContractError("KConv2D flops need the (C, H, W) input shape")
        _, ho, wo = layer.output_shape(tuple(input_shape))
        return per_vec * ho * wo
    return per_vec


def dense_reference_macs(layer, input_shape: tuple) -> int:
    """MACs of the dense layer a structured layer replaces."""
    if isinstance(layer, KConv2D):
        _, ho, wo = layer.output_shape(tuple(input_shape))
        return layer.kernel_size ** 2 * layer.in_channels * layer.out_channels * ho * wo
    if isinstance(layer, ButterflyLinear):
        return layer.in_features * layer.out_features
    if isinstance(layer, RectangularButterflyMap):
        return layer.in_dim * layer.out_dim
    n = layer.n
    return n * n
