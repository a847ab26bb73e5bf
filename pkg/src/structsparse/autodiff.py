"""Dense tensors with a reverse-mode gradient tape.

Every differentiable result records a :class:`Node` holding its parents and a
closure that maps the output gradient to input gradients. Node ids come from a
single increasing counter, so a node's inputs always carry smaller ids and
sorting by id in reverse is a valid backward order.

Tensors are value-semantic wrappers around ``numpy`` arrays; a tape built by
one thread must be differentiated by that same thread.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .exceptions import ContractError, DimensionError

DEFAULT_DTYPE = np.float64

_ids = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (used for evaluation passes)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@dataclass
class Node:
    id: int
    op: str
    parents: tuple
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """An n-dimensional float array that may take part in differentiation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.id = next(_ids)

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _wrap(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _coerce(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, _wrap(b, a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return _wrap(a, b.dtype), b
    return _wrap(a), _wrap(b)


def _make(data: np.ndarray, parents: tuple, op: str, fn) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(out.id, op, parents, fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("root does not depend on any tensor requiring grad")
    seed = np.ones_like(root.data)
    if root.node is None:
        root.grad = seed if root.grad is None else root.grad + seed
        return

    order = []
    seen = set()
    stack = [root]
    while stack:
        t = stack.pop()
        if t.id in seen:
            continue
        seen.add(t.id)
        if t.node is not None:
            order.append(t)
            stack.extend(p for p in t.node.parents if p.requires_grad)
    order.sort(key=lambda t: t.id, reverse=True)

    pending = {root.id: seed}
    for t in order:
        g = pending.pop(t.id, None)
        if g is None:
            continue
        for parent, pg in zip(t.node.parents, t.node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            elif parent.id in pending:
                pending[parent.id] = pending[parent.id] + pg
            else:
                pending[parent.id] = pg


def grad(root: Tensor, inputs: Sequence[Tensor]) -> list:
    """Return d(root)/d(input) for each input; their ``.grad`` fields are left as they were."""
    saved = [t.grad for t in inputs]
    for t in inputs:
        t.grad = None
    backward(root)
    out = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    for t, s in zip(inputs, saved):
        t.grad = s
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), "add", lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"cannot subtract shapes {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), "sub", lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    ad, bd = a.data, b.data

    def fn(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), "mul", fn)


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * c, (x,), "scale", lambda g: (g * c,))


def tensor_abs(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), "abs", lambda g: (g * sign,))


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _make(np.where(on, x.data, 0.0).astype(x.dtype), (x,), "relu", lambda g: (g * on,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make(s, (x,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def pswish(x: Tensor, beta: float) -> Tensor:
    """``t * sigmoid(beta * t)``; ``beta`` is a schedule constant, not learned."""
    if beta < 0:
        raise ContractError(f"beta must be >= 0, got {beta}")
    t = x.data
    s = _sigmoid(beta * t)
    return _make(t * s, (x,), "pswish", lambda g: (g * (s + beta * t * s * (1.0 - s)),))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tensor_sum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), "sum", fn)


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tensor_sum(x, axis), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {shape}") from exc
    return _make(out, (x,), "reshape", lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (x,), "transpose", lambda g: (np.transpose(g, inv),))


def index(x: Tensor, key) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def fn(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.asarray(x.data[key]), (x,), "index", fn)


def pad(x: Tensor, widths) -> Tensor:
    """Zero-pad; ``widths`` follows ``numpy.pad`` (one (before, after) pair per axis)."""
    widths = [tuple(w) for w in widths]
    slices = tuple(slice(b, b + n) for (b, _), n in zip(widths, x.shape))
    return _make(np.pad(x.data, widths), (x,), "pad", lambda g: (g[slices],))


# ---------------------------------------------------------------------------
# linear algebra and network primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), "matmul", fn)


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean cross entropy over the batch.

    ``target`` is either an integer label vector of shape (B,) or a per-row
    probability distribution of shape (B, K), e.g. label-smoothed targets.
    """
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (B, K), got {logits.shape}")
    batch, k = logits.shape
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    if target.ndim == 1:
        if target.shape[0] != batch:
            raise DimensionError(f"{target.shape[0]} labels for batch of {batch}")
        if target.size and (target.min() < 0 or target.max() >= k):
            raise DimensionError(f"labels outside [0, {k})")
        dist = np.zeros((batch, k), dtype=logits.dtype)
        dist[np.arange(batch), target.astype(np.int64)] = 1.0
    else:
        if target.shape != (batch, k):
            raise DimensionError(f"target shape {target.shape} does not match logits {logits.shape}")
        dist = target.astype(logits.dtype)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -(dist * logp).sum() / batch
    probs = np.exp(logp)
    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), "xent",
                 lambda g: (g * (probs - dist) / batch,))


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout: zero with probability ``p`` and rescale survivors by 1/(1-p)."""
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must lie in [0, 1), got {p}")
    if rng is None:
        raise ContractError("training-mode dropout needs a seeded generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _make(x.data * keep, (x,), "dropout", lambda g: (g * keep,))


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling over the two trailing axes."""
    b, c, h, w = x.shape
    if h % size or w % size:
        raise DimensionError(f"spatial size {(h, w)} not divisible by pool {size}")
    ho, wo = h // size, w // size
    win = x.data.reshape(b, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, size * size)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def fn(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(b, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        return (gx,)

    return _make(out, (x,), "maxpool2d", fn)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise DimensionError(
            f"non-integral conv output: ({size} + 2*{padding} - {k}) / {stride} + 1"
        )
    return span // stride + 1


def im2col(x: Tensor, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Expand (B, C, H, W) into patch rows of shape (B*H'*W', C*k*k).

    Row order is (batch, out_row, out_col); column order is (channel, ky, kx),
    matching ``kernel.reshape(Cout, -1)``.
    """
    if x.ndim != 4:
        raise DimensionError(f"im2col expects (B, C, H, W), got {x.shape}")
    b, c, h, w = x.shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    img = np.pad(x.data, [(0, 0), (0, 0), (padding, padding), (padding, padding)])
    col = np.empty((b, c, k, k, ho, wo), dtype=x.dtype)
    for ky in range(k):
        ymax = ky + stride * ho
        for kx in range(k):
            xmax = kx + stride * wo
            col[:, :, ky, kx] = img[:, :, ky:ymax:stride, kx:xmax:stride]
    out = col.transpose(0, 4, 5, 1, 2, 3).reshape(b * ho * wo, c * k * k)

    def fn(g):
        gcol = g.reshape(b, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
        gimg = np.zeros_like(img)
        for ky in range(k):
            ymax = ky + stride * ho
            for kx in range(k):
                xmax = kx + stride * wo
                gimg[:, :, ky:ymax:stride, kx:xmax:stride] += gcol[:, :, ky, kx]
        return (gimg[:, :, padding:padding + h, padding:padding + w],)

    return _make(out, (x,), "im2col", fn)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (B, C, H, W) with a (Cout, Cin, k, k) kernel via im2col."""
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise DimensionError(f"kernel must be (Cout, Cin, k, k), got {kernel.shape}")
    cout, cin, k, _ = kernel.shape
    if x.ndim != 4 or x.shape[1] != cin:
        raise DimensionError(f"input {x.shape} does not have {cin} channels")
    b, _, h, w = x.shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    cols = im2col(x, k, stride, padding)
    out = matmul(cols, transpose(reshape(kernel, (cout, cin * k * k))))
    return transpose(reshape(out, (b, ho, wo, cout)), (0, 3, 1, 2))


def butterfly_multiply(x: Tensor, blocks: Tensor, transpose: bool = False) -> Tensor:
    """Apply a butterfly matrix (or its transpose) along the last axis of ``x``.

    ``blocks`` has shape (m, n/2, 2, 2). Level ``j`` (0-based) mixes index
    pairs (i, i + 2**j) inside contiguous groups of size 2**(j+1); pair
    ``p = group * 2**j + offset`` owns ``blocks[j, p]``. The forward product
    applies level 0 first. The transpose applies levels in reverse with each
    2x2 block transposed.
    """
    m, half, two, two_ = blocks.shape
    n = 2 * half
    if two != 2 or two_ != 2 or n != 2 ** m:
        raise DimensionError(f"blocks shape {blocks.shape} is not (log2 n, n/2, 2, 2)")
    if x.shape[-1] != n:
        raise DimensionError(f"last axis {x.shape[-1]} != butterfly size {n}")
    lead = x.shape[:-1]
    rows = x.data.reshape(-1, n)
    bd = blocks.data
    if transpose:
        bd = bd.swapaxes(-1, -2)
    levels = range(m - 1, -1, -1) if transpose else range(m)

    saved = []
    cur = rows
    for j in levels:
        s = 1 << j
        xr = cur.reshape(-1, n // (2 * s), 2, s)
        blk = bd[j].reshape(n // (2 * s), s, 2, 2)
        x0, x1 = xr[:, :, 0, :], xr[:, :, 1, :]
        y = np.empty_like(xr)
        y[:, :, 0, :] = blk[..., 0, 0] * x0 + blk[..., 0, 1] * x1
        y[:, :, 1, :] = blk[..., 1, 0] * x0 + blk[..., 1, 1] * x1
        saved.append((j, xr))
        cur = y.reshape(-1, n)
    out = cur.reshape(*lead, n)

    def fn(g):
        gcur = g.reshape(-1, n)
        gblocks = np.zeros_like(bd)
        for j, xr in reversed(saved):
            s = 1 << j
            blk = bd[j].reshape(n // (2 * s), s, 2, 2)
            gr = gcur.reshape(-1, n // (2 * s), 2, s)
            g0, g1 = gr[:, :, 0, :], gr[:, :, 1, :]
            x0, x1 = xr[:, :, 0, :], xr[:, :, 1, :]
            gb = np.empty((n // (2 * s), s, 2, 2), dtype=bd.dtype)
            gb[..., 0, 0] = (g0 * x0).sum(axis=0)
            gb[..., 0, 1] = (g0 * x1).sum(axis=0)
            gb[..., 1, 0] = (g1 * x0).sum(axis=0)
            gb[..., 1, 1] = (g1 * x1).sum(axis=0)
            gblocks[j] = gb.reshape(half, 2, 2)
            gx = np.empty_like(gr)
            gx[:, :, 0, :] = blk[..., 0, 0] * g0 + blk[..., 1, 0] * g1
            gx[:, :, 1, :] = blk[..., 0, 1] * g0 + blk[..., 1, 1] * g1
            gcur = gx.reshape(-1, n)
        if transpose:
            gblocks = gblocks.swapaxes(-1, -2)
        gx_out = gcur.reshape(*lead, n) if x.requires_grad else None
        return gx_out, (gblocks if blocks.requires_grad else None)

    return _make(out, (x, blocks), "butterfly", fn)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class Parameter:
    """A trainable leaf tensor with an optional binary pruning mask.

    When a hard ``mask`` is set, forward passes consume ``value * mask``. A
    continuous ``soft_mask`` (values in [0, 1]) takes precedence and is itself
    trainable; it is only used while learning a mask before pruning.
    """

    def __init__(self, value, name: str = "", prunable: bool = False, dtype=None):
        self.value = Tensor(value, requires_grad=True, dtype=dtype)
        self.name = name
        self.prunable = prunable
        self.mask: Optional[np.ndarray] = None
        self.soft_mask: Optional[Tensor] = None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.value.grad

    def set_mask(self, mask: Optional[np.ndarray]) -> None:
        if mask is None:
            self.mask = None
            return
        mask = np.asarray(mask)
        if mask.shape != self.shape:
            raise DimensionError(f"mask shape {mask.shape} != parameter shape {self.shape}")
        if not np.isin(mask, (0, 1)).all():
            raise ContractError("mask entries must be 0 or 1")
        self.mask = mask.astype(self.value.dtype)

    def effective(self) -> Tensor:
        if self.soft_mask is not None:
            return mul(self.value, self.soft_mask)
        if self.mask is not None:
            return mul(self.value, Tensor(self.mask))
        return self.value

    def zero_grad(self) -> None:
        self.value.grad = None
        if self.soft_mask is not None:
            self.soft_mask.grad = None

    def __repr__(self) -> str:
        tag = "prunable" if self.prunable else "fixed"
        return f"Parameter({self.name!r}, shape={self.shape}, {tag})"
