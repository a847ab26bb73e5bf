"""Model builders: the six-layer MLP and VGG16, plus initializers."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .exceptions import ConfigError, DimensionError
from .layers import (Conv2D, Dense, Dropout, Flatten, ForwardContext, Layer, MaxPool2D, PSwish, ReLU,
                     SoftSkip, soft_skip_forward)
from .structured import ButterflyLinear, KConv2D

VGG16_PLAN = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]

__all__ = [
    "ModelConfig", "Model", "build_model", "build_fc6", "build_vgg16", "zero_init",
    "partial_identity", "hadamard", "zero_matrix", "pswish", "soft_skip_forward",
    "collect_parameters", "forward", "VGG16_PLAN",
]


@dataclass
class ModelConfig:
    architecture: str = "fc6"
    head: str = "dense"
    body: str = "dense"
    hidden_width: int = 100
    n_layers: int = 6
    n_classes: int = 10
    dropout: float = 0.1
    activation: str = "relu"
    soft_skip: bool = False
    init: str = "random"
    input_shape: Optional[Tuple[int, ...]] = None
    vgg_plan: Optional[List] = None
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        self.architecture = self.architecture.lower()
        if self.architecture not in ("fc6", "vgg16"):
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.head not in ("dense", "butterfly"):
            raise ConfigError(f"head must be 'dense' or 'butterfly', got {self.head!r}")
        if self.body not in ("dense", "factorized"):
            raise ConfigError(f"body must be 'dense' or 'factorized', got {self.body!r}")
        if self.body == "factorized" and self.head != "butterfly":
            raise ConfigError("a factorized body requires a butterfly head")
        if self.activation not in ("relu", "pswish"):
            raise ConfigError(f"activation must be 'relu' or 'pswish', got {self.activation!r}")
        if self.init not in ("random", "zero"):
            raise ConfigError(f"init must be 'random' or 'zero', got {self.init!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.input_shape is None:
            self.input_shape = (1, 28, 28) if self.architecture == "fc6" else (3, 32, 32)
        self.input_shape = tuple(int(d) for d in self.input_shape)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d


class Model:
    """An ordered stack of layers with schedule values for PSwish and soft skips."""

    def __init__(self, layers: Sequence[Layer], input_shape: tuple, n_classes: int,
                 config: Optional[ModelConfig] = None):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.n_classes = n_classes
        self.config = config
        self.beta = 1.0
        self.gamma = 0.0
        self._name_parameters()

    def _name_parameters(self) -> None:
        for i, layer in enumerate(self.layers):
            for name, p in _named(layer):
                p.name = f"{i}.{name}"

    def parameters(self) -> List[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def named_parameters(self) -> Iterator[Tuple[str, Parameter]]:
        for p in self.parameters():
            yield p.name, p

    def prunable_parameters(self) -> List[Parameter]:
        return [p for p in self.parameters() if p.prunable]

    def modules(self) -> Iterator[Layer]:
        """Leaf layers in forward order (soft-skip blocks are expanded)."""
        for layer in self.layers:
            if isinstance(layer, SoftSkip):
                yield from layer.inner
            else:
                yield layer

    def forward(self, x, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if x.shape[1:] != self.input_shape:
            raise DimensionError(f"model expects (B, {self.input_shape}), got {x.shape}")
        ctx = ForwardContext(training=training, rng=rng, beta=self.beta, gamma=self.gamma)
        for layer in self.layers:
            x = layer.forward(x, ctx)
        return x

    __call__ = forward

    def logits(self, X: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Eval-mode logits for a numpy batch, without recording a tape."""
        outs = []
        with ad.no_grad():
            for start in range(0, len(X), batch_size):
                outs.append(self.forward(X[start:start + batch_size]).data)
        return np.concatenate(outs) if outs else np.zeros((0, self.n_classes))

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].value.dtype if params else np.float64

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def __repr__(self):
        body = "\n  ".join(repr(layer) for layer in self.layers)
        return f"Model(\n  {body}\n)"


def _named(layer: Layer):
    if isinstance(layer, SoftSkip):
        for j, inner in enumerate(layer.inner):
            for name, p in _named(inner):
                yield f"{j}.{name}", p
        return
    blocks = 0
    for p in layer.parameters():
        if p is getattr(layer, "weight", None):
            yield "weight", p
        elif p is getattr(layer, "bias", None):
            yield "bias", p
        else:
            yield f"blocks{blocks}", p
            blocks += 1


def _activation(config: ModelConfig) -> Layer:
    return PSwish() if config.activation == "pswish" else ReLU()


def build_fc6(config: ModelConfig) -> Model:
    """``n_layers`` linear layers (six by default) with activation and dropout in between."""
    if config.architecture != "fc6":
        raise ConfigError("build_fc6 needs architecture='fc6'")
    rng = np.random.default_rng(config.seed)
    dtype = np.dtype(config.dtype)
    in_dim = int(np.prod(config.input_shape))
    widths = [in_dim] + [config.hidden_width] * (config.n_layers - 1) + [config.n_classes]
    layers: List[Layer] = [Flatten()]
    for i in range(config.n_layers):
        n_in, n_out = widths[i], widths[i + 1]
        last = i == config.n_layers - 1
        structured = config.body == "factorized" or (last and config.head == "butterfly")
        lin = ButterflyLinear(n_in, n_out, rng, dtype) if structured else Dense(n_in, n_out, rng, dtype)
        if last:
            layers.append(lin)
            break
        block = [lin, _activation(config)]
        layers.extend([SoftSkip(block)] if config.soft_skip else block)
        if config.dropout > 0:
            layers.append(Dropout(config.dropout))
    model = Model(layers, config.input_shape, config.n_classes, config)
    if config.init == "zero":
        zero_init(model)
    return model


def build_vgg16(config: ModelConfig) -> Model:
    """VGG16 convolutional stack with a single linear classifier head.

    ``config.vgg_plan`` overrides the channel plan (ints are 3x3 convolutions,
    ``"M"`` is 2x2 max pooling), which lets tests build small VGG-style nets.
    """
    if config.architecture != "vgg16":
        raise ConfigError("build_vgg16 needs architecture='vgg16'")
    rng = np.random.default_rng(config.seed)
    dtype = np.dtype(config.dtype)
    plan = config.vgg_plan or VGG16_PLAN
    shape = config.input_shape
    layers: List[Layer] = []
    for v in plan:
        if v == "M":
            pool = MaxPool2D(2)
            layers.append(pool)
            shape = pool.output_shape(shape)
            continue
        cin = shape[0]
        if config.body == "factorized":
            conv = KConv2D(cin, int(v), 3, rng, padding=1, dtype=dtype)
        else:
            conv = Conv2D(cin, int(v), 3, rng, padding=1, dtype=dtype)
        shape = conv.output_shape(shape)
        block = [conv, _activation(config)]
        layers.extend([SoftSkip(block)] if config.soft_skip else block)
        if config.dropout > 0:
            layers.append(Dropout(config.dropout))
    layers.append(Flatten())
    feat = int(np.prod(shape))
    head = (ButterflyLinear(feat, config.n_classes, rng, dtype) if config.head == "butterfly"
            else Dense(feat, config.n_classes, rng, dtype))
    layers.append(head)
    model = Model(layers, config.input_shape, config.n_classes, config)
    if config.init == "zero":
        zero_init(model)
    return model


def build_model(config: ModelConfig) -> Model:
    if config.architecture == "fc6":
        return build_fc6(config)
    return build_vgg16(config)


# ---------------------------------------------------------------------------
# ZerO initialization
# ---------------------------------------------------------------------------

def partial_identity(r: int, c: int) -> np.ndarray:
    """The r x c matrix with ones on the main diagonal and zeros elsewhere."""
    return np.eye(r, c)


def hadamard(m: int) -> np.ndarray:
    h = np.ones((1, 1))
    for _ in range(m):
        h = np.block([[h, h], [h, -h]])
    return h


def zero_matrix(n_in: int, n_out: int) -> np.ndarray:
    """ZerO weight in (n_in x n_out) orientation."""
    if n_in == n_out:
        return np.eye(n_in)
    if n_in < n_out:
        return partial_identity(n_in, n_out)
    m = math.ceil(math.log2(n_in))
    c = 2.0 ** (-(m - 1) / 2)
    return c * partial_identity(n_in, 2 ** m) @ hadamard(m) @ partial_identity(2 ** m, n_out)


def zero_init(model: Model) -> Model:
    """Deterministic ZerO init of dense and conv weights; biases set to zero.

    Convolution kernels only receive the spatial centre tap. Structured layers
    keep their own initialization.
    """
    for layer in model.modules():
        if isinstance(layer, Dense):
            w = zero_matrix(layer.in_features, layer.out_features).T
        elif isinstance(layer, Conv2D):
            w = np.zeros(layer.weight.shape)
            k = layer.kernel_size // 2
            w[:, :, k, k] = zero_matrix(layer.in_channels, layer.out_channels).T
        else:
            continue
        layer.weight.value.data = w.astype(layer.weight.value.dtype)
        layer.bias.value.data = np.zeros_like(layer.bias.value.data)
        if layer.weight.mask is not None:
            layer.weight.value.data = layer.weight.value.data * layer.weight.mask
    return model


# ---------------------------------------------------------------------------
# functional helpers
# ---------------------------------------------------------------------------

def pswish(t, beta: float) -> Tensor:
    t = t if isinstance(t, Tensor) else Tensor(t)
    return ad.pswish(t, beta)


def collect_parameters(model: Model) -> List[Parameter]:
    return model.parameters()


def forward(model: Model, batch, mode: str = "eval", rng: Optional[np.random.Generator] = None) -> Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return model.forward(batch, training=mode == "train", rng=rng)
