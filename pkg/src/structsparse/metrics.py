"""FLOP accounting, inference timing and top-1 evaluation.

All FLOP figures are multiply-accumulates (MACs) per sample.
"""

from __future__ import annotations

import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .autodiff import no_grad
from .exceptions import ContractError, DimensionError
from .layers import Conv2D, Dense
from .models import Model
from .structured import ButterflyLinear, KConv2D, dense_reference_macs, structured_flops


@dataclass
class LayerFlops:
    name: str
    kind: str
    dense_macs: int
    effective_macs: float

    @property
    def flops_sparsity(self) -> float:
        return self.effective_macs / self.dense_macs if self.dense_macs else 1.0


@dataclass
class FlopsReport:
    layers: List[LayerFlops] = field(default_factory=list)

    @property
    def dense_total(self) -> int:
        return sum(layer.dense_macs for layer in self.layers)

    @property
    def effective_total(self) -> float:
        return sum(layer.effective_macs for layer in self.layers)

    @property
    def flops_sparsity(self) -> float:
        return self.effective_total / self.dense_total if self.dense_total else 1.0

    def per_layer(self) -> List[float]:
        return [layer.flops_sparsity for layer in self.layers]

    def to_dict(self) -> dict:
        return {
            "layers": [dict(asdict(layer), flops_sparsity=layer.flops_sparsity) for layer in self.layers],
            "dense_total": self.dense_total,
            "effective_total": self.effective_total,
            "flops_sparsity": self.flops_sparsity,
        }


def _density(param, masks: Dict[str, np.ndarray]) -> float:
    m = masks.get(param.name, param.mask)
    if m is None:
        return 1.0
    if np.shape(m) != param.shape:
        raise DimensionError(f"mask {param.name} shape {np.shape(m)} != {param.shape}")
    return float(np.count_nonzero(m)) / param.value.size


def count_flops(model: Model, mask=None, input_shape: Optional[tuple] = None) -> FlopsReport:
    """Per-layer dense and effective MACs for one sample.

    Dense and conv layers scale their MACs by the surviving-weight density.
    Structured layers report their own cost against the MACs of the dense
    layer they replace, so their ratio can exceed 1.
    """
    masks = {} if mask is None else (mask.masks if hasattr(mask, "masks") else dict(mask))
    shape = tuple(input_shape or model.input_shape)
    report = FlopsReport()
    for layer in model.modules():
        out_shape = layer.output_shape(shape)
        if isinstance(layer, Dense):
            dense = layer.in_features * layer.out_features
            report.layers.append(LayerFlops(layer.weight.name, layer.kind, dense,
                                            dense * _density(layer.weight, masks)))
        elif isinstance(layer, Conv2D):
            _, ho, wo = out_shape
            dense = layer.kernel_size ** 2 * layer.in_channels * layer.out_channels * ho * wo
            report.layers.append(LayerFlops(layer.weight.name, layer.kind, dense,
                                            dense * _density(layer.weight, masks)))
        elif isinstance(layer, (ButterflyLinear, KConv2D)):
            name = layer.bias.name.rsplit(".", 1)[0]
            report.layers.append(LayerFlops(name, layer.kind, dense_reference_macs(layer, shape),
                                            float(structured_flops(layer, shape))))
        shape = out_shape
    return report


@dataclass
class TimingReport:
    workload: str
    median_seconds: float
    samples: List[float]
    repetitions: int
    warmup: int
    threads: int
    precision: str
    platform: str = field(default_factory=platform.platform)


def _thread_count() -> int:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        if os.environ.get(var, "").isdigit():
            return int(os.environ[var])
    return os.cpu_count() or 1


def time_inference(model: Model, dataset, batch_size: int = 256, reps: int = 5, warmup: int = 2) -> TimingReport:
    """Median wall time of full eval-mode passes over ``dataset.images``.

    Only forward passes are timed; batches are sliced from memory up front.
    """
    images = dataset.images if hasattr(dataset, "images") else np.asarray(dataset)
    if len(images) == 0:
        raise ContractError("cannot time inference on an empty dataset")
    if reps < 1 or warmup < 0:
        raise ContractError("reps must be >= 1 and warmup >= 0")
    images = images.astype(model.dtype, copy=False)
    batches = [images[i:i + batch_size] for i in range(0, len(images), batch_size)]

    def run():
        with no_grad():
            for b in batches:
                model.forward(b)

    for _ in range(warmup):
        run()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        run()
        samples.append(time.perf_counter() - t0)
    name = getattr(dataset, "name", "array")
    return TimingReport(
        workload=f"{name}: {len(images)} samples, batch {batch_size}",
        median_seconds=statistics.median(samples),
        samples=samples,
        repetitions=reps,
        warmup=warmup,
        threads=_thread_count(),
        precision=str(np.dtype(model.dtype)),
    )


@dataclass
class EvalReport:
    accuracy: float
    samples: int
    confusion: np.ndarray

    def __post_init__(self):
        if self.samples and not np.isclose(self.accuracy, np.trace(self.confusion) / self.samples):
            raise ContractError("accuracy disagrees with the confusion matrix")


def top1_from_logits(logits: np.ndarray, labels: np.ndarray, n_classes: Optional[int] = None) -> EvalReport:
    """Argmax accuracy; ``np.argmax`` returns the lowest index on ties."""
    labels = np.asarray(labels, dtype=np.int64)
    k = n_classes or logits.shape[1]
    pred = np.argmax(logits, axis=1)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    n = len(labels)
    acc = float(np.trace(confusion)) / n if n else 0.0
    return EvalReport(acc, n, confusion)


def evaluate_top1(model: Model, dataset, batch_size: int = 256) -> EvalReport:
    logits = model.logits(dataset.images.astype(model.dtype, copy=False), batch_size)
    return top1_from_logits(logits, dataset.labels, model.n_classes)
