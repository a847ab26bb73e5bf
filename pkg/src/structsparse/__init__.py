"""Butterfly and kaleidoscope layers, pruning-at-initialization methods, and an
experiment harness for mixing the two, on a small numpy autodiff core."""

from .autodiff import Parameter, Tensor, no_grad
from .data import Dataset, load_cifar10_binary, load_mnist_idx, synthetic_blobs
from .exceptions import ConfigError, ContractError, CorruptionError, DimensionError, FormatError, StructSparseError
from .metrics import count_flops, evaluate_top1, time_inference
from .models import Model, ModelConfig, build_model, zero_init
from .pruning import (PruneMask, SparsityLevel, apply_mask, build_mask, compute_mask, detect_collapse,
                      score_grasp, score_magnitude, score_random, score_snip, score_synflow)
from .structured import ButterflyLinear, ButterflyMatrix, KaleidoscopeMatrix, KConv2D
from .estimator import SparseNetClassifier

__version__ = "0.1.0"

__all__ = [
    "Parameter", "Tensor", "no_grad", "Dataset", "load_cifar10_binary", "load_mnist_idx", "synthetic_blobs",
    "ConfigError", "ContractError", "CorruptionError", "DimensionError", "FormatError", "StructSparseError",
    "count_flops", "evaluate_top1", "time_inference", "Model", "ModelConfig", "build_model", "zero_init",
    "PruneMask", "SparsityLevel", "apply_mask", "build_mask", "compute_mask", "detect_collapse",
    "score_grasp", "score_magnitude", "score_random", "score_snip", "score_synflow",
    "ButterflyLinear", "ButterflyMatrix", "KaleidoscopeMatrix", "KConv2D", "SparseNetClassifier",
]
