"""Pruning scores, global-threshold masks, and layer-collapse detection.

Only prunable parameters (dense/conv weights) are ever scored or masked;
biases and structured-layer parameters are left alone. All one-shot scores
are ranked globally across layers.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .exceptions import ContractError, DimensionError
from .models import Model

METHODS = ("random", "magnitude", "snip", "grasp", "synflow")


@dataclass(frozen=True)
class SparsityLevel:
    """Fraction ``s`` of prunable weights that survive."""

    fraction: float

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ContractError(f"remaining fraction must lie in (0, 1], got {self.fraction}")

    @classmethod
    def from_fraction(cls, s: float) -> "SparsityLevel":
        return cls(float(s))

    @classmethod
    def from_exponent(cls, k: float) -> "SparsityLevel":
        return cls(10.0 ** (-float(k)))

    @property
    def compression(self) -> float:
        return -math.log10(self.fraction)

    exponent = compression

    def keep_count(self, total: int) -> int:
        # rounding guards against 0.1 * 30 -> 3.0000000000000004 -> 4
        return min(total, math.ceil(round(self.fraction * total, 9)))


def _level(s) -> SparsityLevel:
    return s if isinstance(s, SparsityLevel) else SparsityLevel.from_fraction(s)


@dataclass
class ScoreMap:
    scores: Dict[str, np.ndarray]
    method: str = ""

    def __getitem__(self, name):
        return self.scores[name]


@dataclass
class PruneMask:
    masks: Dict[str, np.ndarray]

    def __getitem__(self, name):
        return self.masks[name]

    def __iter__(self):
        return iter(self.masks)

    def __len__(self):
        return len(self.masks)

    @property
    def kept(self) -> int:
        return int(sum(m.sum() for m in self.masks.values()))

    @property
    def total(self) -> int:
        return int(sum(m.size for m in self.masks.values()))

    @property
    def density(self) -> float:
        return self.kept / self.total if self.total else 1.0

    @classmethod
    def ones(cls, model: Model) -> "PruneMask":
        return cls({p.name: np.ones(p.shape, dtype=bool) for p in model.prunable_parameters()})

    @classmethod
    def from_model(cls, model: Model) -> "PruneMask":
        """Current hard masks of the model (all-ones where none is set)."""
        return cls({p.name: (p.mask != 0) if p.mask is not None else np.ones(p.shape, dtype=bool)
                    for p in model.prunable_parameters()})


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

def build_mask(scores: ScoreMap, target) -> PruneMask:
    """Keep exactly ceil(s * N) highest-scoring entries across all parameters.

    Ties are broken by flat index over the concatenation of parameters in
    insertion order; the lower index is kept.
    """
    level = _level(target)
    names = list(scores.scores)
    flat = np.concatenate([np.asarray(scores.scores[n], dtype=np.float64).ravel() for n in names]) \
        if names else np.zeros(0)
    if not np.isfinite(flat).all():
        raise ContractError("scores must be finite")
    keep = level.keep_count(flat.size)
    order = np.lexsort((np.arange(flat.size), -flat))
    kept = np.zeros(flat.size, dtype=bool)
    kept[order[:keep]] = True
    masks, offset = {}, 0
    for n in names:
        shape = np.shape(scores.scores[n])
        size = int(np.prod(shape))
        masks[n] = kept[offset:offset + size].reshape(shape)
        offset += size
    return PruneMask(masks)


def apply_mask(model: Model, mask: PruneMask) -> Model:
    """Attach the mask and zero the pruned weights in place."""
    params = {p.name: p for p in model.prunable_parameters()}
    for name, m in mask.masks.items():
        if name not in params:
            raise ContractError(f"mask refers to unknown or non-prunable parameter {name!r}")
        p = params[name]
        if m.shape != p.shape:
            raise DimensionError(f"mask {name} shape {m.shape} != {p.shape}")
        p.set_mask(m.astype(p.value.dtype))
        p.value.data = p.value.data * p.mask
    return model


def remove_masks(model: Model) -> None:
    for p in model.parameters():
        p.set_mask(None)


# ---------------------------------------------------------------------------
# scorers
# ---------------------------------------------------------------------------

def _loss(model: Model, batch) -> Tensor:
    X, y = batch
    return ad.softmax_cross_entropy(model.forward(X, training=False), y)


def _check_batch(batch):
    X, y = batch
    if len(X) == 0:
        raise ContractError("scoring batch is empty")
    if len(X) != len(y):
        raise DimensionError(f"{len(X)} inputs but {len(y)} labels")


def _prunable_grads(model: Model, loss_fn: Callable[[], Tensor]) -> List[np.ndarray]:
    params = model.prunable_parameters()
    return ad.grad(loss_fn(), [p.value for p in params])


def score_random(model: Model, seed=0) -> ScoreMap:
    rng = np.random.default_rng(seed)
    return ScoreMap({p.name: rng.uniform(0.0, 1.0, p.shape) for p in model.prunable_parameters()}, "random")


def score_magnitude(model: Model) -> ScoreMap:
    return ScoreMap({p.name: np.abs(p.data) for p in model.prunable_parameters()}, "magnitude")


def score_snip(model: Model, batch) -> ScoreMap:
    """``|theta * dL/dtheta|`` with L the mean cross entropy of one batch (eval mode)."""
    _check_batch(batch)
    params = model.prunable_parameters()
    grads = _prunable_grads(model, lambda: _loss(model, batch))
    return ScoreMap({p.name: np.abs(p.data * g) for p, g in zip(params, grads)}, "snip")


def hessian_gradient_product(params: Sequence[Parameter], loss_fn: Callable[[], Tensor],
                             eps: Optional[float] = None) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Return (g, H g) for the loss restricted to ``params``.

    H g is a central difference of gradients along the unit direction g/|g|:
    ``|g| * (grad(theta + h u) - grad(theta - h u)) / 2h`` with
    ``h = 1e-4 * (1 + max|theta|)``.
    """
    values = [p.value for p in params]
    g = ad.grad(loss_fn(), values)
    norm = math.sqrt(sum(float((gi * gi).sum()) for gi in g))
    if norm == 0.0:
        return g, [np.zeros_like(gi) for gi in g]
    if eps is None:
        eps = 1e-4 * (1.0 + max(float(np.abs(v.data).max()) for v in values))
    base = [v.data.copy() for v in values]
    try:
        for v, b, gi in zip(values, base, g):
            v.data = b + eps * gi / norm
        g_plus = ad.grad(loss_fn(), values)
        for v, b, gi in zip(values, base, g):
            v.data = b - eps * gi / norm
        g_minus = ad.grad(loss_fn(), values)
    finally:
        for v, b in zip(values, base):
            v.data = b
    hg = [norm * (gp - gm) / (2.0 * eps) for gp, gm in zip(g_plus, g_minus)]
    return g, hg


def score_grasp(model: Model, batch) -> ScoreMap:
    """``-theta * (H g)``; the lowest scores are pruned."""
    _check_batch(batch)
    params = model.prunable_parameters()
    _, hg = hessian_gradient_product(params, lambda: _loss(model, batch))
    return ScoreMap({p.name: -p.data * h for p, h in zip(params, hg)}, "grasp")


def _bias_ids(model: Model) -> set:
    return {id(layer.bias) for layer in model.modules() if getattr(layer, "bias", None) is not None}


@contextlib.contextmanager
def _linearized(model: Model):
    """Temporarily replace every weight with its absolute value and every bias with zero.

    Biases inject flow below the input layer; without them the summed score of
    each layer is the same, which is what keeps iterative pruning from
    emptying the widest layer.
    """
    saved = [(p, p.value.data) for p in model.parameters()]
    biases = _bias_ids(model)
    try:
        for p, data in saved:
            p.value.data = np.zeros_like(data) if id(p) in biases else np.abs(data)
        yield
    finally:
        for p, data in saved:
            p.value.data = data


def _synflow_scores(model: Model) -> Dict[str, np.ndarray]:
    ones = Tensor(np.ones((1,) + model.input_shape, dtype=model.dtype))
    params = model.prunable_parameters()
    with _linearized(model):
        R = ad.tensor_sum(model.forward(ones, training=False))
        grads = ad.grad(R, [p.value for p in params])
        return {p.name: np.abs(p.data * g) for p, g in zip(params, grads)}


def score_synflow(model: Model, target, iterations: int = 100) -> PruneMask:
    """Iterative data-free pruning on the absolute-value, bias-free network.

    Each round scores ``|theta * dR/dtheta|`` where R sums the outputs for an
    all-ones input, then prunes globally to density ``s**(round/iterations)``.
    The model's own masks are restored on exit; the final mask is returned.
    """
    if iterations < 1:
        raise ContractError(f"iterations must be >= 1, got {iterations}")
    level = _level(target)
    params = model.prunable_parameters()
    saved = [(p.mask, p.value.data.copy()) for p in params]
    try:
        mask = PruneMask.from_model(model)
        for it in range(1, iterations + 1):
            apply_mask(model, mask)
            scores = _synflow_scores(model)
            mask = build_mask(ScoreMap(scores, "synflow"), SparsityLevel(level.fraction ** (it / iterations)))
    finally:
        for p, (m, data) in zip(params, saved):
            p.mask = m
            p.value.data = data
    return mask


def compute_mask(model: Model, method: str, target, *, seed: int = 0, batch=None,
                 synflow_iterations: int = 100) -> PruneMask:
    """Dispatch to a scoring method and build the global mask."""
    if method == "random":
        return build_mask(score_random(model, seed), target)
    if method == "magnitude":
        return build_mask(score_magnitude(model), target)
    if method == "snip":
        return build_mask(score_snip(model, batch), target)
    if method == "grasp":
        return build_mask(score_grasp(model, batch), target)
    if method == "synflow":
        return score_synflow(model, target, synflow_iterations)
    raise ContractError(f"unknown pruning method {method!r}; expected one of {METHODS}")


# ---------------------------------------------------------------------------
# collapse
# ---------------------------------------------------------------------------

@dataclass
class LayerSurvival:
    name: str
    surviving: int
    total: int


@dataclass
class CollapseReport:
    layers: List[LayerSurvival] = field(default_factory=list)
    path_exists: bool = True

    @property
    def empty_layers(self) -> List[str]:
        return [layer.name for layer in self.layers if layer.surviving == 0]

    @property
    def collapsed(self) -> bool:
        """True when a prunable layer is empty or no input-to-output path survives."""
        return bool(self.empty_layers) or not self.path_exists


def _mask_dict(mask) -> Dict[str, np.ndarray]:
    if mask is None:
        return {}
    return mask.masks if isinstance(mask, PruneMask) else dict(mask)


def signal_output(model: Model, mask=None) -> np.ndarray:
    """Eval-mode output for an all-ones input through ``|theta * M|`` with biases zeroed."""
    masks = _mask_dict(mask)
    saved = [(p, p.value.data, p.mask) for p in model.parameters()]
    bias_ids = _bias_ids(model)
    try:
        for p, data, m in saved:
            if id(p) in bias_ids:
                p.value.data = np.zeros_like(data)
                continue
            m = masks.get(p.name, m)
            p.mask = None
            p.value.data = np.abs(data) if m is None else np.abs(data) * m
        with ad.no_grad():
            ones = np.ones((1,) + model.input_shape, dtype=model.dtype)
            return model.forward(ones, training=False).data
    finally:
        for p, data, m in saved:
            p.value.data = data
            p.mask = m


def detect_collapse(model: Model, mask=None) -> CollapseReport:
    masks = _mask_dict(mask)
    layers = []
    for p in model.prunable_parameters():
        m = masks.get(p.name, p.mask)
        if m is not None and np.shape(m) != p.shape:
            raise DimensionError(f"mask {p.name} shape {np.shape(m)} != {p.shape}")
        surviving = p.value.size if m is None else int(np.count_nonzero(m))
        layers.append(LayerSurvival(p.name, surviving, p.value.size))
    out = signal_output(model, mask)
    return CollapseReport(layers, bool(np.any(out > 0)))


# ---------------------------------------------------------------------------
# learned masks
# ---------------------------------------------------------------------------

@dataclass
class LearnedMaskConfig:
    lambda1: float = 0.001
    lambda2: float = 0.05
    init_value: float = 0.5

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ContractError("mask regularization weights must be non-negative")


def learned_mask_loss(logit_loss: Tensor, masks: Sequence[Tensor], lambda1: float, lambda2: float) -> Tensor:
    """``loss + lambda1 * sum M(1 - M) + lambda2 * sum M`` over every mask entry."""
    total = logit_loss
    for m in masks:
        m = m if isinstance(m, Tensor) else Tensor(m)
        bimodal = ad.tensor_sum(ad.mul(m, ad.sub(1.0, m)))
        total = total + ad.scale(bimodal, lambda1) + ad.scale(ad.tensor_sum(m), lambda2)
    return total


def enable_learned_masks(model: Model, config: LearnedMaskConfig) -> List[Tensor]:
    """Give every prunable parameter a trainable soft mask initialised to ``init_value``."""
    out = []
    for p in model.prunable_parameters():
        p.soft_mask = Tensor(np.full(p.shape, config.init_value, dtype=p.value.dtype), requires_grad=True)
        out.append(p.soft_mask)
    return out


def clamp_learned_masks(model: Model) -> None:
    for p in model.prunable_parameters():
        if p.soft_mask is not None:
            np.clip(p.soft_mask.data, 0.0, 1.0, out=p.soft_mask.data)


def binarize_learned_masks(model: Model, threshold: float = 0.5) -> None:
    """Fold the learned mask into the weights (theta <- theta * [M >= threshold]) and drop it."""
    for p in model.prunable_parameters():
        if p.soft_mask is None:
            continue
        p.value.data = p.value.data * (p.soft_mask.data >= threshold)
        p.soft_mask = None
