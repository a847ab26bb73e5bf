"""Training loop and the prune-then-train experiment pipeline."""

from __future__ import annotations

import logging
import os
import platform
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from .. import autodiff as ad
from ..data import Dataset, batches, load_named
from ..metrics import count_flops, evaluate_top1, time_inference
from ..models import Model, build_model
from ..optim import Adam
from ..pruning import (LearnedMaskConfig, PruneMask, apply_mask, binarize_learned_masks, clamp_learned_masks,
                       compute_mask, detect_collapse, enable_learned_masks, learned_mask_loss)
from .config import ExperimentConfig, ScheduleConfig
from .schedules import ScheduleState, label_smooth

log = logging.getLogger(__name__)


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *stream]))


def train_epochs(model: Model, train: Dataset, config: ExperimentConfig, epochs: int, *,
                 phase: int = 0, schedule: Optional[ScheduleConfig] = None,
                 learned: Optional[LearnedMaskConfig] = None,
                 on_epoch: Optional[Callable[[int, float], None]] = None) -> List[float]:
    """Run ``epochs`` of Adam on mean cross entropy and return the per-epoch mean loss.

    Batch order and dropout noise are drawn from streams derived from
    ``(config.seed, phase, epoch)``, so repeating a call reproduces it exactly.
    ``schedule`` drives label smoothing, PSwish temperature and the soft-skip
    weight epoch by epoch; when omitted the settled values are used.
    """
    schedule = schedule or ScheduleConfig(beta0=config.schedule.beta_max, beta_max=config.schedule.beta_max)
    masks = enable_learned_masks(model, learned) if learned is not None else []
    opt = Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    k = model.n_classes
    history = []
    for epoch in range(epochs):
        state = ScheduleState.at(schedule, epoch)
        model.beta, model.gamma = state.beta, state.gamma
        dropout_rng = _rng(config.seed, phase, epoch, 1)
        total, seen = 0.0, 0
        for X, y in batches(train, config.batch_size, seed=_rng(config.seed, phase, epoch, 0)):
            opt.zero_grad()
            target = label_smooth(y, state.alpha, k) if state.alpha > 0 else y
            loss = ad.softmax_cross_entropy(model.forward(X, training=True, rng=dropout_rng), target)
            objective = learned_mask_loss(loss, masks, learned.lambda1, learned.lambda2) if masks else loss
            objective.backward()
            opt.step()
            if masks:
                clamp_learned_masks(model)
            total += float(loss.data) * len(y)
            seen += len(y)
        mean_loss = total / max(seen, 1)
        history.append(mean_loss)
        log.debug("phase %d epoch %d loss %.4f", phase, epoch, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
    final = ScheduleState.at(schedule, epochs)
    model.beta, model.gamma = final.beta, final.gamma
    if masks:
        binarize_learned_masks(model)
    return history


def environment() -> dict:
    return {
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "platform": platform.platform(),
        "cpu_count": os.cpu_count(),
    }


@dataclass
class ResultRow:
    digest: str
    dataset: str
    architecture: str
    head: str
    body: str
    method: str
    k: float
    s: float
    seed: int
    accuracy: float
    collapsed: bool
    flops_sparsity: float
    layer_names: List[str] = field(default_factory=list)
    layer_flops: List[float] = field(default_factory=list)
    inference_seconds: float = 0.0
    train_seconds: float = 0.0
    environment: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def comparable(self) -> dict:
        """Fields that must repeat exactly for an identical config (no wall-clock values)."""
        d = self.to_dict()
        for key in ("inference_seconds", "train_seconds", "environment"):
            d.pop(key)
        return d


def _scoring_batch(train: Dataset, config: ExperimentConfig) -> Tuple[np.ndarray, np.ndarray]:
    idx = _rng(config.seed, 9).permutation(len(train))[:config.scoring_batch]
    return train.images[idx], train.labels[idx]


def load_datasets(config: ExperimentConfig) -> Tuple[Dataset, Dataset]:
    return load_named(config.dataset, config.data_root, np.dtype(config.dtype), config.train_subset, config.seed)


def prune_model(model: Model, train: Dataset, config: ExperimentConfig) -> Optional[PruneMask]:
    """Score the model with ``config.method`` and attach the global mask."""
    if config.method == "none":
        return None
    mask = compute_mask(model, config.method, config.level, seed=config.seed,
                        batch=_scoring_batch(train, config), synflow_iterations=config.synflow_iterations)
    apply_mask(model, mask)
    return mask


def run_experiment(config: ExperimentConfig, datasets: Optional[Tuple[Dataset, Dataset]] = None,
                   checkpoint_path=None, return_model: bool = False):
    """(pre-train) -> score -> mask -> collapse check -> train -> evaluate -> FLOPs -> timing.

    Pre-training only happens for magnitude pruning. Learned masks, when
    enabled, are trained during the first training phase and folded into the
    weights at its end. Collapsed models still train unless
    ``config.train_on_collapse`` is false.
    """
    train, test = datasets if datasets is not None else load_datasets(config)
    model = build_model(config.model_config(train.input_shape, train.n_classes))
    lm = config.learned_mask
    if lm.enabled and config.init == "zero" and lm.lambda2 > 0:
        warnings.warn("learned masks with ZerO init and lambda2 > 0 tend to drive every mask entry to 0; "
                      "consider lambda2 = 0", RuntimeWarning, stacklevel=2)
    learned = LearnedMaskConfig(lm.lambda1, lm.lambda2) if lm.enabled else None

    t0 = time.perf_counter()
    if config.method == "magnitude" and config.pretrain_epochs > 0:
        train_epochs(model, train, config, config.pretrain_epochs, phase=0, learned=learned)
        learned = None
    mask = prune_model(model, train, config)
    report = detect_collapse(model, mask)
    if report.collapsed:
        log.warning("collapse detected (%s): empty layers %s", config.method, report.empty_layers)
    if config.epochs > 0 and (config.train_on_collapse or not report.collapsed):
        train_epochs(model, train, config, config.epochs, phase=1, schedule=config.schedule, learned=learned)
    train_seconds = time.perf_counter() - t0

    accuracy = evaluate_top1(model, test, config.timing_batch).accuracy
    flops = count_flops(model, mask)
    timing = time_inference(model, test, config.timing_batch, config.timing_reps, config.timing_warmup)
    env = environment()
    env.update(threads=timing.threads, precision=timing.precision, timing_workload=timing.workload)
    row = ResultRow(
        digest=config.digest(), dataset=config.dataset, architecture=config.architecture, head=config.head,
        body=config.body, method=config.method, k=config.k, s=config.sparsity, seed=config.seed,
        accuracy=accuracy, collapsed=report.collapsed, flops_sparsity=flops.flops_sparsity,
        layer_names=[layer.name for layer in flops.layers], layer_flops=flops.per_layer(),
        inference_seconds=timing.median_seconds, train_seconds=train_seconds, environment=env,
    )
    if checkpoint_path is not None:
        from .io import checkpoint_save
        checkpoint_save(model, mask, checkpoint_path)
    return (row, model) if return_model else row
