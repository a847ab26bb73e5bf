"""Cross-product sweeps and the two published result tables."""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

from ..data import Dataset
from .config import ExperimentConfig
from .training import ResultRow, load_datasets, run_experiment

TABLE2_K = (0.05, 0.1, 0.2, 0.5, 1.0, 2.0)
TABLE_METHODS = ("random", "magnitude", "snip", "grasp", "synflow")


def sweep_configs(base: ExperimentConfig, methods: Sequence[str], ks: Sequence[float],
                  heads: Sequence[str] = ("dense",), seeds: Optional[Sequence[int]] = None
                  ) -> List[ExperimentConfig]:
    """One config per (method, k, head, seed), in that nesting order."""
    seeds = list(seeds) if seeds is not None else [base.seed]
    out = []
    for method in methods:
        for k in ks:
            for head in heads:
                for seed in seeds:
                    out.append(dataclasses.replace(base.with_k(k), method=method, head=head, seed=seed))
    return out


def sweep(configs: Sequence[ExperimentConfig], datasets: Optional[Tuple[Dataset, Dataset]] = None,
          workers: int = 1) -> List[ResultRow]:
    """Run every config; each run is seeded independently, so worker count does not change results."""
    configs = list(configs)
    cache: Dict[tuple, Tuple[Dataset, Dataset]] = {}

    def data_for(cfg: ExperimentConfig):
        if datasets is not None:
            return datasets
        key = (cfg.dataset, cfg.data_root, cfg.dtype, cfg.train_subset, cfg.seed)
        if key not in cache:
            cache[key] = load_datasets(cfg)
        return cache[key]

    if workers <= 1:
        return [run_experiment(cfg, data_for(cfg)) for cfg in configs]
    loaded = [data_for(cfg) for cfg in configs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_experiment, configs, loaded))


# ---------------------------------------------------------------------------
# published reference values (top-1 % for Table 1, seconds for Table 2)
# ---------------------------------------------------------------------------

TABLE1_REFERENCE = {
    ("cifar10", "dense"): {"random": 10.00, "magnitude": 87.36, "snip": 73.21, "grasp": 29.17,
                           "synflow": 79.75, "factorized": 88.01},
    ("mnist", "dense"): {"random": 94.49, "magnitude": 97.57, "snip": 95.54, "grasp": 94.74,
                         "synflow": 11.35, "factorized": 96.49},
    ("cifar10", "butterfly"): {"random": 10.00, "magnitude": 10.00, "snip": 86.52, "grasp": 14.04,
                               "synflow": 87.47, "factorized": 88.12},
    ("mnist", "butterfly"): {"random": 94.84, "magnitude": 97.25, "snip": 96.00, "grasp": 94.63,
                             "synflow": 11.35, "factorized": 97.44},
}

_T2_COLS = ("random", "magnitude", "snip", "grasp", "synflow", "factorized")
_T2_BUTTERFLY = [
    (1.67, 1.72, 1.71, 1.701, 1.782, 77.11),
    (1.66, 1.74, 1.73, 1.703, 1.957, None),
    (1.68, 1.68, 1.70, 1.68, 1.6659, None),
    (1.667, 1.67, 1.69, 1.70, 1.71, None),
    (1.628, 1.63, 1.66, 1.71, 1.71, None),
    (1.642, 1.68, 1.66, 1.60, 1.663, None),
]
_T2_DENSE = [
    (1.672, 1.721, 1.62, 1.71, 1.68, 75.02),
    (1.656, 1.729, 1.61, 1.66, 1.65, 74.61),
    (1.69, 1.677, 1.59, 1.647, 1.685, 76.82),
    (1.67, 1.69, 1.62, 1.66, 1.68, 75.23),
    (1.629, 1.689, 1.64, 1.595, 1.693, 75.20),
    (1.546, 1.692, 1.70, 1.64, 1.669, 75.59),
]
TABLE2_REFERENCE = {
    (head, k): dict(zip(_T2_COLS, values))
    for head, table in (("butterfly", _T2_BUTTERFLY), ("dense", _T2_DENSE))
    for k, values in zip(TABLE2_K, table)
}


def _table1_base(dataset: str, epochs: int) -> ExperimentConfig:
    arch = "vgg16" if dataset == "cifar10" else "fc6"
    return ExperimentConfig(dataset=dataset, architecture=arch, sparsity=0.1, epochs=epochs)


def table_plan(table: int, epochs: int = 50, pretrain_epochs: int = 10, data_root: Optional[str] = None
               ) -> List[Tuple[ExperimentConfig, Optional[float]]]:
    """Configs for a published table paired with the reference value of each cell.

    Table 1 uses remaining fraction 0.1 (k = 1). Table 2 row labels are read
    as exponents k, so row "0.5" means s = 10**-0.5. The full-factorized
    column has nothing to prune and runs once per head/dataset.
    """
    plan: List[Tuple[ExperimentConfig, Optional[float]]] = []
    if table == 1:
        for (dataset, head), ref in TABLE1_REFERENCE.items():
            base = dataclasses.replace(_table1_base(dataset, epochs), head=head, data_root=data_root,
                                       pretrain_epochs=pretrain_epochs)
            for method in TABLE_METHODS:
                plan.append((dataclasses.replace(base, method=method), ref[method]))
            fact = dataclasses.replace(base, head="butterfly", body="factorized", method="none", sparsity=1.0)
            plan.append((fact, ref["factorized"]))
        return plan
    if table == 2:
        base = dataclasses.replace(_table1_base("cifar10", epochs), data_root=data_root,
                                   pretrain_epochs=pretrain_epochs)
        for head in ("butterfly", "dense"):
            for k in TABLE2_K:
                ref = TABLE2_REFERENCE[(head, k)]
                for method in TABLE_METHODS:
                    plan.append((dataclasses.replace(base.with_k(k), method=method, head=head), ref[method]))
        fact = dataclasses.replace(base, head="butterfly", body="factorized", method="none", sparsity=1.0)
        plan.append((fact, TABLE2_REFERENCE[("butterfly", 0.05)]["factorized"]))
        return plan
    raise ValueError(f"table must be 1 or 2, got {table}")
