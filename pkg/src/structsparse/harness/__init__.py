"""Experiment configuration, training, sweeps, checkpoints and the CLI."""

from .config import ExperimentConfig, LearnedMaskBlock, ScheduleConfig, dump_config, load_config, parse_config
from .io import (checkpoint_bytes, checkpoint_load, checkpoint_save, emit_csv, emit_json, emit_layer_flops,
                 read_csv, read_json)
from .schedules import ScheduleState, alpha_at, beta_at, gamma_at, label_smooth
from .sweep import TABLE1_REFERENCE, TABLE2_REFERENCE, sweep, sweep_configs, table_plan
from .training import ResultRow, prune_model, run_experiment, train_epochs

__all__ = [
    "ExperimentConfig", "LearnedMaskBlock", "ScheduleConfig", "dump_config", "load_config", "parse_config",
    "checkpoint_bytes", "checkpoint_load", "checkpoint_save", "emit_csv", "emit_json", "emit_layer_flops",
    "read_csv", "read_json", "ScheduleState", "alpha_at", "beta_at", "gamma_at", "label_smooth",
    "TABLE1_REFERENCE", "TABLE2_REFERENCE", "sweep", "sweep_configs", "table_plan",
    "ResultRow", "prune_model", "run_experiment", "train_epochs",
]
