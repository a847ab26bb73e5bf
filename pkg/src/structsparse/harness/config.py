"""Experiment configuration and its flat ``key = value`` file format.

Config files are INI-style with three sections::

    [experiment]
    dataset = mnist
    method = magnitude
    k = 1            ; or: sparsity = 0.1

    [schedule]
    alpha0 = 0.3
    t_alpha = 50

    [learned_mask]
    enabled = true
    lambda1 = 0.001
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from typing import List, Optional

from ..exceptions import ConfigError
from ..models import ModelConfig
from ..pruning import METHODS, SparsityLevel


@dataclass
class ScheduleConfig:
    alpha0: float = 0.0
    t_alpha: int = 1
    beta0: float = 1.0
    beta_max: float = 20.0
    t_beta: int = 1
    gamma0: float = 0.0
    t_gamma: int = 1


@dataclass
class LearnedMaskBlock:
    enabled: bool = False
    lambda1: float = 0.001
    lambda2: float = 0.05


@dataclass
class ExperimentConfig:
    dataset: str = "mnist"
    data_root: Optional[str] = None
    train_subset: Optional[int] = None
    architecture: str = "fc6"
    head: str = "dense"
    body: str = "dense"
    hidden_width: int = 100
    activation: str = "relu"
    init: str = "random"
    vgg_plan: Optional[List] = None
    method: str = "none"
    sparsity: float = 1.0
    seed: int = 0
    lr: float = 0.001
    dropout: float = 0.1
    batch_size: int = 256
    pretrain_epochs: int = 10
    epochs: int = 50
    weight_decay: float = 0.0
    synflow_iterations: int = 100
    scoring_batch: int = 256
    train_on_collapse: bool = True
    dtype: str = "float64"
    timing_reps: int = 5
    timing_warmup: int = 2
    timing_batch: int = 256
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    learned_mask: LearnedMaskBlock = field(default_factory=LearnedMaskBlock)

    def __post_init__(self):
        if self.method not in ("none",) + METHODS:
            raise ConfigError(f"unknown pruning method {self.method!r}")
        try:
            SparsityLevel(self.sparsity)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.body == "factorized" and self.method != "none":
            raise ConfigError("a fully factorized model has nothing to prune; use method = none")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("lr, batch_size and epoch counts must be positive")
        self.model_config()

    @property
    def level(self) -> SparsityLevel:
        return SparsityLevel(self.sparsity)

    @property
    def k(self) -> float:
        return self.level.compression

    def with_k(self, k: float) -> "ExperimentConfig":
        return dataclasses.replace(self, sparsity=SparsityLevel.from_exponent(k).fraction)

    def model_config(self, input_shape=None, n_classes: int = 10) -> ModelConfig:
        return ModelConfig(
            architecture=self.architecture, head=self.head, body=self.body,
            hidden_width=self.hidden_width, n_classes=n_classes, dropout=self.dropout,
            activation=self.activation, soft_skip=self.schedule.gamma0 > 0, init=self.init,
            input_shape=input_shape, vgg_plan=self.vgg_plan, seed=self.seed, dtype=self.dtype,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Stable short hash over every field that affects results."""
        d = self.to_dict()
        for key in ("data_root", "timing_reps", "timing_warmup", "timing_batch"):
            d.pop(key)
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        sched = ScheduleConfig(**d.pop("schedule", {}) or {})
        mask = LearnedMaskBlock(**d.pop("learned_mask", {}) or {})
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(schedule=sched, learned_mask=mask, **d)


def _coerce(value: str, annotation):
    text = value.strip()
    if isinstance(annotation, str):
        annotation = eval(annotation, vars(typing))  # annotations are postponed strings
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if origin is typing.Union:
        if text.lower() in ("", "none", "null"):
            return None
        annotation = next(a for a in args if a is not type(None))
        origin = typing.get_origin(annotation)
    if annotation is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if annotation is int:
        return int(text)
    if annotation is float:
        return float(text)
    if origin in (list, typing.List) or annotation is list:
        return [int(t) if t.strip().isdigit() else t.strip() for t in text.split(",") if t.strip()]
    return text


def _fill(cls, items: dict, section: str) -> dict:
    fields = {f.name: f.type for f in dataclasses.fields(cls)}
    out = {}
    for key, value in items.items():
        if key not in fields:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        try:
            out[key] = _coerce(value, fields[key])
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from exc
    return out


def apply_overrides(raw: dict, overrides: List[str]) -> dict:
    """Merge ``section.key=value`` or ``key=value`` strings into a raw section dict."""
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        section, _, name = key.strip().rpartition(".")
        raw.setdefault(section or "experiment", {})[name] = value
    return raw


def parse_config(text: str = "", overrides: Optional[List[str]] = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    raw = {s: dict(parser.items(s)) for s in parser.sections()}
    raw = apply_overrides(raw, overrides or [])
    unknown = set(raw) - {"experiment", "schedule", "learned_mask"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    exp = dict(raw.get("experiment", {}))
    k = exp.pop("k", None)
    values = _fill(ExperimentConfig, exp, "experiment")
    if k is not None:
        if "sparsity" in values:
            raise ConfigError("give either k or sparsity, not both")
        values["sparsity"] = SparsityLevel.from_exponent(float(k)).fraction
    try:
        return ExperimentConfig(
            schedule=ScheduleConfig(**_fill(ScheduleConfig, raw.get("schedule", {}), "schedule")),
            learned_mask=LearnedMaskBlock(**_fill(LearnedMaskBlock, raw.get("learned_mask", {}), "learned_mask")),
            **values,
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, overrides: Optional[List[str]] = None) -> ExperimentConfig:
    text = ""
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, overrides)


def dump_config(config: ExperimentConfig) -> str:
    """Render a config in the file format accepted by :func:`parse_config`."""
    lines = ["[experiment]"]
    for f in dataclasses.fields(config):
        if f.name in ("schedule", "learned_mask"):
            continue
        value = getattr(config, f.name)
        if value is None:
            continue
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    for section in ("schedule", "learned_mask"):
        lines.append(f"\n[{section}]")
        for key, value in dataclasses.asdict(getattr(config, section)).items():
            lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
