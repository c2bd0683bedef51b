"""Experiment configuration: a single JSON document, unknown keys rejected."""

from __future__ import annotations

import json
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path

from .errors import InvalidArgument
from .models import parse_levels

METHODS = ("fedfd", "logit_baseline", "heterofl_only",
           "ablation:no_ortho", "ablation:no_group", "ablation:neither")


class ConfigError(InvalidArgument):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    classes: int = 4
    train_per_class: int = 500
    test_per_class: int = 250
    input_dim: int = 20
    spread: float = 1.0
    separation: float = 3.0
    seed: int = 0
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    clients: int = 20
    participation: float = 0.4
    rounds: int = 200
    local_epochs: int = 10
    batch_size: int = 64
    local_lr: float = 0.001
    distill_lr: float = 0.01
    weight_decay: float = 1e-4
    alpha: float = 1.0
    levels: str = "a-d-g"
    level_decay: float = 0.10
    widths: list[int] = field(default_factory=lambda: [64, 32])
    method: str = "fedfd"
    tau: float = 1.0
    kl_direction: str = "student_first"
    taylor_order: int = 12
    aggregation: str = "uniform"
    distill_fraction: float = 0.1
    distill_epochs: int = 1
    distill_batch_size: int = 64
    seed: int = 0
    checkpoint_every: int = 0
    targets: list[float] = field(default_factory=lambda: [0.8, 0.9])
    wall_clock_in_csv: bool = False
    out_dir: str = "runs/default"

    def validate(self) -> "ExperimentConfig":
        ds = self.dataset
        if ds.kind not in ("synthetic", "idx"):
            raise ConfigError("dataset.kind", f"must be 'synthetic' or 'idx', got {ds.kind!r}")
        if ds.kind == "idx":
            for name in ("train_images", "train_labels", "test_images", "test_labels"):
                if not getattr(ds, name):
                    raise ConfigError(f"dataset.{name}", "required for idx datasets")
        else:
            for name in ("classes", "train_per_class", "test_per_class", "input_dim"):
                if getattr(ds, name) < 1:
                    raise ConfigError(f"dataset.{name}", "must be positive")
            if ds.classes < 2:
                raise ConfigError("dataset.classes", "need at least two classes")
            if ds.spread < 0:
                raise ConfigError("dataset.spread", "must be non-negative")
        positive = ("clients", "batch_size", "distill_batch_size", "local_lr", "distill_lr",
                    "alpha", "tau", "level_decay")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be positive")
        for name in ("rounds", "local_epochs", "distill_epochs", "checkpoint_every", "taylor_order"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be non-negative")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be non-negative")
        if not 0 < self.participation <= 1:
            raise ConfigError("participation", "must lie in (0, 1]")
        if not 0 < self.distill_fraction < 1:
            raise ConfigError("distill_fraction", "must lie in (0, 1)")
        if self.method not in METHODS:
            raise ConfigError("method", f"must be one of {', '.join(METHODS)}")
        if self.kl_direction not in ("student_first", "teacher_first"):
            raise ConfigError("kl_direction", "must be 'student_first' or 'teacher_first'")
        if self.aggregation not in ("uniform", "sample"):
            raise ConfigError("aggregation", "must be 'uniform' or 'sample'")
        if not self.widths or min(self.widths) < 1:
            raise ConfigError("widths", "need at least one positive hidden width")
        try:
            parse_levels(self.levels, self.level_decay)
        except InvalidArgument as exc:
            raise ConfigError("levels", str(exc)) from None
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _build(cls, data: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(prefix.rstrip(".") or "config", "expected a JSON object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(prefix + unknown[0], "unknown key")
    kwargs = {}
    for name, value in data.items():
        if name == "dataset":
            value = _build(DatasetConfig, value, "dataset.")
        kwargs[name] = _coerce(prefix + name, known[name], value)
    return cls(**kwargs)


def _coerce(name, f, value):
    default = f.default if f.default_factory is MISSING else f.default_factory()
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(name, "expected true/false")
    elif isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(name, "expected an integer")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(name, "expected a number")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(name, "expected a string")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(name, "expected a list")
    return value


def parse_config(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data).validate()


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}") from None
    return parse_config(data)
