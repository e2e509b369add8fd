"""Experiment configuration.

Config files are plain text, one ``section.key = value`` per line; ``#``
starts a comment and list values are comma-separated::

    # toy run
    adapter.r = 8
    ordering.method = trans_z_order
    dataset.target_shapes = cylinder, cone, two_sphere

Values from the command line override the file.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .ordering import METHODS

SHAPES = ("sphere", "cube", "torus", "cylinder", "cone", "two_sphere")
BASES = ("gft", "dct")
MODES = ("full", "linear_probe", "pcsa")


@dataclass
class DatasetConfig:
    source_shapes: list[str] = field(default_factory=lambda: ["sphere", "cube", "torus"])
    target_shapes: list[str] = field(default_factory=lambda: ["cylinder", "cone", "two_sphere"])
    train_per_class: int = 200
    test_per_class: int = 100
    points: int = 256
    noise: float = 0.02
    seed: int = 0


@dataclass
class ModelConfig:
    n: int = 32
    g: int = 8
    d: int = 32
    layers: int = 2
    heads: int = 1
    embed_hidden: int = 32


@dataclass
class AdapterConfig:
    r: int = 8
    s: float = 1.0
    basis: str = "gft"


@dataclass
class OrderingConfig:
    method: str = "trans_z_order"
    k: int = 4


@dataclass
class OptimConfig:
    lr: float = 0.05
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    pretrain_lr: float = 0.02
    pretrain_epochs: int = 30


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    ordering: OrderingConfig = field(default_factory=OrderingConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    mode: str = "pcsa"

    def validate(self) -> "ExperimentConfig":
        m, a, o, d = self.model, self.adapter, self.ordering, self.dataset
        counts = {
            "model.n": m.n, "model.g": m.g, "model.d": m.d, "model.layers": m.layers,
            "model.heads": m.heads, "model.embed_hidden": m.embed_hidden, "ordering.k": o.k,
            "dataset.train_per_class": d.train_per_class, "dataset.test_per_class": d.test_per_class,
            "dataset.points": d.points, "optim.epochs": self.optim.epochs,
            "optim.batch_size": self.optim.batch_size,
        }
        for key, val in counts.items():
            if val < 1:
                raise ConfigError(f"{key} must be positive, got {val}")
        if m.n % o.k:
            raise ConfigError(f"ordering.k={o.k} must divide model.n={m.n}")
        if not 0 < a.r < m.d:
            raise ConfigError(f"adapter.r={a.r} must satisfy 0 < r < model.d={m.d}")
        if m.d % m.heads:
            raise ConfigError(f"model.d={m.d} not divisible by model.heads={m.heads}")
        if m.n > d.points or m.g > d.points:
            raise ConfigError("model.n and model.g must not exceed dataset.points")
        if o.method not in METHODS:
            raise ConfigError(f"ordering.method must be one of {METHODS}, got {o.method!r}")
        if a.basis not in BASES:
            raise ConfigError(f"adapter.basis must be one of {BASES}, got {a.basis!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for s in d.source_shapes + d.target_shapes:
            if s not in SHAPES:
                raise ConfigError(f"unknown shape {s!r}; expected one of {SHAPES}")
        if set(d.source_shapes) & set(d.target_shapes):
            raise ConfigError("source and target shapes must be disjoint")
        if d.noise < 0:
            raise ConfigError("dataset.noise must be non-negative")
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        cfg = cls()
        for key, value in flatten(data).items():
            set_key(cfg, key, value)
        return cfg

    def copy(self) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(self.to_dict())


def flatten(data: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in data.items():
        if isinstance(v, dict):
            out.update(flatten(v, f"{prefix}{k}."))
        else:
            out[prefix + k] = v
    return out


def keys() -> list[str]:
    return sorted(flatten(ExperimentConfig().to_dict()))


def _coerce(template: Any, value: Any, key: str) -> Any:
    try:
        if isinstance(template, list):
            if isinstance(value, str):
                return [v.strip() for v in value.split(",") if v.strip()]
            return list(value)
        if isinstance(template, bool):
            if isinstance(value, str):
                return value.strip().lower() in ("1", "true", "yes")
            return bool(value)
        if isinstance(template, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(template, float):
            return float(value)
        return str(value).strip()
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key}: {value!r}") from None


def get_key(cfg: ExperimentConfig, key: str) -> Any:
    obj: Any = cfg
    for part in key.split("."):
        if not hasattr(obj, part):
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(obj, part)
    return obj


def set_key(cfg: ExperimentConfig, key: str, value: Any) -> None:
    parts = key.split(".")
    obj: Any = cfg
    for part in parts[:-1]:
        if not dataclasses.is_dataclass(obj) or not hasattr(obj, part):
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(obj, part)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(obj) or leaf not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"unknown config key {key!r}")
    current = getattr(obj, leaf)
    if dataclasses.is_dataclass(current):
        raise ConfigError(f"{key!r} is a section, not a value")
    setattr(obj, leaf, _coerce(current, value, key))


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        values[key] = value
    return values


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        for key, value in parse_config_text(path.read_text(), str(path)).items():
            set_key(cfg, key, value)
    for key, value in (overrides or {}).items():
        set_key(cfg, key, value)
    return cfg.validate()


def format_config(cfg: ExperimentConfig) -> str:
    lines = []
    for key, value in flatten(cfg.to_dict()).items():
        if isinstance(value, list):
            value = ", ".join(map(str, value))
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2)
