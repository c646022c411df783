"""Experiment configuration: defaults, JSON loading and validation."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .rehearser import RehearserConfig
from .reid import TrainConfig

VARIANTS = ("baseline", "style_aug", "shared_conv", "stats_pred", "dask")


class ConfigError(ValueError):
    """Invalid or unreadable experiment configuration."""


@dataclass
class VariantSpec:
    variant: str = "dask"
    use_rehearsed_reid_loss: bool = True
    use_rehearsed_skd_loss: bool = True
    label: str = ""
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant == "baseline":
            self.use_rehearsed_reid_loss = False
            self.use_rehearsed_skd_loss = False
        if not self.label:
            self.label = self.variant

    @property
    def rehearses(self) -> bool:
        return self.variant != "baseline" and (self.use_rehearsed_reid_loss or self.use_rehearsed_skd_loss)

    @property
    def rehearser_kind(self) -> str | None:
        return {"dask": "akpnet", "stats_pred": "stats_pred", "shared_conv": "shared_conv"}.get(self.variant)


@dataclass
class BenchmarkConfig:
    n_seen: int = 3
    n_unseen: int = 2
    n_ids: int = 20
    views_per_id: int = 8
    height: int = 64
    width: int = 32

    @property
    def size(self):
        return (self.height, self.width)

    def validate(self) -> "BenchmarkConfig":
        if self.n_seen < 1 or self.n_unseen < 0:
            raise ValueError("need n_seen >= 1 and n_unseen >= 0")
        if self.n_ids < 4 or self.views_per_id < 4:
            raise ValueError("need n_ids >= 4 and views_per_id >= 4")
        if self.height < 8 or self.width < 8:
            raise ValueError("images must be at least 8x8")
        return self


@dataclass
class ExperimentConfig:
    seed: int = 0
    data_seed: int = 0
    dim: int = 64
    retained_capacity: int = 1
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    rehearser: RehearserConfig = field(default_factory=RehearserConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    variant: VariantSpec = field(default_factory=VariantSpec)

    def validate(self) -> "ExperimentConfig":
        try:
            if self.dim < 1:
                raise ValueError(f"dim must be positive, got {self.dim}")
            if self.retained_capacity < 1:
                raise ValueError(f"retained_capacity must be >= 1, got {self.retained_capacity}")
            self.benchmark.validate()
            self.rehearser.validate()
            self.train.validate()
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        cfg = copy.deepcopy(self)
        for key, value in overrides.items():
            target = cfg
            *path, last = key.split(".")
            for part in path:
                target = getattr(target, part, None)
                if target is None or not is_dataclass(target):
                    raise ConfigError(f"unknown config section in override {key!r}")
            if not hasattr(target, last):
                raise ConfigError(f"unknown config key in override {key!r}")
            setattr(target, last, value)
        return cfg.validate()


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
            continue
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}.{name}: expected a boolean, got {value!r}")
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{where}.{name}: expected an integer, got {value!r}")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}.{name}: expected a number, got {value!r}")
            value = float(value)
        elif isinstance(default, str):
            if not isinstance(value, str):
                raise ConfigError(f"{where}.{name}: expected a string, got {value!r}")
        kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "config").validate()


def load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)
