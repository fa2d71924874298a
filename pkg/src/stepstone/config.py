"""Experiment configuration: a nested YAML document with strict key checking."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .metrics import DEFAULT_TAUS
from .model.chainlen import ChainLenConfig
from .model.fen import FenConfig
from .model.training import TrainConfig
from .obfuscation import DELAY_PROFILES
from .simulator import SimConfig


class ConfigError(ValueError):
    def __init__(self, key_path: str, reason: str):
        super().__init__(f"{key_path}: {reason}")
        self.key_path = key_path


@dataclass(frozen=True)
class DatasetSection:
    name: str = "dataset"
    n_chains: int = 100
    seed: int = 0
    burst_model: str | None = None
    format: str = "csv"


@dataclass(frozen=True)
class EvalSection:
    mode: str = "network"
    taus: tuple[float, ...] = DEFAULT_TAUS
    neg_per_pos: Any = "auto"

    def __post_init__(self):
        object.__setattr__(self, "taus", tuple(float(t) for t in self.taus))
        if not self.taus or any(not 0 < t < 1 for t in self.taus):
            raise ValueError("taus must be a nonempty list of values in (0, 1)")
        if self.mode not in ("network", "host"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass(frozen=True)
class ObfuscationSection:
    overhead_pct: float = 0.0
    delay_profile: str = "none"
    seed: int = 0

    def __post_init__(self):
        if self.overhead_pct < 0:
            raise ValueError("overhead_pct must be >= 0")
        if self.delay_profile != "none" and self.delay_profile not in DELAY_PROFILES:
            raise ValueError(f"unknown delay profile {self.delay_profile!r}")


@dataclass(frozen=True)
class ModelSection:
    """Training data split and which optional models to fit."""

    val_fraction: float = 0.1
    chainlen: bool = False

    def __post_init__(self):
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    sim: SimConfig = field(default_factory=SimConfig)
    fen: FenConfig = field(default_factory=FenConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelSection = field(default_factory=ModelSection)
    chainlen: ChainLenConfig = field(default_factory=ChainLenConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    obfuscation: ObfuscationSection = field(default_factory=ObfuscationSection)

    def to_dict(self) -> dict:
        return _to_plain(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(x) for x in obj]
    return obj


def _build(cls, doc, path: str):
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(path, "expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(fields))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}" if path else unknown[0], "unknown key")
    kwargs = {}
    for name, value in doc.items():
        key = f"{path}.{name}" if path else name
        default = fields[name].default
        if default is dataclasses.MISSING and fields[name].default_factory is not dataclasses.MISSING:
            default = fields[name].default_factory()
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, key)
        elif isinstance(default, tuple) and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path or "<root>", str(exc)) from None


def config_from_dict(doc: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, doc, "")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"not valid YAML: {exc}") from None
    return config_from_dict(doc or {})
