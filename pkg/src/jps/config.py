"""Experiment configuration: one JSON document, lossless round trip."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, fields

from .data import BenchmarkSpec, PretrainConfig
from .errors import ConfigError, JPSError
from .model import ModelConfig
from .trainer import TrainConfig

# the search list used for the rho ablation
DEFAULT_RHO_GRID = (0.2, 0.1, 0.05, 0.01, 0.005, 0.001, 0.0005, 0.0001)


@dataclass(frozen=True)
class DiagnosticsConfig:
    beta: float = 1.0
    proxy_enabled: bool = True


def _build(cls, doc, section):
    if doc is None:
        return cls()
    if not isinstance(doc, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**doc)
    except JPSError as exc:
        raise ConfigError(f"{section}: {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: BenchmarkSpec = field(default_factory=BenchmarkSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    output_dir: str = "runs"
    seeds: tuple = (0, 1, 2)
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        self.validate()

    def validate(self):
        try:
            self.data.check_model(self.model)
        except JPSError as exc:
            raise ConfigError(str(exc)) from exc
        if not 1 <= self.train.L <= self.model.num_blocks:
            raise ConfigError(f"train.L={self.train.L} outside [1, {self.model.num_blocks}]")
        if not self.seeds:
            raise ConfigError("seeds must be a nonempty list")
        if any(s < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "data": self.data.to_dict(),
            "train": self.train.to_dict(),
            "pretrain": self.pretrain.to_dict(),
            "diagnostics": {"beta": self.diagnostics.beta, "proxy_enabled": self.diagnostics.proxy_enabled},
            "output_dir": self.output_dir,
            "seeds": list(self.seeds),
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        kw = {
            "model": _build(ModelConfig, doc.get("model"), "model"),
            "data": _build(BenchmarkSpec, doc.get("data"), "data"),
            "train": _build(TrainConfig, doc.get("train"), "train"),
            "pretrain": _build(PretrainConfig, doc.get("pretrain"), "pretrain"),
            "diagnostics": _build(DiagnosticsConfig, doc.get("diagnostics"), "diagnostics"),
        }
        for key in ("output_dir", "seeds", "workers"):
            if key in doc:
                kw[key] = doc[key]
        return cls(**kw)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc)


def cache_dir() -> str:
    return os.environ.get("JPS_CACHE_DIR") or os.path.join(os.path.expanduser("~"), ".cache", "jps")
