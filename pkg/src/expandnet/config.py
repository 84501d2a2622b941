"""Experiment configuration: one JSON document, validated before any compute.

Unknown keys are rejected at every level. :func:`snapshot` materializes every
default so a run directory fully describes how it was produced.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from .backbone import ARCHITECTURES
from .data import DATASETS, SyntheticSpec
from .errors import ConfigurationError
from .regularizers import RegConfig
from .trainer import AdapterConfig, OptimizerConfig, TrainConfig


@dataclass
class PretrainConfig:
    epochs: int = 5
    lr: float = 0.002
    batch_size: int = 64

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigurationError("pretrain needs epochs >= 1, batch_size >= 1 and lr > 0")


@dataclass
class BackboneConfig:
    arch: str = "smallnet-3x32"
    checkpoint: Optional[str] = None  # default: <output_dir>/backbone
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ConfigurationError(f"unknown backbone {self.arch!r}; registered: {sorted(ARCHITECTURES)}")


@dataclass
class StreamConfig:
    kind: str = "split"
    dataset: str = "mnist-5k"
    classes_per_task: int = 2
    pretrain_classes: list = field(default_factory=lambda: [0, 1])
    pretrain_fraction: float = 0.5
    cache_dir: Optional[str] = None
    synthetic: Optional[dict] = None  # SyntheticSpec fields; None means the built-in clone/XOR stream

    def __post_init__(self):
        if self.kind not in ("split", "synthetic"):
            raise ConfigurationError("stream.kind must be 'split' or 'synthetic'")
        if self.kind == "split":
            if self.dataset not in DATASETS:
                raise ConfigurationError(f"unknown dataset {self.dataset!r}; registered: {sorted(DATASETS)}")
            if self.classes_per_task < 1:
                raise ConfigurationError("classes_per_task must be >= 1")
            if not 0.0 <= self.pretrain_fraction < 1.0:
                raise ConfigurationError("pretrain_fraction must lie in [0, 1)")
        if self.synthetic is not None:
            unknown = set(self.synthetic) - {f.name for f in dataclasses.fields(SyntheticSpec)}
            if unknown:
                raise ConfigurationError(f"unknown keys in stream.synthetic: {sorted(unknown)}")


@dataclass
class ExperimentConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs/default"
    seed: int = 0
    deterministic: bool = True

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.backbone.checkpoint) if self.backbone.checkpoint else Path(self.output_dir) / "backbone"


_NESTED = {
    ExperimentConfig: {"backbone": BackboneConfig, "stream": StreamConfig, "train": TrainConfig},
    BackboneConfig: {"pretrain": PretrainConfig},
    TrainConfig: {"optimizer": OptimizerConfig, "reg": RegConfig, "adapter": AdapterConfig},
}
# the seed lives at the top level only
_EXCLUDED = {TrainConfig: {"seed"}}


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where or 'config'} must be an object")
    names = {f.name for f in dataclasses.fields(cls)} - _EXCLUDED.get(cls, set())
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED.get(cls, {}).get(key)
        kwargs[key] = _build(sub, value, f"{where}.{key}" if where else key) if sub else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"bad value in {where or 'config'}: {exc}") from exc


def from_dict(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "")
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigurationError("seed must be a non-negative integer")
    cfg.train = dataclasses.replace(cfg.train, seed=cfg.seed)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
    return from_dict(data)


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    if seed < 0:
        raise ConfigurationError("seed must be a non-negative integer")
    return dataclasses.replace(cfg, seed=seed, train=dataclasses.replace(cfg.train, seed=seed))


def snapshot(cfg: ExperimentConfig) -> dict:
    """Every field with defaults filled in; round-trips through :func:`from_dict`."""
    d = asdict(cfg)
    d["train"].pop("seed")
    return d
