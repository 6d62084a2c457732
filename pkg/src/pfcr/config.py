"""Run configuration: one JSON document for model, data, training and PTQ."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .pos import POSConfig, QuantPoints
from .vit import ViTConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"
    num_classes: int = 10
    n_train: int = 4000
    n_eval: int = 1000
    seed: int = 0
    eval_seed: int = 1
    noise: float = 0.05
    class_sep: float = 0.15
    max_shift: int = 2
    train_images: str | None = None
    train_labels: str | None = None
    eval_images: str | None = None
    eval_labels: str | None = None


@dataclass
class TrainConfig:
    epochs: int = 4
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0


ARMS = ("blockwise", "pfcr_only", "pos_only", "pfcr_pos", "fp_baseline")


@dataclass
class RunConfig:
    model: ViTConfig = field(default_factory=ViTConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pos: POSConfig = field(default_factory=POSConfig)
    quant: QuantPoints = field(default_factory=QuantPoints)
    n_calib: int = 64
    n_recon: int | None = None
    baseline_checkpoint: str | None = None
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    arms: list[str] = field(default_factory=lambda: list(ARMS))
    overrides: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        nested = {"model": ViTConfig, "data": DataConfig, "train": TrainConfig, "pos": POSConfig, "quant": QuantPoints}
        kwargs = {}
        allowed = {f.name for f in fields(cls)}
        for key, value in d.items():
            if key not in allowed:
                raise ConfigError(f"unknown config key {key!r}")
            if key in nested:
                kwargs[key] = _build(nested[key], value, key)
            else:
                kwargs[key] = value
        try:
            cfg = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        bad = [a for a in cfg.arms if a not in ARMS]
        if bad:
            raise ConfigError(f"unknown ablation arms {bad}; choose from {list(ARMS)}")
        if cfg.model.num_classes != cfg.data.num_classes:
            raise ConfigError("model.num_classes and data.num_classes disagree")
        return cfg


def _build(cls, value, key):
    if not isinstance(value, dict):
        raise ConfigError(f"config section {key!r} must be an object")
    allowed = {f.name for f in fields(cls)}
    unknown = set(value) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {key!r}: {sorted(unknown)}")
    try:
        return cls(**value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {key!r} section: {exc}") from exc


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(raw)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2))
