"""Shared types, label-space bookkeeping and run configuration."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import torch
import yaml


class DebugError(Exception):
    """Base class for every error the toolkit reports to the operator."""


class ConfigError(DebugError, ValueError):
    pass


class DataError(DebugError, ValueError):
    pass


class ShapeError(DebugError, ValueError):
    pass


class NumericError(DebugError, ArithmeticError):
    pass


@dataclass(frozen=True)
class LabelSpace:
    known_classes: tuple[str, ...]

    @property
    def num_known(self) -> int:
        return len(self.known_classes)

    @property
    def unknown_token(self) -> int:
        return len(self.known_classes)

    def index(self, name: str) -> int:
        """Id of `name`, or the unknown token for classes outside the source label space."""
        try:
            return self.known_classes.index(name)
        except ValueError:
            return self.unknown_token

    def is_known(self, name: str) -> bool:
        return name in self.known_classes

    def name(self, idx: int) -> str:
        if idx == self.unknown_token:
            return "unknown"
        return self.known_classes[idx]


def make_label_space(class_names: Sequence[str]) -> LabelSpace:
    names = [str(n) for n in class_names]
    if len(names) < 2:
        raise ConfigError(f"need at least 2 known classes, got {len(names)}")
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ConfigError(f"duplicate class names: {', '.join(dupes)}")
    return LabelSpace(tuple(names))


@dataclass
class SampleRecord:
    """One image, CHW float in [0, 1], with optional HW foreground mask and cached edge map."""

    image: torch.Tensor
    label: int
    domain: str
    class_name: str = ""
    sample_id: str = ""
    mask: Optional[torch.Tensor] = None
    edge: Optional[torch.Tensor] = None

    def __post_init__(self) -> None:
        if self.image.dim() != 3:
            raise ShapeError(f"{self.sample_id}: image must be C x H x W, got {tuple(self.image.shape)}")
        if self.mask is not None and tuple(self.mask.shape) != tuple(self.image.shape[1:]):
            raise ShapeError(
                f"{self.sample_id}: mask shape {tuple(self.mask.shape)} does not match image {tuple(self.image.shape[1:])}"
            )


def check_feature_map(z: torch.Tensor) -> torch.Tensor:
    if z.dim() != 4:
        raise ShapeError(f"feature map must be B x C x H x W, got {tuple(z.shape)}")
    b, c, h, w = z.shape
    if b < 1 or c < 1 or h * w < 1:
        raise ShapeError(f"empty feature map {tuple(z.shape)}")
    return z


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 0.001
    weight_decay: float = 0.0005
    momentum: float = 0.9
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 20
    epochs: int = 50
    tau: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    alpha: float = 0.8
    gpsa_prob: float = 0.5
    gpsa_stages: tuple[str, ...] = ("stage1", "stage2")
    widths: tuple[int, ...] = (32, 64, 128)
    val_fraction: float = 0.1
    seed: int = 0

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["gpsa_stages"] = list(self.gpsa_stages)
        d["widths"] = list(self.widths)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return validate_config(cls(**dict(values)))


def _coerce(cfg: TrainConfig) -> TrainConfig:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        try:
            if f.name in ("batch_size", "lr_decay_every", "epochs", "seed"):
                if isinstance(v, bool) or float(v) != int(v):
                    raise ValueError
                v = int(v)
            elif f.name == "gpsa_stages":
                v = tuple(s.strip() for s in v.split(",") if s.strip()) if isinstance(v, str) else tuple(v)
            elif f.name == "widths":
                v = tuple(int(s) for s in (v.split(",") if isinstance(v, str) else v))
            else:
                v = float(v)
        except (TypeError, ValueError):
            raise ConfigError(f"{f.name}: cannot interpret {v!r}") from None
        out[f.name] = v
    return TrainConfig(**out)


def validate_config(cfg: TrainConfig) -> TrainConfig:
    cfg = _coerce(cfg)

    def bad(name: str, why: str) -> ConfigError:
        return ConfigError(f"{name} = {getattr(cfg, name)!r}: {why}")

    for name in ("lr", "weight_decay", "momentum", "tau", "lambda1", "lambda2", "alpha", "gpsa_prob"):
        if not math.isfinite(getattr(cfg, name)):
            raise bad(name, "must be finite")
    if not 0 < cfg.alpha < 1:
        raise bad("alpha", "must lie in (0, 1)")
    if cfg.tau <= 0:
        raise bad("tau", "must be > 0")
    if cfg.lambda1 < 0:
        raise bad("lambda1", "must be >= 0")
    if cfg.lambda2 < 0:
        raise bad("lambda2", "must be >= 0")
    if not 0 <= cfg.gpsa_prob <= 1:
        raise bad("gpsa_prob", "must lie in [0, 1]")
    if cfg.batch_size < 1:
        raise bad("batch_size", "must be >= 1")
    if cfg.lr <= 0:
        raise bad("lr", "must be > 0")
    if cfg.weight_decay < 0:
        raise bad("weight_decay", "must be >= 0")
    if not 0 <= cfg.momentum < 1:
        raise bad("momentum", "must lie in [0, 1)")
    if not 0 < cfg.lr_decay_factor <= 1:
        raise bad("lr_decay_factor", "must lie in (0, 1]")
    if cfg.lr_decay_every < 1:
        raise bad("lr_decay_every", "must be >= 1")
    if cfg.epochs < 0:
        raise bad("epochs", "must be >= 0")
    if not cfg.widths or any(w < 1 for w in cfg.widths):
        raise bad("widths", "need at least one positive stage width")
    stages = {f"stage{i + 1}" for i in range(len(cfg.widths))}
    missing = [s for s in cfg.gpsa_stages if s not in stages]
    if missing:
        raise bad("gpsa_stages", f"no such encoder stage(s): {', '.join(missing)}")
    if not 0 <= cfg.val_fraction < 1:
        raise bad("val_fraction", "must lie in [0, 1)")
    return cfg


@dataclass
class LossBreakdown:
    ce: float
    kd: float
    eova: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return dataclasses.asdict(self)


def read_config_file(path: str | Path) -> dict[str, Any]:
    """Load a flat ``key: value`` YAML file. Nested values are rejected."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: expected key: value pairs")
    for k, v in data.items():
        if isinstance(v, dict):
            raise ConfigError(f"{p}: key {k!r} is nested; the config file is flat")
    return data


@dataclass
class RunSettings:
    """Data-side keys of a run config file; everything else goes to TrainConfig."""

    data_root: str = ""
    source_domain: str = ""
    target_domains: tuple[str, ...] = ()
    known_classes: tuple[str, ...] = ()
    mask_provider: str = "oracle"
    edge_source: str = "gradient_magnitude"
    out_dir: str = "runs/default"


RUN_KEYS = ("data_root", "source_domain", "target_domains", "known_classes", "mask_provider", "edge_source", "out_dir")


def split_config(values: Mapping[str, Any]) -> tuple[RunSettings, TrainConfig]:
    run_vals = {k: values[k] for k in RUN_KEYS if k in values}
    for k in ("target_domains", "known_classes"):
        if isinstance(run_vals.get(k), str):
            run_vals[k] = tuple(s.strip() for s in run_vals[k].split(",") if s.strip())
        elif k in run_vals:
            run_vals[k] = tuple(run_vals[k])
    train_vals = {k: v for k, v in values.items() if k not in RUN_KEYS}
    return RunSettings(**run_vals), TrainConfig.from_mapping(train_vals)
