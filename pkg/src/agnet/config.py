"""Run configuration: YAML file -> validated dataclasses, with strict keys.

Precedence, highest first: command-line flags, the ``AGNET_SEED``
environment variable (seed only), the config file, built-in defaults.
"""

from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import yaml

from .losses import HybridLossConfig
from .model import ABLATIONS, AblationConfig, ModelConfig
from .trainer import TrainConfig

SEED_ENV = "AGNET_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class SyntheticData:
    n: int = 16
    size: int = 64
    seed: int = 0


@dataclass
class DataConfig:
    root: Optional[str] = None        # <root>/images/*.ppm + <root>/masks/*.pgm; None = synthetic
    test_root: Optional[str] = None   # evaluation split for `ablate`; None = training split
    image_size: int = 224             # loaded images are resized to this (must divide by 32)
    synthetic: SyntheticData = field(default_factory=SyntheticData)


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/agnet"
    ablation: str = "full"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    loss: HybridLossConfig = field(default_factory=HybridLossConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{**asdict(self.model), "seed": self.seed})

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{**asdict(self.train), "seed": self.seed})

    def ablation_config(self) -> AblationConfig:
        return AblationConfig.from_name(self.ablation)

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["model"]["widths"] = list(d["model"]["widths"])
        d["model"].pop("seed")  # the top-level seed drives model init
        d["train"].pop("seed")
        return d

    def dump(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "loss": HybridLossConfig, "data": DataConfig}
_NESTED = {"synthetic": SyntheticData}


def _merge(cls, base, values: Mapping[str, Any], where: str):
    if not isinstance(values, Mapping):
        raise ConfigError(f"{where}: expected a mapping, got {type(values).__name__}")
    known = {f.name for f in fields(cls)}
    if cls in (ModelConfig, TrainConfig):
        known.discard("seed")  # set from the top-level seed
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key {where}.{unknown[0]} (allowed: {', '.join(sorted(known))})")
    current = asdict(base)
    for key, value in values.items():
        if key in _NESTED:
            value = _merge(_NESTED[key], getattr(base, key), value, f"{where}.{key}")
        elif key == "widths":
            value = tuple(value)
        current[key] = value
    for key, sub in _NESTED.items():
        if key in current and isinstance(current[key], dict):
            current[key] = sub(**current[key])
    try:
        return cls(**current)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def from_mapping(values: Mapping[str, Any], base: Optional[RunConfig] = None) -> RunConfig:
    cfg = copy.deepcopy(base) if base is not None else RunConfig()
    if values is None:
        return cfg
    if not isinstance(values, Mapping):
        raise ConfigError("config root must be a mapping")
    allowed = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]} (allowed: {', '.join(sorted(allowed))})")
    for key, value in values.items():
        if key in _SECTIONS:
            setattr(cfg, key, _merge(_SECTIONS[key], getattr(cfg, key), value, key))
        else:
            setattr(cfg, key, value)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool):
        raise ConfigError(f"seed: expected an integer, got {cfg.seed!r}")
    if cfg.ablation not in ABLATIONS:
        raise ConfigError(f"ablation: {cfg.ablation!r} is not one of {', '.join(sorted(ABLATIONS))}")
    if cfg.data.image_size % 32:
        raise ConfigError(f"data.image_size: {cfg.data.image_size} is not divisible by 32")
    if cfg.data.synthetic.size % 32:
        raise ConfigError(f"data.synthetic.size: {cfg.data.synthetic.size} is not divisible by 32")


def load(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None,
         environ: Mapping[str, str] = os.environ) -> RunConfig:
    """Build the effective config.  ``overrides`` uses the file's nested layout."""
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            cfg = from_mapping(yaml.safe_load(text), cfg)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if SEED_ENV in environ:
        try:
            cfg.seed = int(environ[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={environ[SEED_ENV]!r} is not an integer") from None
    if overrides:
        cfg = from_mapping(overrides, cfg)
    validate(cfg)
    return cfg
