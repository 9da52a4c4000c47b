"""Experiment configuration: one flat YAML mapping of keys to scalars or lists.

Precedence, lowest first: built-in defaults, the config file, command-line
overrides. Unknown keys are rejected.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import yaml

from .attacks import VARIANTS
from .training import TrainConfig

PAPER_TEMPERATURES = (1.0, 2.0, 5.0, 10.0, 20.0, 30.0, 50.0, 100.0)
DATASET_KEYS = ("train_images", "train_labels", "test_images", "test_labels")


class ConfigError(ValueError):
    """Bad or missing configuration; ``key`` names the offending setting."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(message)


@dataclass(frozen=True)
class ExperimentConfig:
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    train_count: Optional[int] = None  # stratified subset sizes; None keeps everything
    test_count: Optional[int] = None
    architecture: str = "mnist-small"
    learning_rate: float = 0.1
    lr_decay: float = 1.0
    decay_delay: int = 0
    momentum: float = 0.5
    momentum_decay: float = 1.0
    batch_size: int = 128
    epochs: int = 20
    dropout_rate: float = 0.5
    temperature: float = 1.0
    temperatures: tuple = PAPER_TEMPERATURES
    attack_samples: int = 10
    gradient_samples: int = 200
    max_features: Optional[int] = None
    feature_value: float = 1.0
    saliency_variant: str = "pixel-pair"
    output_dir: str = "runs/default"
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "temperatures",
                           tuple(float(t) for t in self.temperatures))
        if any(not t > 0 for t in self.temperatures) or not self.temperatures:
            raise ConfigError("temperatures",
                              "temperatures must be a nonempty list of positive numbers")
        if self.saliency_variant not in VARIANTS:
            raise ConfigError("saliency_variant", f"saliency_variant must be one of {VARIANTS}")
        if self.attack_samples < 1 or self.gradient_samples < 1:
            raise ConfigError("attack_samples", "sample counts must be positive")
        if self.workers < 1:
            raise ConfigError("workers", "workers must be >= 1")
        try:
            self.train_config()
        except ValueError as exc:
            raise ConfigError("train", str(exc)) from None

    def train_config(self, temperature: Optional[float] = None,
                     rng_seed: Optional[int] = None) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, lr_decay=self.lr_decay,
            decay_delay=self.decay_delay, momentum=self.momentum,
            momentum_decay=self.momentum_decay, batch_size=self.batch_size,
            epochs=self.epochs, dropout_rate=self.dropout_rate,
            temperature=self.temperature if temperature is None else temperature,
            rng_seed=self.seed if rng_seed is None else rng_seed,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["temperatures"] = list(self.temperatures)
        return d

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form; output_dir and workers excluded."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("workers")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        clean = {k: v for k, v in overrides.items() if v is not None}
        return from_mapping({**self.to_dict(), **clean})


def _coerce(name: str, value, kind):
    if value is None:
        return None
    try:
        if name == "temperatures":
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split() if v]
            return tuple(float(v) for v in value)
        if kind in ("int", "Optional[int]"):
            return int(value)
        if kind in ("float", "Optional[float]"):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(name, f"{name}: cannot interpret {value!r}") from None


def from_mapping(mapping: dict) -> ExperimentConfig:
    known = {f.name: f.type for f in fields(ExperimentConfig)}
    unknown = sorted(set(mapping) - set(known))
    if unknown:
        raise ConfigError(unknown[0], f"unknown config key(s): {', '.join(unknown)}")
    values = {k: _coerce(k, v, known[k]) for k, v in mapping.items()}
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except FileNotFoundError:
        raise ConfigError("config", f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config", f"{path}: expected a mapping of keys to values")
    return from_mapping(data)

