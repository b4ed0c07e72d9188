"""
Run-level hyperparameters.

A config file is plain `key=value` text (the `.env` syntax, read with
python-dotenv) whose keys are exactly the TrainConfig field names; omitted keys
keep their defaults. `dump_config` writes the canonical form: sorted keys,
`repr` floats.
"""
from __future__ import annotations

import io
import os
from dataclasses import dataclass, fields
from typing import Dict, Mapping, Optional

from dotenv import dotenv_values

from .config import DEFAULT_HEIGHT, DEFAULT_WIDTH
from .errors import ConfigError
from .losses import LossWeights

# fields that locate a run rather than define it; left out of checkpoints
PATH_FIELDS = ("out_dir",)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch: int = 1
    epochs: int = 10
    channels: int = 64
    lambda1: float = 0.5
    lambda2: float = 0.1
    lambda3: float = 0.2
    seed: int = 42
    height: int = DEFAULT_HEIGHT
    width: int = DEFAULT_WIDTH
    grad_target: str = "max"
    entropy_bins: int = 64
    checkpoint_every: int = 0  # in steps; 0 saves only at the end
    out_dir: str = "runs"
    init_scheme: str = "he_xavier"
    clip_grad_norm: float = 0.0  # 0 disables
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch != 1:
            raise ConfigError(f"only batch=1 is supported, got {self.batch}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.channels < 2 or self.channels % 2:
            raise ConfigError(f"channels must be an even number >= 2, got {self.channels}")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"target size must be positive, got {self.height}x{self.width}")
        if self.grad_target not in ("max", "ir"):
            raise ConfigError(f"grad_target must be 'max' or 'ir', got {self.grad_target!r}")
        if self.entropy_bins < 2:
            raise ConfigError(f"entropy_bins must be >= 2, got {self.entropy_bins}")
        if self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        if self.init_scheme not in ("he_xavier", "zeros"):
            raise ConfigError(f"init_scheme must be 'he_xavier' or 'zeros', got {self.init_scheme!r}")
        if self.clip_grad_norm < 0:
            raise ConfigError(f"clip_grad_norm must be >= 0, got {self.clip_grad_norm}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0) or self.epsilon <= 0:
            raise ConfigError("Adam needs 0 <= beta1, beta2 < 1 and epsilon > 0")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3)

    @property
    def size(self) -> tuple[int, int]:
        return self.height, self.width


_CASTS = {"float": float, "int": int, "str": str}


def _field_types() -> Dict[str, str]:
    return {f.name: str(f.type) for f in fields(TrainConfig)}


def config_from_mapping(values: Mapping[str, Optional[str]], source: str = "config") -> TrainConfig:
    types = _field_types()
    kwargs = {}
    for key, raw in values.items():
        if key not in types:
            raise ConfigError(f"{source}: unknown key {key!r}")
        if raw is None:
            raise ConfigError(f"{source}: key {key!r} has no value")
        try:
            kwargs[key] = _CASTS[types[key]](raw.strip())
        except ValueError as e:
            raise ConfigError(f"{source}: bad value for {key}: {raw!r}") from e
    return TrainConfig(**kwargs)


def parse_config(text: str, source: str = "config") -> TrainConfig:
    return config_from_mapping(dotenv_values(stream=io.StringIO(text), interpolate=False), source)


def load_config(path: str) -> TrainConfig:
    if not os.path.isfile(path):
        raise ConfigError(f"{path}: config file not found")
    return config_from_mapping(dotenv_values(path, interpolate=False), path)


def _format(value) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def dump_config(config: TrainConfig, include_paths: bool = True) -> str:
    """Canonical text form; with include_paths=False the run-location keys are omitted."""
    lines = []
    for name in sorted(f.name for f in fields(TrainConfig)):
        if not include_paths and name in PATH_FIELDS:
            continue
        lines.append(f"{name}={_format(getattr(config, name))}")
    return "\n".join(lines) + "\n"


def save_config(config: TrainConfig, path: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dump_config(config))

