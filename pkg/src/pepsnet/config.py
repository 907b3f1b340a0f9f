"""Configuration management for training and command runs."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

import yaml

from .exceptions import PepsConfigError
from .types import ContractionKind, DatasetKind, FeatureMapKind, OptimizerKind

# Default data directory
DEFAULT_DATA_DIR = "data"


def _get_default_data_dir() -> Path:
    """Get the data directory from the environment or use the default.

    Priority:
    1. PEPSNET_DATA_DIR environment variable
    2. ./data
    """
    return Path(os.environ.get("PEPSNET_DATA_DIR", DEFAULT_DATA_DIR))


def _enum[E: Enum](kind: type[E], value: Any, name: str) -> E:
    try:
        return kind(value)
    except ValueError:
        choices = ", ".join(str(m.value) for m in kind)
        raise PepsConfigError(f"{name} must be one of {choices}; got {value!r}") from None


def _require_int(name: str, value: Any, minimum: int) -> None:
    if isinstance(value, bool) or not isinstance(value, int):
        raise PepsConfigError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise PepsConfigError(f"{name} must be >= {minimum}, got {value}")


def _require_float(name: str, value: Any, minimum: float, inclusive: bool = True) -> None:
    if isinstance(value, bool) or not isinstance(value, int | float):
        raise PepsConfigError(f"{name} must be a number, got {value!r}")
    if value < minimum or (not inclusive and value == minimum):
        relation = ">=" if inclusive else ">"
        raise PepsConfigError(f"{name} must be {relation} {minimum}, got {value}")


@dataclass(frozen=True, slots=True)
class TrainConfig:
    """Hyperparameters of the classifier and its training loop."""

    bond_dim: int = 2
    """Virtual bond dimension D."""

    chi: int = 10
    """Maximum boundary-MPS bond dimension."""

    learning_rate: float = 1e-4
    batch_size: int = 100
    epochs: int = 100
    """Number of epochs (0 only writes the initial checkpoint)."""

    weight_decay: float = 0.0
    seed: int = 0

    optimizer: OptimizerKind = OptimizerKind.ADAM
    positivity: bool = True
    """Project PEPS entries to their absolute values after every step."""

    feature_map: FeatureMapKind = FeatureMapKind.PRODUCT
    svd_epsilon: float = 1e-12
    """Regularizer of the SVD backward pass."""

    feature_scale: float | None = None
    """Factor applied to every feature vector (None = calibrate at initialization)."""

    block_size: int = 2
    """Pixels per block side for the product map (1 or 2)."""

    contraction: ContractionKind = ContractionKind.BOUNDARY
    label_count: int = 10
    checkpoint_rows: bool = False
    """Recompute row absorptions during backward to save memory."""

    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8

    debug: bool = False
    """Enable debug logging."""

    def __post_init__(self) -> None:
        """Validate configuration.

        Raises:
            PepsConfigError: If any value is out of range.
        """
        object.__setattr__(self, "optimizer", _enum(OptimizerKind, self.optimizer, "optimizer"))
        object.__setattr__(self, "feature_map", _enum(FeatureMapKind, self.feature_map, "feature_map"))
        object.__setattr__(self, "contraction", _enum(ContractionKind, self.contraction, "contraction"))
        for name in ("bond_dim", "chi", "batch_size", "label_count"):
            _require_int(name, getattr(self, name), 1)
        _require_int("epochs", self.epochs, 0)
        _require_int("seed", self.seed, 0)
        _require_float("learning_rate", self.learning_rate, 0.0)
        _require_float("weight_decay", self.weight_decay, 0.0)
        _require_float("svd_epsilon", self.svd_epsilon, 0.0, inclusive=False)
        _require_float("adam_epsilon", self.adam_epsilon, 0.0, inclusive=False)
        for name in ("adam_beta1", "adam_beta2"):
            value = getattr(self, name)
            _require_float(name, value, 0.0)
            if value >= 1.0:
                raise PepsConfigError(f"{name} must be < 1, got {value}")
        if self.feature_scale is not None:
            _require_float("feature_scale", self.feature_scale, 0.0, inclusive=False)
        if self.block_size not in (1, 2):
            raise PepsConfigError(f"block_size must be 1 or 2, got {self.block_size!r}")
        for name in ("positivity", "checkpoint_rows", "debug"):
            if not isinstance(getattr(self, name), bool):
                raise PepsConfigError(f"{name} must be true or false, got {getattr(self, name)!r}")

    def to_dict(self) -> dict[str, Any]:
        """Plain-value mapping suitable for JSON or YAML."""
        out: dict[str, Any] = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            out[f.name] = value.value if isinstance(value, Enum) else value
        return out


@dataclass(frozen=True, slots=True)
class RunConfig:
    """Paths and data selection for one command run."""

    data_dir: Path = field(default_factory=_get_default_data_dir)
    """Dataset root (defaults to ./data or the PEPSNET_DATA_DIR env var)."""

    dataset: DatasetKind = DatasetKind.MNIST
    out_dir: Path = Path("runs")
    """Directory for metrics.csv, sweep.csv and the default checkpoint."""

    checkpoint: Path | None = None
    """Checkpoint to write (train) or read (eval, predict, inspect)."""

    subset: int | None = None
    """Training images to keep after the validation split (None = all)."""

    val_subset: int | None = None
    test_subset: int | None = None
    val_count: int = 5000
    stratify: bool = True
    workers: int = 1
    progress: bool = True

    def __post_init__(self) -> None:
        """Validate configuration."""
        object.__setattr__(self, "dataset", _enum(DatasetKind, self.dataset, "dataset"))
        object.__setattr__(self, "data_dir", Path(self.data_dir))
        object.__setattr__(self, "out_dir", Path(self.out_dir))
        if self.checkpoint is not None:
            object.__setattr__(self, "checkpoint", Path(self.checkpoint))
        for name in ("subset", "val_subset", "test_subset"):
            value = getattr(self, name)
            if value is not None:
                _require_int(name, value, 1)
        _require_int("val_count", self.val_count, 1)
        _require_int("workers", self.workers, 1)

    @property
    def checkpoint_path(self) -> Path:
        """Explicit checkpoint path, else ``<out_dir>/model.peps``."""
        return self.checkpoint if self.checkpoint is not None else self.out_dir / "model.peps"

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Enum):
                value = value.value
            elif isinstance(value, Path):
                value = str(value)
            out[f.name] = value
        return out


TRAIN_KEYS = frozenset(f.name for f in dataclasses.fields(TrainConfig))
RUN_KEYS = frozenset(f.name for f in dataclasses.fields(RunConfig))


def load_config_file(path: Path) -> dict[str, Any]:
    """Read a flat YAML mapping of config keys.

    Raises:
        PepsConfigError: If the file is unreadable, not a flat mapping, or
            contains unknown keys.
    """
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise PepsConfigError(f"cannot read config file {path}: {e}") from e
    except yaml.YAMLError as e:
        raise PepsConfigError(f"config file {path} is not valid YAML: {e}") from e
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise PepsConfigError(f"config file {path} must hold a key: value mapping")
    for key, value in raw.items():
        if isinstance(value, dict | list):
            raise PepsConfigError(f"config key {key!r} must have a scalar value")
    unknown = sorted(str(k) for k in raw if k not in TRAIN_KEYS | RUN_KEYS)
    if unknown:
        raise PepsConfigError(f"unknown config keys: {', '.join(unknown)}")
    return dict(raw)


def build_configs(*layers: dict[str, Any]) -> tuple[TrainConfig, RunConfig]:
    """Merge key/value layers (later layers win) into validated configs.

    ``None`` values in a layer mean "not given" and do not override.

    Example:
        ```python
        train, run = build_configs(load_config_file(Path("run.yaml")), {"chi": 4})
        ```
    """
    merged: dict[str, Any] = {}
    for layer in layers:
        for key, value in layer.items():
            if key not in TRAIN_KEYS | RUN_KEYS:
                raise PepsConfigError(f"unknown config key {key!r}")
            if value is not None:
                merged[key] = value
    try:
        train = TrainConfig(**{k: v for k, v in merged.items() if k in TRAIN_KEYS})
        run = RunConfig(**{k: v for k, v in merged.items() if k in RUN_KEYS})
    except TypeError as e:
        raise PepsConfigError(str(e)) from e
    return train, run
