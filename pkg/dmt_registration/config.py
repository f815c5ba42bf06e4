"""
Strict JSON experiment configuration.

IMPORTANT FOR DEVELOPERS:
- Each section maps onto a frozen dataclass; unknown keys raise ConfigError
  naming the dotted key path
- Seeds are NOT configured per section: the top-level ``seed`` (or ``--seed``)
  derives every random stream, so (config, seed) fixes a run
- ``default_config_dict()`` is what ``reg --print-config`` prints
"""

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, fields, is_dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Optional

from .services.adapt import AdaptationConfig, Method
from .services.evaluator import EvaluationConfig
from .services.model import ModelConfig
from .services.synth import DeformationKind, DeformationSpec

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "DMT_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"

# Derived from the master seed, never read from a config file
_SEED_FIELDS = {"seed", "init_seed"}


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending key."""


@dataclass(frozen=True)
class DatasetConfig:
    """Toy dataset generation, or an external manifest to use instead."""

    n_cases: int = 60
    split: tuple = (40, 10, 10)
    n_points: int = 2048
    n_points_highres: int = 4096
    n_landmarks: int = 30
    initial_offset_mm: float = 10.0
    target_deformation: DeformationSpec = DeformationSpec(
        kind=DeformationKind.TWO_SCALE_RANDOM_FIELD
    )
    manifest: Optional[str] = None

    def __post_init__(self):
        if len(self.split) != 3 or any(int(n) < 0 for n in self.split):
            raise ValueError("split must be three non-negative counts (train, val, test)")
        object.__setattr__(self, "split", tuple(int(n) for n in self.split))
        if sum(self.split) != self.n_cases:
            raise ValueError(f"split {self.split} does not add up to n_cases={self.n_cases}")
        if self.n_points < 1 or self.n_points_highres < self.n_points:
            raise ValueError("Need 1 <= n_points <= n_points_highres")
        if self.n_landmarks < 1:
            raise ValueError("n_landmarks must be at least 1")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a stage needs; one instance per run."""

    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    source_deformation: DeformationSpec = field(default_factory=DeformationSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    # Cloud sizes match the toy dataset defaults
    adaptation: AdaptationConfig = field(
        default_factory=lambda: AdaptationConfig(n_points=2048, n_points_highres=4096)
    )
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    method: Method = Method.DENOISED
    seed: int = 0

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Set the master seed and every seed derived from it."""
        return replace(
            self,
            seed=seed,
            dataset=replace(
                self.dataset, target_deformation=replace(self.dataset.target_deformation, seed=seed)
            ),
            source_deformation=replace(self.source_deformation, seed=seed),
            model=replace(self.model, init_seed=seed),
            adaptation=replace(self.adaptation, seed=seed),
        )

    def training_config(self) -> AdaptationConfig:
        """Adaptation settings with the method's loss terms applied."""
        return self.adaptation.for_method(self.method)

    def to_dict(self) -> dict:
        return _to_jsonable(self)

    def digest(self) -> str:
        """sha256 hex digest of the canonical JSON form (seed included)."""
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")).hexdigest()


def _to_jsonable(value):
    if is_dataclass(value):
        return {
            f.name: _to_jsonable(getattr(value, f.name))
            for f in fields(value)
            if f.name not in _SEED_FIELDS or isinstance(value, ExperimentConfig)
        }
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, tuple):
        return [_to_jsonable(v) for v in value]
    return value


def default_config_dict() -> dict:
    return ExperimentConfig().to_dict()


def _coerce(default, value, path: str):
    """Convert a JSON value to the type of a field's default."""
    if is_dataclass(default):
        return _build(default, value, path)
    if isinstance(default, Enum):
        try:
            return type(default)(value)
        except ValueError:
            allowed = ", ".join(m.value for m in type(default))
            raise ConfigError(f"{path}: invalid value {value!r} (allowed: {allowed})") from None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return tuple(value)
    if default is None or isinstance(default, str):
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build(base, data, path: str):
    """Apply the keys of ``data`` on top of the dataclass instance ``base``."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    defaults = {f.name: getattr(base, f.name) for f in fields(base)}
    top_level = isinstance(base, ExperimentConfig)
    allowed = {name for name in defaults if name not in _SEED_FIELDS or top_level}
    for key in data:
        if key not in allowed:
            raise ConfigError(f"Unknown config key '{path}.{key}'" if path else f"Unknown config key '{key}'")
    kwargs = {
        key: _coerce(defaults[key], value, f"{path}.{key}" if path else key)
        for key, value in data.items()
    }
    try:
        return replace(base, **kwargs)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(f"{path or 'config'}: {e}") from e


def parse_config(data: dict, seed: Optional[int] = None) -> ExperimentConfig:
    """Build an ExperimentConfig from parsed JSON; ``seed`` overrides the file's seed."""
    cfg = _build(ExperimentConfig(), data, "")
    return cfg.with_seed(cfg.seed if seed is None else seed)


def load_config(path=None, seed: Optional[int] = None) -> ExperimentConfig:
    """Read a JSON config file (defaults only when ``path`` is None)."""
    if path is None:
        return parse_config({}, seed)
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    cfg = parse_config(data, seed)
    logger.debug("Loaded config %s (seed %d)", path, cfg.seed)
    return cfg


def output_root(cli_value: Optional[str] = None) -> Path:
    """``--out``, else $DMT_OUTPUT_ROOT, else ./runs."""
    if cli_value:
        return Path(cli_value)
    return Path(os.environ.get(OUTPUT_ROOT_ENV) or DEFAULT_OUTPUT_ROOT)
