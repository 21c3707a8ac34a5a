"""Pipeline configuration and its file format (JSON or YAML)."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .ground import Thresholds
from .optimizer import FailureConfig, OptimizerConfig


@dataclass(frozen=True)
class KeyframeConfig:
    min_translation: float = 0.5  # meters of odometry travel between keyframes
    min_speed: float = 1.0
    max_speed: float = 40.0
    max_yaw_rate: float = math.radians(5.0)

    def __post_init__(self):
        if not (self.min_translation > 0 and 0 <= self.min_speed <= self.max_speed and self.max_yaw_rate > 0):
            raise ValueError("invalid keyframe selection bounds")


@dataclass(frozen=True)
class PipelineConfig:
    thresholds: Thresholds = field(default_factory=Thresholds)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    failure: FailureConfig = field(default_factory=FailureConfig)
    keyframes: KeyframeConfig = field(default_factory=KeyframeConfig)
    gating_radius: float = 15.0  # pixels around the predicted position
    grid_cols: int = 8
    grid_rows: int = 6
    per_cell: int = 20
    ransac_iterations: int = 25
    inlier_threshold: float = 1.5  # pixels, Sampson distance
    seed_attempts: int = 50
    max_reprojection: float = 1.0
    bootstrap_pairs: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.gating_radius <= 0 or self.inlier_threshold <= 0 or self.max_reprojection <= 0:
            raise ValueError("radii and thresholds must be positive")
        if min(self.grid_cols, self.grid_rows, self.per_cell) < 1:
            raise ValueError("grid dimensions must be >= 1")
        if self.ransac_iterations < 1 or self.seed_attempts < 1 or self.bootstrap_pairs < 1:
            raise ValueError("iteration budgets must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "PipelineConfig":
        """Build from nested mappings; unknown keys and bad values raise ConfigError."""
        try:
            return _build(cls, d or {}, "")
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


_NESTED = {"thresholds": Thresholds, "optimizer": OptimizerConfig, "failure": FailureConfig, "keyframes": KeyframeConfig}


def _build(cls, d, path):
    if not isinstance(d, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown keys in {path or 'config'}: {sorted(unknown)}")
    kw = {}
    for k, v in d.items():
        sub = _NESTED.get(k) if cls is PipelineConfig else None
        if sub is not None:
            kw[k] = _build(sub, v, f"{path}{k}.")
        elif k == "xi_d":
            kw[k] = tuple(float(x) for x in v)
        else:
            kw[k] = v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def load_mapping(path):
    """Read a JSON or YAML file into a dict."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {p}: {exc}") from exc
    try:
        if p.suffix.lower() in (".yaml", ".yml"):
            data = yaml.safe_load(text)
        else:
            data = json.loads(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{p} must contain a mapping")
    return data


def load_config(path) -> PipelineConfig:
    data = load_mapping(path)
    # a combined file may carry a "pipeline" section next to a "scenario" one
    if "pipeline" in data:
        data = data["pipeline"]
    elif "scenario" in data:
        data = {}
    return PipelineConfig.from_dict(data)
