"""Per-keyframe health checks that trigger a restart of the estimator."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional


class FailureReason(str, Enum):
    DISCONTINUITY = "discontinuity"
    TOO_FEW_FEATURES = "too_few_features"
    PLANE_JUMP = "plane_jump"
    TOO_FEW_TRIANGULATED = "too_few_triangulated"
    QUALITY_FILTER = "quality_filter"


@dataclass(frozen=True)
class FailureConfig:
    max_rotation_step: float = math.radians(10.0)
    max_translation_step: float = 5.0
    min_ground_features: int = 8
    max_height_change: float = 0.05
    max_normal_change: float = math.radians(0.5)
    min_triangulated: int = 8
    persistence: int = 3

    def __post_init__(self):
        if self.persistence < 1:
            raise ValueError("persistence must be >= 1")


@dataclass
class StepReport:
    """Diagnostics of one keyframe pair; ``None`` marks a stage not reached."""

    rotation_step: float = 0.0
    translation_step: float = 0.0
    tracked_ground: int = 0
    height_change: Optional[float] = None
    normal_change: Optional[float] = None
    triangulated: Optional[int] = None
    quality_ok: Optional[bool] = None


def detect_failure(step: StepReport, config: FailureConfig) -> Optional[FailureReason]:
    """First triggered check, in a fixed order, or ``None``."""
    if step.rotation_step > config.max_rotation_step or step.translation_step > config.max_translation_step:
        return FailureReason.DISCONTINUITY
    if step.tracked_ground < config.min_ground_features:
        return FailureReason.TOO_FEW_FEATURES
    if (step.height_change is not None and abs(step.height_change) > config.max_height_change) or (
        step.normal_change is not None and step.normal_change > config.max_normal_change
    ):
        return FailureReason.PLANE_JUMP
    if step.triangulated is not None and step.triangulated < config.min_triangulated:
        return FailureReason.TOO_FEW_TRIANGULATED
    if step.quality_ok is False:
        return FailureReason.QUALITY_FILTER
    return None
