"""Window refinement, calibration assembly and failure detection."""

from .calibration import (
    CalibrationResult,
    ZTestResult,
    average_rotations,
    average_translations,
    build_rotation,
    critical_value,
    rotation_with_heading,
    xi_from,
    z_test,
)
from .failure import FailureConfig, FailureReason, StepReport, detect_failure
from .window import (
    MarginalPrior,
    OptimizerConfig,
    PairObservations,
    PlaneChart,
    WindowState,
    homography,
    marginalize,
    marginalize_or_drop,
    optimize_window,
    transfer_residual,
    transfer_residuals,
    window_residuals,
)

__all__ = [
    "CalibrationResult",
    "FailureConfig",
    "FailureReason",
    "MarginalPrior",
    "OptimizerConfig",
    "PairObservations",
    "PlaneChart",
    "StepReport",
    "WindowState",
    "ZTestResult",
    "average_rotations",
    "average_translations",
    "build_rotation",
    "critical_value",
    "detect_failure",
    "homography",
    "marginalize",
    "marginalize_or_drop",
    "optimize_window",
    "rotation_with_heading",
    "transfer_residual",
    "transfer_residuals",
    "window_residuals",
    "xi_from",
    "z_test",
]
