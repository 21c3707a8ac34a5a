"""Online camera-to-ground extrinsic calibration from road features and wheel odometry."""

from .config import PipelineConfig, load_config
from .pipeline import CalibrationPipeline, CalibrationReport, run_pipeline
from .scenario_io import export_scenario, import_scenario
from .simulator import ScenarioConfig, generate

__version__ = "0.1.0"

__all__ = [
    "CalibrationPipeline",
    "CalibrationReport",
    "PipelineConfig",
    "ScenarioConfig",
    "export_scenario",
    "generate",
    "import_scenario",
    "load_config",
    "run_pipeline",
]
