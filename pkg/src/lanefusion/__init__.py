"""Multi-lane estimation on highways by graph-based fusion of camera and object data."""

__version__ = "0.1.0"

from .config import PipelineConfig, ConfigError
from .geometry import Clothoid, ControlVector, LaneFeature, Pose2
from .graph import FusionGraph
from .optimizer import solve
from .pipeline import FrameResult, LanePipeline
from .simulator import GroundTruthMap, ScenarioConfig, ScenarioError, SensorFrame, generate
from .evaluation import DeviationTable, run_pipeline

__all__ = [
    "Clothoid", "ConfigError", "ControlVector", "DeviationTable", "FrameResult", "FusionGraph",
    "GroundTruthMap", "LaneFeature", "LanePipeline", "PipelineConfig", "Pose2", "ScenarioConfig",
    "ScenarioError", "SensorFrame", "generate", "run_pipeline", "solve",
]
