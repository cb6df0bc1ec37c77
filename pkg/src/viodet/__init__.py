"""Object detection post-processing for AR sessions: orientation correction,
scale filtering and a semantic superpoint map, plus a simulator, COCO
evaluation and a command-line tool."""

from .geometry import BBox, CameraFrame, CameraIntrinsics, Detection, DetectionFrame, Pose
from .pipeline import ABLATION_ROWS, Pipeline, PipelineConfig, run_session
from .scale import ScaleDatabase, default_scale_db, load_scale_db
from .semantic_map import MapConfig, SemanticMap

__version__ = "0.1.0"

__all__ = [
    "ABLATION_ROWS",
    "BBox",
    "CameraFrame",
    "CameraIntrinsics",
    "Detection",
    "DetectionFrame",
    "MapConfig",
    "Pipeline",
    "PipelineConfig",
    "Pose",
    "ScaleDatabase",
    "SemanticMap",
    "default_scale_db",
    "load_scale_db",
    "run_session",
]
