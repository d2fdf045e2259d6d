"""Long-term 2D/3D point tracking in deforming stereo scenes by test-time optimisation."""

from .data_io import SceneBundle, TrackResult, load_checkpoint, load_scene, save_checkpoint
from .engine import OptimConfig, OptimResult, Trainer, optimize, track
from .geometry import CameraIntrinsics, CameraPose, CameraSet, WorkspaceBox
from .metrics import MetricsReport, evaluate_metrics
from .model import ModelConfig, SceneModel
from .render import f_LT
from .synthetic import SyntheticSpec, generate_synthetic_scene

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics", "CameraPose", "CameraSet", "MetricsReport", "ModelConfig", "OptimConfig",
    "OptimResult", "SceneBundle", "SceneModel", "SyntheticSpec", "Trainer", "TrackResult", "WorkspaceBox",
    "evaluate_metrics", "f_LT", "generate_synthetic_scene", "load_checkpoint", "load_scene", "optimize",
    "save_checkpoint", "track",
]
