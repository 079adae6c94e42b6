"""Gaussian-voxel synergistic multi-view 3D detection."""

from .estimator import GVSynergyDetector
from .pipeline import (VARIANTS, ConfigError, PipelineConfig, TrainingDiverged, TrainState, forward_step,
                       load_checkpoint, predict_scene, render_scene, run_benchmark, save_checkpoint, train)
from .scenegen import SyntheticScene, generate_scene, read_scene, write_scene

__version__ = "0.1.0"

__all__ = [
    "GVSynergyDetector", "VARIANTS", "ConfigError", "PipelineConfig", "TrainingDiverged", "TrainState",
    "forward_step", "load_checkpoint", "predict_scene", "render_scene", "run_benchmark", "save_checkpoint",
    "train", "SyntheticScene", "generate_scene", "read_scene", "write_scene",
]
