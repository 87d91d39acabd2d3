"""Dual-branch scanpath prediction with a shared pixel-decoder prefix."""

__version__ = "0.1.0"

from .data import Fixation, ImageSample, Scanpath, TaskSpec, generate_scene, synthesize
from .model import ModelConfig, ScanpathModel, SplitConfig, build_model
from .training import TrainConfig, load_checkpoint, save_checkpoint

__all__ = [
    "Fixation", "ImageSample", "Scanpath", "TaskSpec", "generate_scene", "synthesize",
    "ModelConfig", "ScanpathModel", "SplitConfig", "build_model",
    "TrainConfig", "load_checkpoint", "save_checkpoint",
]
