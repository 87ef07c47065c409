"""Progressive point-denoising detection of small moving objects in image sequences."""

from .model import DiffMod, ModelConfig
from .pipeline import TrainConfig, evaluate, train
from .scenegen import SceneConfig, generate_scene

__version__ = "0.1.0"

__all__ = ["DiffMod", "ModelConfig", "SceneConfig", "TrainConfig", "evaluate", "generate_scene", "train"]
