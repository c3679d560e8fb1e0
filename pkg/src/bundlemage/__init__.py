"""Bundle matching and generation from user-item and user-bundle interactions."""

from .data import Dataset, build_dataset, load_dataset, load_split, make_split, save_split
from .model import BundleMage, ModelConfig
from .training import TrainConfig, train

__all__ = [
    "BundleMage",
    "Dataset",
    "ModelConfig",
    "TrainConfig",
    "build_dataset",
    "load_dataset",
    "load_split",
    "make_split",
    "save_split",
    "train",
]
__version__ = "0.1.0"
