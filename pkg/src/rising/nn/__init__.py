"""Residual U-Net written against numpy, with its own backward pass and Adam."""

from .estimator import ResUNetRegressor
from .optim import TrainConfig
from .train import TrainingLog, load_checkpoint, save_checkpoint, train
from .unet import NetworkSpec, ResUNet

__all__ = [
    "NetworkSpec",
    "ResUNet",
    "ResUNetRegressor",
    "TrainConfig",
    "TrainingLog",
    "load_checkpoint",
    "save_checkpoint",
    "train",
]
