"""Desk-scale referring image segmentation with recurrent multimodal fusion."""

from .models import BaselineModel, ModelConfig, RmiModel, build_model, predict_mask, response_map
from .tensor import Tape, Tensor
from .training import ModelCheckpoint, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BaselineModel",
    "ModelCheckpoint",
    "ModelConfig",
    "RmiModel",
    "Tape",
    "Tensor",
    "TrainConfig",
    "build_model",
    "predict_mask",
    "response_map",
    "train",
    "__version__",
]
