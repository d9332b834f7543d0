"""QTSeg segmentation engine: numpy tensor core, model, training and tooling."""
from .config import ModelConfig, TrainConfig
from .model import QTSeg, build_model
from .tensor import GradTape, Tensor, backward, no_grad

__all__ = ["ModelConfig", "TrainConfig", "QTSeg", "build_model", "GradTape", "Tensor", "backward", "no_grad"]
__version__ = "0.1.0"
