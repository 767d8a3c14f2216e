"""Sequential-recommendation lab: causal Transformer next-item model with a
dropout-twin contrastive regularizer and embedding-geometry diagnostics."""

from .autodiff import Tensor, no_grad
from .rng import RngStream
from .trainer import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

__all__ = [
    "Tensor", "no_grad", "RngStream", "TrainConfig", "train", "evaluate",
    "save_checkpoint", "load_checkpoint",
]
