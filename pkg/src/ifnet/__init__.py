"""Illumination-robust local patch descriptors trained from scratch on numpy."""
from .errors import IFNetError
from .losses import LossConfig, hard_positive_triplet_loss, roi_loss
from .mining import CorrespondenceBatch, form_triplets
from .net import NetConfig, Network, describe, describe_array, init, load_checkpoint, save_checkpoint
from .scheduling import OptimizerConfig, TrainingSchedule, lr_at, train
from .tensor import Graph, Tensor

__version__ = "0.1.0"

__all__ = [
    "CorrespondenceBatch", "Graph", "IFNetError", "LossConfig", "NetConfig", "Network",
    "OptimizerConfig", "Tensor", "TrainingSchedule", "describe", "describe_array", "form_triplets",
    "hard_positive_triplet_loss", "init", "load_checkpoint", "lr_at", "roi_loss",
    "save_checkpoint", "train",
]
