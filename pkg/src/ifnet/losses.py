"""Triplet margin loss, its hardest-positive form, and the outlier-weighted (ROI) form."""
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import BatchTooSmall, EmptyBatch, InvalidConfig, NegativeDistance
from .tensor import Tensor

WEIGHT_MODES = ("unit", "batch-sigmoid", "relative")


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


@dataclass
class LossConfig:
    margin: float = 1.0
    weight_mode: str = "batch-sigmoid"

    def __post_init__(self):
        if self.margin < 0:
            raise InvalidConfig(f"margin must be >= 0, got {self.margin}")
        if self.weight_mode not in WEIGHT_MODES:
            raise InvalidConfig(f"weight_mode must be one of {WEIGHT_MODES}, got {self.weight_mode!r}")


@dataclass
class BatchWeights:
    w_p: np.ndarray
    w_n: np.ndarray


def triplet_margin_loss(d_ap, d_an, m):
    if d_ap < 0 or d_an < 0:
        raise NegativeDistance(f"distances must be >= 0, got d_ap={d_ap}, d_an={d_an}")
    return max(m + d_ap - d_an, 0.0)


def margin_loss(d_ap, d_an, m):
    """Mean hinge over aligned distance tensors (taped)."""
    return ops.mean(ops.relu(ops.add_scalar(ops.sub(d_ap, d_an), m)))


def hard_positive_triplet_loss(triplets, m):
    if triplets.n < 2:
        raise BatchTooSmall("the hardest-positive loss needs N >= 2")
    return ops.mean(ops.relu(ops.add_scalar(ops.sub(triplets.d_pos, triplets.d_neg), m)))


def batch_weights(d_M_list, d_m_list, config):
    d_M = np.asarray(d_M_list, dtype=np.float64)
    d_m = np.asarray(d_m_list, dtype=np.float64)
    n = len(d_M)
    if n == 0 or len(d_m) == 0:
        raise EmptyBatch("batch_weights needs at least one row")
    if config.weight_mode == "unit":
        return BatchWeights(np.ones(n), np.ones(n))
    if config.weight_mode == "batch-sigmoid":
        return BatchWeights(np.full(n, sigmoid(d_M.mean())), np.full(n, sigmoid(d_m.mean())))
    return BatchWeights(sigmoid(d_M - d_M.mean()) + 0.5, sigmoid(d_m - d_m.mean()) + 0.5)


def roi_loss(triplets, config, weights=None):
    """mean_i max(m + w_p,i d_M,i - w_n,i d_m,i, 0); the weights carry no gradient.

    Pass ``weights`` (a BatchWeights) to hold them fixed instead of deriving
    them from this batch, e.g. when differentiating numerically.
    """
    if triplets.n < 2:
        raise BatchTooSmall("the ROI loss needs N >= 2")
    w = weights or batch_weights(triplets.d_M, triplets.d_m, config)
    dtype = triplets.d_pos.dtype
    w_p = Tensor(w.w_p.astype(dtype))
    w_n = Tensor(w.w_n.astype(dtype))
    gap = ops.sub(ops.mul(w_p, triplets.d_pos), ops.mul(w_n, triplets.d_neg))
    return ops.mean(ops.relu(ops.add_scalar(gap, config.margin)))
