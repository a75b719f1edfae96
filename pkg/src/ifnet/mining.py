"""Correspondence batches, hardest-positive and hardest in-batch negative mining."""
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import BatchTooSmall, DimMismatch, DuplicateTrackIds, EmptyRow, InvalidParams
from .net import describe
from .tensor import Tensor

OTHER_POSITIVE = "other-row-positive"
OTHER_ANCHOR = "other-row-anchor"
DIST_EPS = 1e-8


@dataclass
class CorrespondenceBatch:
    """N anchors with M positives each; patches already prepared for the network."""

    anchors: np.ndarray  # (N, 1, s, s)
    positives: np.ndarray  # (N, M, 1, s, s)
    track_ids: np.ndarray  # (N,)

    def __post_init__(self):
        self.track_ids = np.asarray(self.track_ids)
        n = len(self.anchors)
        if n < 2:
            raise BatchTooSmall(f"need at least 2 anchors, got {n}")
        if self.positives.shape[0] != n or self.positives.shape[1] < 1:
            raise InvalidParams(f"positives shape {self.positives.shape} does not fit {n} anchors")
        if len(self.track_ids) != n:
            raise InvalidParams("one track id per anchor required")
        if len(np.unique(self.track_ids)) != n:
            raise DuplicateTrackIds("track ids within a batch must be distinct")

    @property
    def n(self):
        return len(self.anchors)

    @property
    def m(self):
        return self.positives.shape[1]

    def stacked(self):
        """Anchors followed by positives in row-major (i, j) order: N * (M + 1) patches."""
        tail = self.anchors.shape[1:]
        return np.concatenate([self.anchors, self.positives.reshape((-1,) + tail)], axis=0)


@dataclass
class MinedTriplets:
    pos_index: np.ndarray  # j*_i
    neg_index: np.ndarray  # k*_i
    neg_source: np.ndarray  # OTHER_POSITIVE / OTHER_ANCHOR
    d_pos: Tensor  # d_M(a_i, p_i), shape (N,)
    d_neg: Tensor  # d_m(a_i, n_i), shape (N,)
    descriptors: Tensor = None

    @property
    def n(self):
        return len(self.pos_index)

    @property
    def d_M(self):
        return self.d_pos.values

    @property
    def d_m(self):
        return self.d_neg.values


def _as_array(x):
    return np.asarray(x.values if isinstance(x, Tensor) else x, dtype=np.float64)


def pairwise_distances(left, right):
    """Exact L2 distance table between the rows of two descriptor batches."""
    a, b = _as_array(left), _as_array(right)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimMismatch(f"descriptor dims differ: {a.shape} vs {b.shape}")
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def distance_matrix(left, right, eps=DIST_EPS):
    """Differentiable counterpart of pairwise_distances: sqrt(squared distance + eps)."""
    if left.shape[1] != right.shape[1]:
        raise DimMismatch(f"descriptor dims differ: {left.shape} vs {right.shape}")
    return ops.sqrt(ops.pairwise_sq_distances(left, right), eps)


def mine_hard_positive(d_pos):
    """Column of the farthest positive per row; lowest index wins ties."""
    d_pos = np.asarray(d_pos)
    if d_pos.ndim != 2 or d_pos.shape[1] == 0:
        raise EmptyRow(f"positive distance table has no columns: shape {d_pos.shape}")
    return np.argmax(d_pos, axis=1)


def select_hard_negatives(dist, track_ids):
    """Pick the closest non-matching candidate for every row.

    ``dist[i, k]`` is d(a_i, p_k). Row i sees the candidates p_k (row i of
    ``dist``) and a_k (column i), restricted to k with a different track id.
    Ordering: smallest distance, then the other-row-positive side, then lowest k.
    """
    dist = np.asarray(dist, dtype=np.float64)
    track_ids = np.asarray(track_ids)
    n = len(dist)
    if n < 2:
        raise BatchTooSmall(f"need at least 2 rows, got {n}")
    same = track_ids[:, None] == track_ids[None, :]
    if same.all(axis=1).any():
        raise DuplicateTrackIds("some row has no candidate from another track")
    by_pos = np.where(same, np.inf, dist)
    by_anchor = np.where(same, np.inf, dist.T)
    k_pos = np.argmin(by_pos, axis=1)
    k_anc = np.argmin(by_anchor, axis=1)
    rows = np.arange(n)
    d_pos = by_pos[rows, k_pos]
    d_anc = by_anchor[rows, k_anc]
    use_pos = d_pos <= d_anc
    k = np.where(use_pos, k_pos, k_anc)
    source = np.where(use_pos, OTHER_POSITIVE, OTHER_ANCHOR)
    return k, source, np.where(use_pos, d_pos, d_anc)


def mine_hard_negative(anchor_desc, chosen_pos_desc, track_ids):
    a, p = _as_array(anchor_desc), _as_array(chosen_pos_desc)
    if len(a) != len(p):
        raise DimMismatch(f"{len(a)} anchors vs {len(p)} positives")
    if len(a) < 2:
        raise BatchTooSmall(f"need at least 2 rows, got {len(a)}")
    track_ids = np.asarray(track_ids)
    if len(np.unique(track_ids)) != len(track_ids):
        raise DuplicateTrackIds("track ids within a batch must be distinct")
    return select_hard_negatives(pairwise_distances(a, p), track_ids)


def mine(descriptors, n, m, track_ids, positive="hardest", rng=None):
    """Mine triplets from stacked descriptors (anchors then positives), keeping distances on the tape."""
    anchors = ops.take_rows(descriptors, np.arange(n))
    positives = ops.take_rows(descriptors, np.arange(n, n + n * m))
    rep = np.repeat(np.arange(n), m)
    d_all = ops.row_distances(ops.take_rows(anchors, rep), positives, DIST_EPS)
    table = d_all.values.reshape(n, m)
    if positive == "hardest":
        j = mine_hard_positive(table)
    elif positive == "random":
        rng = rng if rng is not None else np.random.default_rng(0)
        j = rng.integers(0, m, size=n)
    else:
        raise InvalidParams(f"unknown positive strategy {positive!r}")
    rows = np.arange(n)
    d_pos = ops.take(d_all, rows * m + j)
    chosen = ops.take_rows(positives, rows * m + j)
    dist = distance_matrix(anchors, chosen)
    k, source, _ = select_hard_negatives(dist.values, track_ids)
    flat = np.where(source == OTHER_POSITIVE, rows * n + k, k * n + rows)
    d_neg = ops.take(dist, flat)
    return MinedTriplets(j, k, source, d_pos, d_neg, descriptors)


def form_triplets(batch, net, positive="hardest", rng=None, train_mode=True):
    """Describe all N * (M + 1) patches in one pass and mine the triplets."""
    desc = describe(net, batch.stacked(), train_mode=train_mode)
    return mine(desc, batch.n, batch.m, batch.track_ids, positive=positive, rng=rng)


def sample_batch(track_patches, track_ids, n, m, rng):
    """Draw n distinct tracks uniformly, then anchor and positives via batch_from_tracks."""
    if len(track_patches) < n:
        raise BatchTooSmall(f"need {n} tracks, store has {len(track_patches)}")
    chosen = rng.choice(len(track_patches), size=n, replace=False)
    return batch_from_tracks(track_patches, track_ids, chosen, m, rng)


def batch_from_tracks(track_patches, track_ids, chosen, m, rng):
    """One anchor and m positives for each chosen track.

    Positives are drawn without replacement from the remaining members, with
    replacement when fewer than m remain.
    """
    anchors, positives = [], []
    for t in chosen:
        members = track_patches[t]
        order = rng.permutation(len(members))
        anchor, rest = order[0], order[1:]
        if len(rest) >= m:
            pick = rest[:m]
        else:
            pick = rest[rng.integers(0, len(rest), size=m)]
        anchors.append(members[anchor])
        positives.append(members[pick])
    return CorrespondenceBatch(np.stack(anchors), np.stack(positives),
                               np.asarray(track_ids)[np.asarray(chosen)])
