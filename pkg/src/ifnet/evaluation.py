"""Patch-level mAP protocols (verification, matching, retrieval) and Top-K precision."""
import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NoPositives
from .mining import pairwise_distances


def _ranked(scores):
    # stable descending sort: ties keep original order
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def average_precision(scores, labels, n_relevant=None):
    """Mean of precision at each positive's rank after a stable descending sort.

    ``n_relevant`` replaces the positive count in the denominator when some
    relevant items never made it into the list (each then contributes 0).
    """
    labels = np.asarray(labels, dtype=bool)
    order = _ranked(scores)
    hits = labels[order]
    n_pos = int(hits.sum()) if n_relevant is None else int(n_relevant)
    if n_pos == 0:
        raise NoPositives("average precision needs at least one positive")
    ranks = np.flatnonzero(hits) + 1
    precision = np.arange(1, len(ranks) + 1) / ranks
    return math.fsum(precision) / n_pos


def precision_curve(scores, labels):
    """(rank, precision at rank) for plotting."""
    hits = np.asarray(labels, dtype=bool)[_ranked(scores)]
    ranks = np.arange(1, len(hits) + 1)
    return ranks, np.cumsum(hits) / ranks


def precision_at_k(distances, labels, k=40):
    """Fraction correct among the k lowest-distance matches (all of them if fewer than k)."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    labels = np.asarray(labels, dtype=bool)
    if len(labels) == 0:
        return 0.0
    order = np.argsort(np.asarray(distances, dtype=np.float64), kind="stable")
    top = labels[order[:k]]
    return float(top.mean())


def eval_verification(desc_a, desc_b, labels):
    """AP of pairs ranked by negative descriptor distance; pair i is (desc_a[i], desc_b[i])."""
    a = np.asarray(desc_a, dtype=np.float64)
    b = np.asarray(desc_b, dtype=np.float64)
    dist = np.linalg.norm(a - b, axis=1)
    return average_precision(-dist, labels)


def nearest_neighbours(desc_a, desc_b, mutual=False):
    """Index into B of each A row's L2 nearest neighbour (lowest index on ties), and its distance.

    With ``mutual`` a match is kept only if A's row is also B's nearest; others get -1.
    """
    dist = pairwise_distances(desc_a, desc_b)
    nn = np.argmin(dist, axis=1)
    d = dist[np.arange(len(nn)), nn]
    if mutual:
        back = np.argmin(dist, axis=0)
        nn = np.where(back[nn] == np.arange(len(nn)), nn, -1)
    return nn, d


def match_ap(desc_a, desc_b, truth, mutual=False):
    """AP of one A->B nearest-neighbour matching.

    ``truth[i]`` is the index in B of A[i]'s correspondent, or -1. Candidates
    are ranked by negative distance; the denominator counts every A row with a
    correspondent, so missed matches lower the score.
    """
    truth = np.asarray(truth)
    if len(desc_a) == 0 or len(desc_b) == 0:
        raise ValueError("matching needs non-empty descriptor sets")
    nn, d = nearest_neighbours(desc_a, desc_b, mutual)
    keep = nn >= 0
    correct = (nn == truth) & keep
    n_true = int((truth >= 0).sum())
    if n_true == 0:
        raise NoPositives("no A row has a correspondent in B")
    if not correct.any():
        return 0.0
    return average_precision(-d[keep], correct[keep], n_relevant=n_true)


def eval_matching(set_pairs, mutual=False):
    """Mean of match_ap over (desc_a, desc_b, truth) triples."""
    aps = [match_ap(a, b, t, mutual) for a, b, t in set_pairs]
    return float(np.mean(aps))


def eval_retrieval(queries, pool, relevance):
    """Mean over queries of the AP of the pool ranked by ascending distance.

    ``relevance`` is a (Q, P) boolean table; every query needs one relevant item.
    """
    relevance = np.asarray(relevance, dtype=bool)
    dist = pairwise_distances(queries, pool)
    aps = []
    for q in range(len(dist)):
        if not relevance[q].any():
            raise NoPositives(f"query {q} has no relevant item in the pool")
        aps.append(average_precision(-dist[q], relevance[q]))
    return float(np.mean(aps))


# --- desk-scale splits -----------------------------------------------------------

@dataclass
class EvalSplit:
    """Held-out patches and the index structure of the three tasks."""

    name: str
    patches: np.ndarray  # (P, 64, 64) uint8
    track_of: np.ndarray  # (P,)
    view_of: np.ndarray  # (P,)
    verification: tuple = ()  # (idx_a, idx_b, labels)
    matching: list = field(default_factory=list)  # [(idx_a, idx_b, truth)]
    retrieval: tuple = ()  # (query_idx, pool_idx)


def make_eval_split(store, name="heldout", seed=0, max_views=None):
    """Verification pairs, view-0 vs view-j matching sets and a retrieval pool from a store."""
    rng = np.random.default_rng(seed)
    patches, track_of, view_of = [], [], []
    starts = []
    for t_idx, t in enumerate(store.tracks):
        n = len(t) if max_views is None else min(len(t), max_views)
        starts.append(len(patches))
        for v in range(n):
            patches.append(t.patches[v])
            track_of.append(t_idx)
            view_of.append(v)
    patches = np.stack(patches) if patches else np.zeros((0, 64, 64), np.uint8)
    track_of = np.asarray(track_of)
    view_of = np.asarray(view_of)
    n_tracks = len(store.tracks)
    starts = np.asarray(starts)
    counts = np.bincount(track_of, minlength=n_tracks)

    ia, ib, lab = [], [], []
    for t in range(n_tracks):
        for v in range(1, counts[t]):
            ia.append(starts[t])
            ib.append(starts[t] + v)
            lab.append(True)
            other = (t + rng.integers(1, n_tracks)) % n_tracks
            ia.append(starts[t])
            ib.append(starts[other] + rng.integers(0, counts[other]))
            lab.append(False)
    verification = (np.asarray(ia), np.asarray(ib), np.asarray(lab))

    matching = []
    for v in range(1, int(counts.min()) if n_tracks else 0):
        idx_a = starts.copy()
        perm = rng.permutation(n_tracks)
        idx_b = starts[perm] + v
        truth = np.argsort(perm)  # A row t matches B position where perm == t
        matching.append((idx_a, idx_b, truth))

    query = starts.copy()
    pool = np.flatnonzero(view_of > 0)
    return EvalSplit(name, patches, track_of, view_of, verification, matching, (query, pool))


def evaluate_descriptors(split, desc):
    """mAP per task given descriptors for every patch of the split."""
    ia, ib, lab = split.verification
    out = {"verification": eval_verification(desc[ia], desc[ib], lab)}
    out["matching"] = eval_matching([(desc[a], desc[b], t) for a, b, t in split.matching])
    q, pool = split.retrieval
    rel = split.track_of[q][:, None] == split.track_of[pool][None, :]
    out["retrieval"] = eval_retrieval(desc[q], desc[pool], rel)
    return out


def matching_precision_curve(split, desc):
    ranks_all, prec_all = [], []
    for a, b, t in split.matching:
        nn, d = nearest_neighbours(desc[a], desc[b])
        r, p = precision_curve(-d, nn == t)
        ranks_all.append(r)
        prec_all.append(p)
    n = min(len(r) for r in ranks_all)
    return ranks_all[0][:n], np.mean([p[:n] for p in prec_all], axis=0)


# --- files ---------------------------------------------------------------------

def write_descriptors(path, desc):
    desc = np.asarray(desc, dtype=np.float64)
    with open(path, "w") as fh:
        fh.write(f"IFDESC1 dim={desc.shape[1]} count={desc.shape[0]}\n")
        for row in desc:
            fh.write(" ".join(f"{v:.9g}" for v in row) + "\n")


def read_descriptors(path):
    with open(path) as fh:
        head = fh.readline().split()
        if not head or head[0] != "IFDESC1":
            raise ValueError(f"{path}: not an IFDESC1 file")
        meta = dict(tok.split("=", 1) for tok in head[1:])
        dim, count = int(meta["dim"]), int(meta["count"])
        rows = [np.array(line.split(), dtype=np.float64) for line in fh if line.strip()]
    arr = np.stack(rows) if rows else np.zeros((0, dim))
    if arr.shape != (count, dim):
        raise ValueError(f"{path}: header says {count}x{dim}, body is {arr.shape}")
    return arr


def write_report(path, rows):
    """rows of dicts with keys task, split, value, count, seed."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "split", "mAP", "count", "seed"])
        for r in rows:
            w.writerow([r["task"], r["split"], f"{r['value']:.6f}", r["count"], r["seed"]])
