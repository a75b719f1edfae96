"""Dataset schedules (basic, fine-tune, separation), Adam and the training loop."""
import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import InsufficientTracks, InvalidConfig, ShapeMismatch
from .losses import LossConfig, hard_positive_triplet_loss, roi_loss
from .mining import batch_from_tracks, form_triplets
from .net import prepare_patches, save_checkpoint
from .tensor import Graph

log = logging.getLogger(__name__)

BASIC = "basic"
FINETUNE = "finetune"
SEPARATION = "separation"
KINDS = (BASIC, FINETUNE, SEPARATION)


@dataclass
class OptimizerConfig:
    lr0: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_start: int = 30
    decay_every: int = 10
    decay_factor: float = 10.0


def lr_at(epoch, cfg):
    """Learning rate for a 0-based epoch: constant, then divided by decay_factor every decay_every epochs."""
    if epoch < cfg.decay_start:
        return cfg.lr0
    steps = (epoch - cfg.decay_start) // cfg.decay_every + 1
    return cfg.lr0 / cfg.decay_factor ** steps


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state, lr, cfg):
    """In-place bias-corrected Adam update of numpy arrays ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch("adam_step", (len(params),), (len(grads),), (len(state.m),))
    state.t += 1
    c1 = 1 - cfg.beta1 ** state.t
    c2 = 1 - cfg.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatch("adam_step", p.shape, g.shape)
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return params, state


class Adam:
    def __init__(self, params, cfg=None):
        self.params = params
        self.cfg = cfg or OptimizerConfig()
        self.state = AdamState.like([p.values for p in params])

    def step(self, lr):
        adam_step([p.values for p in self.params], [p.grad for p in self.params],
                  self.state, lr, self.cfg)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


@dataclass
class TrackPool:
    """Prepared per-track patch arrays, ready for batch sampling."""

    patches: list  # one (n_members, 1, s, s) float32 array per track
    ids: np.ndarray
    name: str = ""

    @classmethod
    def from_store(cls, store, input_side=32, name=""):
        patches = [prepare_patches(t.patches, input_side) for t in store.tracks]
        return cls(patches, np.array([t.track_id for t in store.tracks]), name)

    def __len__(self):
        return len(self.patches)

    def merged(self, other, name="mixed"):
        """Concatenated pool with ids made unique by source prefix."""
        ids = np.concatenate([np.char.add("a:", self.ids.astype(str)),
                              np.char.add("b:", other.ids.astype(str))])
        return TrackPool(self.patches + other.patches, ids, name)


@dataclass
class TrainingSchedule:
    kind: str = BASIC
    stores: tuple = ()  # basic: (pool,), finetune: (first, second), separation: (geo, ill)
    epochs: int = 50
    batch_n: int = 170
    batch_m: int = 2
    split_epoch: int = None
    max_iters_per_epoch: int = None

    def validate(self):
        if self.kind not in KINDS:
            raise InvalidConfig(f"unknown schedule kind {self.kind!r}")
        want = 1 if self.kind == BASIC else 2
        if len(self.stores) != want:
            raise InvalidConfig(f"{self.kind} schedule needs {want} store(s), got {len(self.stores)}")
        if self.kind == FINETUNE and not (
                self.split_epoch is not None and 0 < self.split_epoch < self.epochs):
            raise InvalidConfig(f"split epoch must lie strictly inside (0, {self.epochs})")
        if self.kind == SEPARATION and self.stores[0] is self.stores[1]:
            raise InvalidConfig("separation needs two distinct stores")
        if self.batch_n < 2 or self.batch_m < 1:
            raise InvalidConfig("batch needs N >= 2 and M >= 1")
        for pool in self.stores:
            if len(pool) < self.batch_n:
                raise InsufficientTracks(
                    f"store {pool.name or '?'} has {len(pool)} tracks, batch needs {self.batch_n}")


@dataclass
class TrainOptions:
    positive: str = "hardest"  # or "random"
    loss: str = "roi"  # or "triplet" (unweighted hinge over the mined triplets)
    checkpoint_every: int = 0
    out_dir: str = None


@dataclass
class EpochRow:
    epoch: int
    lr: float
    loss_geo: float = math.nan
    loss_ill: float = math.nan
    wall_ms: float = 0.0
    store: str = ""

    @property
    def loss(self):
        vals = [v for v in (self.loss_geo, self.loss_ill) if not math.isnan(v)]
        return float(sum(vals)) if vals else math.nan


@dataclass
class TrainingReport:
    rows: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)

    def losses(self):
        return [(r.epoch, r.lr, r.loss_geo, r.loss_ill) for r in self.rows]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "lr", "loss_geo", "loss_ill", "wall_ms"])
            for r in self.rows:
                w.writerow([r.epoch, repr(r.lr), _fmt(r.loss_geo), _fmt(r.loss_ill),
                            f"{r.wall_ms:.1f}"])


def _fmt(x):
    return "" if math.isnan(x) else repr(float(x))


def _branch_loss(batch, net, loss_cfg, opts, rng):
    triplets = form_triplets(batch, net, positive=opts.positive, rng=rng)
    if opts.loss == "triplet":
        return hard_positive_triplet_loss(triplets, loss_cfg.margin)
    return roi_loss(triplets, loss_cfg)


def train_step(net, batch, loss_cfg, opt, lr, opts=None, rng=None, scale=1.0):
    """One update from a single batch; ``scale`` multiplies the loss before backward."""
    opts = opts or TrainOptions()
    graph = Graph()
    with graph:
        loss = _branch_loss(batch, net, loss_cfg, opts, rng)
        total = ops.scale(loss, scale) if scale != 1.0 else loss
    opt.zero_grad()
    graph.backward(total)
    opt.step(lr)
    return loss.item()


def separation_step(net, batch_geo, batch_ill, loss_cfg, opt, lr, opts=None, rng=None):
    """Both batches through the same network, gradient of the summed loss, one update."""
    opts = opts or TrainOptions()
    graph = Graph()
    with graph:
        loss_geo = _branch_loss(batch_geo, net, loss_cfg, opts, rng)
        loss_ill = _branch_loss(batch_ill, net, loss_cfg, opts, rng)
        total = ops.add(loss_geo, loss_ill)
    opt.zero_grad()
    graph.backward(total)
    opt.step(lr)
    return loss_geo.item(), loss_ill.item()


def _epoch_batches(pool, n, m, n_iters, rng):
    order = rng.permutation(len(pool))
    for it in range(n_iters):
        yield batch_from_tracks(pool.patches, pool.ids, order[it * n:(it + 1) * n], m, rng)


def train(net, schedule, loss_cfg=None, opt_cfg=None, rng_seed=0, opts=None, optimizer=None):
    """Run a schedule; deterministic given rng_seed (wall_ms aside)."""
    loss_cfg = loss_cfg or LossConfig()
    opt_cfg = opt_cfg or OptimizerConfig()
    opts = opts or TrainOptions()
    schedule.validate()
    opt = optimizer or Adam(net.weights, opt_cfg)
    report = TrainingReport()
    n, m = schedule.batch_n, schedule.batch_m
    for epoch in range(schedule.epochs):
        lr = lr_at(epoch, opt_cfg)
        rng = np.random.default_rng([rng_seed, epoch])
        start = time.perf_counter()
        if schedule.kind == SEPARATION:
            geo, ill = schedule.stores
            iters = _iters(min(len(geo), len(ill)), n, schedule)
            geo_batches = _epoch_batches(geo, n, m, iters, rng)
            ill_batches = _epoch_batches(ill, n, m, iters, rng)
            lg, li = [], []
            for bg, bi in zip(geo_batches, ill_batches):
                a, b = separation_step(net, bg, bi, loss_cfg, opt, lr, opts, rng)
                lg.append(a)
                li.append(b)
            row = EpochRow(epoch, lr, float(np.mean(lg)), float(np.mean(li)),
                           store=f"{geo.name}+{ill.name}")
        else:
            second = schedule.kind == FINETUNE and epoch >= schedule.split_epoch
            pool = schedule.stores[1] if second else schedule.stores[0]
            if schedule.kind == FINETUNE and epoch == schedule.split_epoch:
                log.info("epoch %d: switching dataset to %s", epoch, pool.name or "second store")
            iters = _iters(len(pool), n, schedule)
            losses = [train_step(net, b, loss_cfg, opt, lr, opts, rng)
                      for b in _epoch_batches(pool, n, m, iters, rng)]
            row = EpochRow(epoch, lr, store=pool.name)
            if second:
                row.loss_ill = float(np.mean(losses))
            else:
                row.loss_geo = float(np.mean(losses))
        row.wall_ms = (time.perf_counter() - start) * 1000
        report.rows.append(row)
        log.info("epoch %d lr %.4g loss %.4f (%.0f ms)", epoch, lr, row.loss, row.wall_ms)
        if not math.isfinite(row.loss):
            raise FloatingPointError(f"non-finite loss at epoch {epoch}")
        if opts.out_dir and opts.checkpoint_every and (epoch + 1) % opts.checkpoint_every == 0:
            path = os.path.join(opts.out_dir, f"epoch{epoch + 1:03d}.ckpt")
            save_checkpoint(net, path)
            report.checkpoints.append(path)
    if opts.out_dir:
        path = os.path.join(opts.out_dir, "final.ckpt")
        save_checkpoint(net, path)
        report.checkpoints.append(path)
    return report


def _iters(n_tracks, n, schedule):
    iters = n_tracks // n
    if schedule.max_iters_per_epoch:
        iters = min(iters, schedule.max_iters_per_epoch)
    return iters
