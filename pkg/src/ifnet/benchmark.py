"""Desk-scale synthetic benchmarks: schedule comparison and illumination trend.

Both draw training and held-out stores from :func:`synth_store` with disjoint
seeds, train toy networks on a short step schedule and report matching mAP.
"""
import time
from dataclasses import dataclass

import numpy as np

from .dataset import synth_store
from .evaluation import evaluate_descriptors, make_eval_split
from .losses import LossConfig
from .net import NetConfig, describe_array, init
from .scheduling import OptimizerConfig, TrackPool, TrainingSchedule, TrainOptions, train

GEO_EVAL_SEED = 900
ILL_EVAL_SEED = 901


@dataclass
class TwoDomainConfig:
    # geometry store outnumbers the illumination store, as in the real pair of datasets
    geo_tracks: int = 640
    ill_tracks: int = 160
    views: int = 4
    eval_tracks: int = 100
    epochs: int = 10
    batch_n: int = 32
    batch_m: int = 2
    lr0: float = 0.1
    descriptor_dim: int = 128


def short_schedule(epochs, lr0=0.1):
    """The 50-epoch step decay compressed to ``epochs``: flat for 60%, then /10 every fifth."""
    return OptimizerConfig(lr0=lr0, decay_start=int(epochs * 0.6), decay_every=max(1, epochs // 5))


def matching_map(net, splits):
    scores = [evaluate_descriptors(s, describe_array(net, s.patches))["matching"] for s in splits]
    return float(np.mean(scores)), scores


def two_domain_data(seed, cfg):
    geo = synth_store(100 + seed, cfg.geo_tracks, cfg.views, "geometry")
    ill = synth_store(200 + seed, cfg.ill_tracks, cfg.views, "illumination")
    splits = [make_eval_split(synth_store(GEO_EVAL_SEED, cfg.eval_tracks, 4, "geometry"), "geo"),
              make_eval_split(synth_store(ILL_EVAL_SEED, cfg.eval_tracks, 4, "illumination"), "ill")]
    return TrackPool.from_store(geo, name="geo"), TrackPool.from_store(ill, name="ill"), splits


def run_schedule(kind, seed, geo, ill, cfg):
    """Train one toy network; kind is separation, mixed, geo->ill or ill->geo."""
    net = init(NetConfig.toy(rng_seed=seed, descriptor_dim=cfg.descriptor_dim))
    split = None
    if kind == "separation":
        sk, stores = "separation", (geo, ill)
    elif kind == "mixed":
        sk, stores = "basic", (geo.merged(ill),)
    elif kind == "geo->ill":
        sk, stores, split = "finetune", (geo, ill), cfg.epochs // 2
    elif kind == "ill->geo":
        sk, stores, split = "finetune", (ill, geo), cfg.epochs // 2
    else:
        raise ValueError(f"unknown schedule {kind!r}")
    schedule = TrainingSchedule(sk, stores, epochs=cfg.epochs, batch_n=cfg.batch_n,
                                batch_m=cfg.batch_m, split_epoch=split)
    train(net, schedule, LossConfig(), short_schedule(cfg.epochs, cfg.lr0), rng_seed=seed)
    return net


def table1(seeds, kinds=("separation", "mixed"), cfg=None, progress=None):
    """Rows of (seed, schedule, matching mAP, seconds); 'random' rows use the untrained init."""
    cfg = cfg or TwoDomainConfig()
    rows = []
    for seed in seeds:
        geo, ill, splits = two_domain_data(seed, cfg)
        base = init(NetConfig.toy(rng_seed=seed, descriptor_dim=cfg.descriptor_dim))
        rows.append((seed, "random", matching_map(base, splits)[0], 0.0))
        for kind in kinds:
            t0 = time.perf_counter()
            net = run_schedule(kind, seed, geo, ill, cfg)
            rows.append((seed, kind, matching_map(net, splits)[0], time.perf_counter() - t0))
            if progress:
                progress(rows[-1])
    return rows


@dataclass
class IlluminationConfig:
    tracks: int = 320
    views: int = 8
    eval_tracks: int = 150
    epochs: int = 10
    batch_n: int = 32
    batch_m: int = 4
    lr0: float = 0.1
    descriptor_dim: int = 128


def illumination_trend(seed, cfg=None):
    """Matching mAP of (hard positives + ROI loss) and (random positives + plain hinge).

    Both arms share the initial network, the batches' track order and the
    hardest-in-batch negative, so the only differences are the positive
    choice and the loss weighting.
    """
    cfg = cfg or IlluminationConfig()
    pool = TrackPool.from_store(synth_store(300 + seed, cfg.tracks, cfg.views, "illumination"),
                                name="ill")
    split = make_eval_split(synth_store(ILL_EVAL_SEED, cfg.eval_tracks, 4, "illumination"), "ill")
    out = {}
    arms = {"roi+hard": (TrainOptions("hardest", "roi"), LossConfig(1.0, "batch-sigmoid")),
            "hinge+random": (TrainOptions("random", "triplet"), LossConfig(1.0, "unit"))}
    for name, (opts, loss_cfg) in arms.items():
        net = init(NetConfig.toy(rng_seed=seed, descriptor_dim=cfg.descriptor_dim))
        schedule = TrainingSchedule("basic", (pool,), epochs=cfg.epochs, batch_n=cfg.batch_n,
                                    batch_m=cfg.batch_m)
        train(net, schedule, loss_cfg, short_schedule(cfg.epochs, cfg.lr0), rng_seed=seed, opts=opts)
        out[name] = matching_map(net, [split])[0]
    return out
