"""Command-line entry point: build-dataset, train, eval, export-descriptors, repro-table1.

Any long option can also come from ``--config FILE``, an INI file whose keys
are option names (``batch-n = 16``). Keys may sit at the top of the file, in a
``[common]`` section or in a section named after the command. Options given on
the command line win. Each run writes ``resolved_config.ini`` next to its
outputs and that file can be passed back through ``--config``.

Exit codes: 2 usage or invalid input, 3 training failure, 4 checkpoint or
descriptor mismatch.
"""
import argparse
import configparser
import logging
import os
import sys

import numpy as np
from PIL import Image

from . import benchmark
from .dataset import DetectorConfig, build_store, load_store, read_keypoints, save_store, synth_store
from .errors import (CheckpointMismatch, CorruptManifest, IFNetError, InsufficientTracks,
                     InvalidConfig, MissingPatchFile, WrongPatchSize)
from .evaluation import (evaluate_descriptors, make_eval_split, matching_precision_curve,
                         write_descriptors, write_report)
from .losses import LossConfig
from .net import NetConfig, describe_array, init, load_checkpoint
from .scheduling import OptimizerConfig, TrackPool, TrainingSchedule, TrainOptions, train

EXIT_USAGE = 2
EXIT_TRAIN = 3
EXIT_MISMATCH = 4

CONFIG_NAME = "resolved_config.ini"
IMAGE_EXT = (".pgm", ".ppm", ".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")

log = logging.getLogger("ifnet")


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


# --- argument parsing ------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="ifnet", description=__doc__.split("\n")[0])
    p.add_argument("--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build-dataset", help="write a correspondence store")
    _config_opt(b)
    src = b.add_mutually_exclusive_group(required=True)
    src.add_argument("--synth", action="store_true", help="procedurally rendered store")
    src.add_argument("--frames", help="directory with one sub-directory of frames per scene")
    b.add_argument("--out", required=True)
    b.add_argument("--tracks", type=int, default=100)
    b.add_argument("--views", type=int, default=4)
    b.add_argument("--mode", choices=["geometry", "illumination", "both"], default="both")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--first-id", type=int, default=0)
    b.add_argument("--keypoints", help="directory of <scene>.txt keypoint files (frame_id x y score)")
    b.add_argument("--tolerance", type=float, default=2.0)
    b.add_argument("--frames-per-scene", type=int, default=200)
    b.add_argument("--sigma", type=float, default=1.0)
    b.add_argument("--nms-radius", type=int, default=3)
    b.add_argument("--rel-threshold", type=float, default=0.1)
    b.add_argument("--top-k", type=int, default=500)

    t = sub.add_parser("train", help="train a descriptor network")
    _config_opt(t)
    t.add_argument("--schedule", choices=["basic", "finetune", "separation", "mixed"],
                   default="basic")
    t.add_argument("--store", help="store for the basic schedule")
    t.add_argument("--geo", help="geometry store (separation, mixed)")
    t.add_argument("--ill", help="illumination store (separation, mixed)")
    t.add_argument("--first", help="first store (finetune)")
    t.add_argument("--second", help="second store (finetune)")
    t.add_argument("--split-epoch", type=int)
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--toy", action="store_true", help="small channel plan for CPU runs")
    t.add_argument("--descriptor-dim", type=int, default=128)
    t.add_argument("--input-side", type=int, default=32)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--batch-n", type=int, help="tracks per batch (default 170, 32 with --toy)")
    t.add_argument("--batch-m", type=int, default=2)
    t.add_argument("--max-iters", type=int, help="cap on iterations per epoch")
    t.add_argument("--margin", type=float, default=1.0)
    t.add_argument("--weight-mode", choices=["unit", "batch-sigmoid", "relative"],
                   default="batch-sigmoid")
    t.add_argument("--positive", choices=["hardest", "random"], default="hardest")
    t.add_argument("--loss", choices=["roi", "triplet"], default="roi")
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--decay-start", type=int, default=30)
    t.add_argument("--decay-every", type=int, default=10)
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--out", default="ifnet-run")

    e = sub.add_parser("eval", help="verification, matching and retrieval mAP")
    _config_opt(e)
    who = e.add_mutually_exclusive_group(required=True)
    who.add_argument("--checkpoint")
    who.add_argument("--compare", nargs=2, metavar=("CKPT_A", "CKPT_B"))
    e.add_argument("--store", required=True, help="held-out store")
    e.add_argument("--split-name", default="heldout")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--max-views", type=int)
    e.add_argument("--descriptor-dim", type=int, help="dimension the split is evaluated at")
    e.add_argument("--input-side", type=int, help="input side the split is evaluated at")
    e.add_argument("--out", required=True)

    x = sub.add_parser("export-descriptors", help="IFDESC1 file in manifest order")
    _config_opt(x)
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--store", required=True)
    x.add_argument("--descriptor-dim", type=int)
    x.add_argument("--out", required=True, help="output file")

    r = sub.add_parser("repro-table1", help="schedule comparison on the synthetic two-domain benchmark")
    _config_opt(r)
    r.add_argument("--seeds", default="0,1,2")
    r.add_argument("--schedules", default="separation,mixed,geo->ill,ill->geo")
    r.add_argument("--epochs", type=int, default=10)
    r.add_argument("--geo-tracks", type=int, default=640)
    r.add_argument("--ill-tracks", type=int, default=160)
    r.add_argument("--views", type=int, default=4)
    r.add_argument("--eval-tracks", type=int, default=100)
    r.add_argument("--batch-n", type=int, default=32)
    r.add_argument("--batch-m", type=int, default=2)
    r.add_argument("--descriptor-dim", type=int, default=128)
    r.add_argument("--out", required=True)
    return p


def _config_opt(p):
    p.add_argument("--config", help="INI file supplying defaults for any option")


def _subparser(parser, command):
    return parser._subparsers._group_actions[0].choices[command]


def read_config(path, command):
    """Flat dict of option -> string from an INI file."""
    cp = configparser.ConfigParser(interpolation=None, strict=False)
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise CliError(EXIT_USAGE, f"cannot read config {path}: {exc}") from exc
    try:
        cp.read_string("[common]\n" + text)
    except configparser.Error as exc:
        raise CliError(EXIT_USAGE, f"{path}: {exc}") from exc
    out = {}
    for section in ("common", command):
        if cp.has_section(section):
            out.update(cp.items(section, raw=True))
    return out


def apply_config(sub, values, path):
    """Turn config strings into parser defaults so that explicit flags still win."""
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        dest = key.strip().replace("-", "_")
        if dest in ("config", "help") or dest not in actions:
            raise CliError(EXIT_USAGE, f"{path}: unknown option {key!r}")
        action = actions[dest]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[dest] = raw.strip().lower() in ("1", "true", "yes", "on")
        elif action.nargs not in (None, "?"):
            defaults[dest] = raw.split()
        else:
            try:
                val = action.type(raw) if action.type else raw
            except ValueError as exc:
                raise CliError(EXIT_USAGE, f"{path}: bad value for {key}: {raw!r}") from exc
            if action.choices and val not in action.choices:
                raise CliError(EXIT_USAGE, f"{path}: {key} must be one of {list(action.choices)}")
            defaults[dest] = val
        # a value from the config satisfies a required option or group
        action.required = False
    for group in sub._mutually_exclusive_groups:
        if any(a.dest in defaults for a in group._group_actions):
            group.required = False
    sub.set_defaults(**defaults)


def parse_args(argv):
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if not a.startswith("-")), None)
    sub = _subparser(parser, command) if command in COMMANDS else None
    if known.config and sub is not None:
        apply_config(sub, read_config(known.config, command), known.config)
    return parser.parse_args(argv)


def write_resolved(directory, args):
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, CONFIG_NAME)
    with open(path, "w") as fh:
        fh.write(f"[{args.command}]\n")
        for key, val in sorted(vars(args).items()):
            if key in ("command", "config", "verbose") or val is None:
                continue
            if isinstance(val, (list, tuple)):
                val = " ".join(str(v) for v in val)
            fh.write(f"{key.replace('_', '-')} = {val}\n")
    return path


# --- commands --------------------------------------------------------------------

def _load_store(path):
    try:
        return load_store(path)
    except (CorruptManifest, MissingPatchFile) as exc:
        raise CliError(EXIT_USAGE, f"store {path}: {exc}") from exc


def _read_frames(scene_dir):
    names = sorted(n for n in os.listdir(scene_dir) if n.lower().endswith(IMAGE_EXT))
    frames = []
    for n in names:
        path = os.path.join(scene_dir, n)
        try:
            with Image.open(path) as im:
                frames.append(np.asarray(im.convert("L"), dtype=np.float64) / 255.0)
        except OSError as exc:
            raise CliError(EXIT_USAGE, f"unreadable frame {path}: {exc}") from exc
    return frames


def cmd_build_dataset(args):
    if args.synth:
        try:
            store = synth_store(args.seed, args.tracks, args.views, args.mode, first_id=args.first_id)
        except IFNetError as exc:
            raise CliError(EXIT_USAGE, f"--tracks/--views: {exc}") from exc
    else:
        if not os.path.isdir(args.frames):
            raise CliError(EXIT_USAGE, f"--frames: {args.frames} is not a directory")
        scenes, keypoints = [], None
        for name in sorted(os.listdir(args.frames)):
            scene_dir = os.path.join(args.frames, name)
            if os.path.isdir(scene_dir):
                scenes.append((name, _read_frames(scene_dir)))
        if not scenes:
            raise CliError(EXIT_USAGE, f"--frames: no scene directories under {args.frames}")
        if args.keypoints:
            keypoints = {}
            for name, _ in scenes:
                path = os.path.join(args.keypoints, f"{name}.txt")
                if not os.path.exists(path):
                    raise CliError(EXIT_USAGE, f"--keypoints: missing {path}")
                try:
                    keypoints[name] = read_keypoints(path)
                except IFNetError as exc:
                    raise CliError(EXIT_USAGE, str(exc)) from exc
        detector = DetectorConfig(sigma=args.sigma, nms_radius=args.nms_radius,
                                  rel_threshold=args.rel_threshold, top_k=args.top_k)
        try:
            store = build_store(scenes, detector, args.tolerance, args.frames_per_scene, keypoints)
        except IFNetError as exc:
            raise CliError(EXIT_USAGE, f"--frames {args.frames}: {exc}") from exc
    save_store(store, args.out)
    write_resolved(args.out, args)
    scenes = len({t.scene_id for t in store.tracks})
    print(f"wrote {args.out}: {len(store.tracks)} tracks, {store.n_patches} patches, {scenes} scene(s)")
    return 0


def _pool(path, side, name):
    if not path:
        raise CliError(EXIT_USAGE, f"--{name} is required for this schedule")
    return TrackPool.from_store(_load_store(path), input_side=side, name=f"{name} {path}")


def cmd_train(args):
    side = args.input_side
    if args.schedule == "basic":
        stores, kind = (_pool(args.store, side, "store"),), "basic"
    elif args.schedule == "mixed":
        stores, kind = (_pool(args.geo, side, "geo").merged(_pool(args.ill, side, "ill")),), "basic"
    elif args.schedule == "separation":
        stores, kind = (_pool(args.geo, side, "geo"), _pool(args.ill, side, "ill")), "separation"
    else:
        stores, kind = (_pool(args.first, side, "first"), _pool(args.second, side, "second")), "finetune"
    batch_n = args.batch_n or (32 if args.toy else 170)
    make = NetConfig.toy if args.toy else NetConfig
    net_cfg = make(input_side=side, descriptor_dim=args.descriptor_dim, rng_seed=args.seed)
    try:
        loss_cfg = LossConfig(args.margin, args.weight_mode)
        net = init(net_cfg)
    except InvalidConfig as exc:
        raise CliError(EXIT_USAGE, str(exc)) from exc
    opt_cfg = OptimizerConfig(lr0=args.lr, decay_start=args.decay_start, decay_every=args.decay_every)
    schedule = TrainingSchedule(kind, stores, epochs=args.epochs, batch_n=batch_n,
                                batch_m=args.batch_m, split_epoch=args.split_epoch,
                                max_iters_per_epoch=args.max_iters)
    os.makedirs(args.out, exist_ok=True)
    args.batch_n = batch_n
    write_resolved(args.out, args)
    opts = TrainOptions(args.positive, args.loss, args.checkpoint_every, args.out)
    try:
        report = train(net, schedule, loss_cfg, opt_cfg, rng_seed=args.seed, opts=opts)
    except InsufficientTracks as exc:
        raise CliError(EXIT_TRAIN, f"InsufficientTracks before epoch 0: {exc}") from exc
    except InvalidConfig as exc:
        raise CliError(EXIT_USAGE, str(exc)) from exc
    except (IFNetError, FloatingPointError) as exc:
        raise CliError(EXIT_TRAIN, f"training failed: {exc}") from exc
    report.write_csv(os.path.join(args.out, "report.csv"))
    last = report.rows[-1]
    print(f"trained {args.schedule} for {len(report.rows)} epochs, final loss {last.loss:.4f}; "
          f"outputs in {args.out}")
    return 0


def _checkpoint(path, args, store_side=64):
    try:
        net = load_checkpoint(path)
    except OSError as exc:
        raise CliError(EXIT_USAGE, f"cannot read checkpoint {path}: {exc}") from exc
    except (CheckpointMismatch, ValueError) as exc:
        raise CliError(EXIT_MISMATCH, f"checkpoint {path}: {exc}") from exc
    cfg = net.config
    want_dim = getattr(args, "descriptor_dim", None)
    if want_dim is not None and want_dim != cfg.descriptor_dim:
        raise CliError(EXIT_MISMATCH, f"checkpoint {path} has descriptor_dim={cfg.descriptor_dim}, "
                                      f"split expects descriptor_dim={want_dim}")
    want_side = getattr(args, "input_side", None)
    if want_side is not None and want_side != cfg.input_side:
        raise CliError(EXIT_MISMATCH, f"checkpoint {path} has input_side={cfg.input_side}, "
                                      f"split expects input_side={want_side}")
    if store_side % cfg.input_side:
        raise CliError(EXIT_MISMATCH, f"checkpoint {path} has input_side={cfg.input_side}, "
                                      f"store patches are {store_side}px")
    return net


def _describe(net, patches):
    try:
        return describe_array(net, patches)
    except WrongPatchSize as exc:
        raise CliError(EXIT_MISMATCH, str(exc)) from exc


def cmd_eval(args):
    store = _load_store(args.store)
    split = make_eval_split(store, args.split_name, args.seed, args.max_views)
    if not split.matching:
        raise CliError(EXIT_USAGE, f"store {args.store} needs tracks with at least 2 views")
    os.makedirs(args.out, exist_ok=True)
    write_resolved(args.out, args)
    side = split.patches.shape[-1]
    paths = args.compare or [args.checkpoint]
    results = []
    for path in paths:
        net = _checkpoint(path, args, side)
        desc = _describe(net, split.patches)
        results.append(evaluate_descriptors(split, desc))
        ranks, prec = matching_precision_curve(split, desc)
        tag = "" if len(paths) == 1 else f"_{'ab'[len(results) - 1]}"
        np.savetxt(os.path.join(args.out, f"matching_precision_vs_rank{tag}.txt"),
                   np.column_stack([ranks, prec]), fmt=["%d", "%.6f"], header="rank precision")
    n_pairs = len(split.verification[2])
    counts = {"verification": n_pairs, "matching": len(split.matching),
              "retrieval": len(split.retrieval[0])}
    if args.compare:
        path = os.path.join(args.out, "compare.csv")
        with open(path, "w") as fh:
            fh.write("task,split,mAP_a,mAP_b,delta\n")
            for task in ("verification", "matching", "retrieval"):
                a, b = results[0][task], results[1][task]
                fh.write(f"{task},{split.name},{a:.6f},{b:.6f},{b - a:.6f}\n")
        for task in ("verification", "matching", "retrieval"):
            print(f"{task:>12}: {results[0][task]:.4f} -> {results[1][task]:.4f}")
    else:
        path = os.path.join(args.out, "eval.csv")
        write_report(path, [{"task": task, "split": split.name, "value": results[0][task],
                             "count": counts[task], "seed": args.seed}
                            for task in ("verification", "matching", "retrieval")])
        for task in ("verification", "matching", "retrieval"):
            print(f"{task:>12}: mAP {results[0][task]:.4f}")
    print(f"report: {path}")
    return 0


def cmd_export(args):
    store = _load_store(args.store)
    patches = [p for t in store.tracks for p in t.patches]
    patches = np.stack(patches) if patches else np.zeros((0, 64, 64), np.uint8)
    net = _checkpoint(args.checkpoint, args, patches.shape[-1])
    desc = _describe(net, patches)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    write_descriptors(args.out, desc)
    write_resolved(out_dir, args)
    print(f"wrote {len(desc)} descriptors of dim {desc.shape[1]} to {args.out}")
    return 0


def cmd_repro_table1(args):
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s]
    except ValueError as exc:
        raise CliError(EXIT_USAGE, f"--seeds: {exc}") from exc
    kinds = [k for k in args.schedules.split(",") if k]
    allowed = ("separation", "mixed", "geo->ill", "ill->geo")
    bad = [k for k in kinds if k not in allowed]
    if bad:
        raise CliError(EXIT_USAGE, f"--schedules: unknown {bad}; choose from {list(allowed)}")
    cfg = benchmark.TwoDomainConfig(args.geo_tracks, args.ill_tracks, args.views, args.eval_tracks,
                                    args.epochs, args.batch_n, args.batch_m,
                                    descriptor_dim=args.descriptor_dim)
    os.makedirs(args.out, exist_ok=True)
    write_resolved(args.out, args)
    try:
        rows = benchmark.table1(seeds, kinds, cfg,
                                progress=lambda r: print(f"seed {r[0]} {r[1]:>10}: {r[2]:.4f}"))
    except InsufficientTracks as exc:
        raise CliError(EXIT_TRAIN, str(exc)) from exc
    with open(os.path.join(args.out, "table1.csv"), "w") as fh:
        fh.write("seed,schedule,matching_mAP,seconds\n")
        for seed, kind, value, secs in rows:
            fh.write(f"{seed},{kind},{value:.6f},{secs:.1f}\n")
    print("schedule     mean matching mAP")
    for kind in ["random"] + kinds:
        vals = [v for _, k, v, _ in rows if k == kind]
        print(f"{kind:<12} {np.mean(vals):.4f}")
    return 0


COMMANDS = {
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "eval": cmd_eval,
    "export-descriptors": cmd_export,
    "repro-table1": cmd_repro_table1,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except CliError as exc:
        print(f"ifnet: error: {exc}", file=sys.stderr)
        return exc.code
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"ifnet: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
