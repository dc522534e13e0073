"""Command-line surface: dataset generation, training, completion, eval.

Exit codes are a stable contract: 0 on success, 2 for usage errors (bad
flags, mismatched model geometry, a camera that coincides with a scan
point), 3 for runtime failures (missing datasets, unreadable files).

Every flag can also be supplied through ``--config file.json`` using the
flag name with dashes replaced by underscores; explicit command-line flags
win over the config file, which wins over built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .completion import (
    DEFAULT_FPS_COUNT,
    DEFAULT_POINTS_PER_RAY,
    DEFAULT_SPLIT_FACTORS,
    UNCONSTRAINED_BOUND,
)
from .data import (
    PairSizes,
    generate_dataset,
    load_manifest,
    load_pair,
    read_cloud,
    write_cloud,
)
from .errors import DegenerateRay, RayCompleteError
from .geometry import DEFAULT_CONSTRAINT_ALPHA, DEFAULT_CONSTRAINT_BASE
from .metrics import (
    DEFAULT_FSCORE_TAU,
    DEFAULT_SPLIT_RADIUS,
    aggregate_reports,
    evaluate_pair,
    report_to_json,
)
from .net import load_checkpoint
from .trainer import (
    STAGES,
    TrainConfig,
    TrainState,
    complete_pair,
    init_state,
    run_stage,
    train_all,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3

_STAGE_BY_FLAG = {"1": STAGES[0], "2": STAGES[1], "3": STAGES[2]}


class UsageError(Exception):
    pass


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master RNG seed")
    common.add_argument("--threads", type=int, default=1,
                        help="worker threads for batch subcommands")
    common.add_argument("--config", default=None,
                        help="JSON file supplying defaults for any flag")
    return common


def _model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--points-per-ray", type=int, default=DEFAULT_POINTS_PER_RAY)
    parser.add_argument("--fps-count", type=int, default=DEFAULT_FPS_COUNT)
    parser.add_argument("--split-factors", type=int, nargs="+",
                        default=list(DEFAULT_SPLIT_FACTORS))
    parser.add_argument("--alpha", type=float, default=DEFAULT_CONSTRAINT_ALPHA)
    parser.add_argument("--base", type=float, default=DEFAULT_CONSTRAINT_BASE)
    parser.add_argument("--ablate", action="append", default=[],
                        choices=["no-adjustment", "no-constraint"],
                        help="disable a model component (repeatable)")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="raycomplete",
        description="Single-view point cloud completion along camera rays.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands: dict[str, argparse.ArgumentParser] = {}

    g = sub.add_parser("gen-data", parents=[common],
                       help="generate a synthetic scan/GT dataset")
    g.add_argument("--out", default=None, help="dataset root directory")
    g.add_argument("--count", type=int, default=None, help="number of sample pairs")
    g.add_argument("--partial", type=int, default=256, help="scan point count")
    g.add_argument("--tiers", type=int, nargs=3, default=[1024, 256, 2048],
                   metavar=("GT1", "GT2", "GT3"))
    g.set_defaults(func=cmd_gen_data)
    commands["gen-data"] = g

    t = sub.add_parser("train", parents=[common], help="run the training schedule")
    t.add_argument("--data", default=None, help="dataset root with manifest.json")
    t.add_argument("--stage", choices=["1", "2", "3", "all"], default="all")
    t.add_argument("--steps", type=int, default=2000, help="steps per stage")
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--ckpt-dir", default=None, help="default: <data>/checkpoints")
    t.add_argument("--log", default=None, help="default: <ckpt-dir>/train.log")
    t.add_argument("--init", default=None,
                   help="checkpoint to start from (required for stages 2 and 3)")
    _model_flags(t)
    t.set_defaults(func=cmd_train)
    commands["train"] = t

    c = sub.add_parser("complete", parents=[common],
                       help="complete scans with a trained checkpoint")
    c.add_argument("--ckpt", default=None, help="trained checkpoint")
    c.add_argument("--input", default=None, help="single scan file (.ply/.xyz)")
    c.add_argument("--cam", default=None,
                   help="camera as x,y,z (use --cam=x,y,z when x is negative)")
    c.add_argument("--out", default=None, help="output cloud for --input")
    c.add_argument("--data", default=None, help="dataset root for batch mode")
    c.add_argument("--out-dir", default=None, help="output directory for batch mode")
    c.add_argument("--emit-trace", action="store_true",
                   help="also write the intermediate clouds")
    c.add_argument("--cam-noise", type=float, default=0.0,
                   help="stddev of seeded camera perturbation")
    _model_flags(c)
    c.set_defaults(func=cmd_complete)
    commands["complete"] = c

    e = sub.add_parser("eval", parents=[common], help="score completed clouds")
    e.add_argument("--data", default=None, help="dataset root with manifest.json")
    e.add_argument("--results", default=None, help="directory of *_final.ply clouds")
    e.add_argument("--out-dir", default=None, help="report directory (default: --results)")
    e.add_argument("--split", choices=["train", "test", "all"], default="test")
    e.add_argument("--radius", type=float, default=DEFAULT_SPLIT_RADIUS)
    e.add_argument("--tau", type=float, default=DEFAULT_FSCORE_TAU)
    e.set_defaults(func=cmd_eval)
    commands["eval"] = e

    return parser, commands


def _apply_config(args, commands, argv):
    path = Path(args.config)
    try:
        with open(path, "r") as fh:
            overrides = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(overrides, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    sub = commands[args.command]
    valid = {a.dest for a in sub._actions}
    defaults = {}
    choices = {a.dest: a.choices for a in sub._actions if a.choices}
    for key, value in overrides.items():
        dest = key.replace("-", "_")
        if dest not in valid:
            raise UsageError(f"config key {key!r} is not a flag of {args.command}")
        if dest in choices:
            items = value if isinstance(value, list) else [value]
            for item in items:
                if item not in choices[dest]:
                    raise UsageError(
                        f"config key {key!r}: {item!r} is not one of {sorted(choices[dest])}"
                    )
        defaults[dest] = value
    sub.set_defaults(**defaults)


def parse_args(argv):
    parser, commands = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        _apply_config(args, commands, argv)
        args = parser.parse_args(argv)
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    if getattr(args, "ablate", None):
        unknown = set(args.ablate) - {"no-adjustment", "no-constraint"}
        if unknown:
            raise UsageError(f"unknown ablation(s): {sorted(unknown)}")
    return args


def _require(args, names):
    for name in names:
        if getattr(args, name.replace("-", "_")) is None:
            raise UsageError(f"--{name} is required")


def _map_ordered(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    _require(args, ["out", "count"])
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    sizes = PairSizes(partial=args.partial, tiers=tuple(args.tiers))
    manifest = generate_dataset(args.out, args.count, sizes, seed=args.seed)
    splits = [s["split"] for s in manifest["samples"]]
    print(
        f"wrote {len(splits)} samples to {args.out} "
        f"(train {splits.count('train')} / test {splits.count('test')})"
    )
    return EXIT_OK


def _train_config(args, sizes: PairSizes, stage: str) -> TrainConfig:
    # complete/eval reuse this for the model geometry; they have no schedule
    # flags, so those fall back to inert values.
    return TrainConfig(
        stage=stage,
        lr=getattr(args, "lr", 1e-3),
        steps=getattr(args, "steps", 0),
        batch=getattr(args, "batch", 1),
        seed=args.seed,
        sizes=sizes,
        points_per_ray=args.points_per_ray,
        fps_count=args.fps_count,
        split_factors=tuple(args.split_factors),
        alpha=args.alpha,
        base=args.base,
        no_adjustment="no-adjustment" in args.ablate,
        fixed_bound=UNCONSTRAINED_BOUND if "no-constraint" in args.ablate else None,
    )


def _load_split(root: Path, manifest: dict, split: str):
    entries = [
        s for s in manifest["samples"] if split == "all" or s["split"] == split
    ]
    return entries, [load_pair(root, e) for e in entries]


def cmd_train(args) -> int:
    _require(args, ["data"])
    root = Path(args.data)
    manifest = load_manifest(root)
    sizes = PairSizes(
        partial=manifest["sizes"]["partial"], tiers=tuple(manifest["sizes"]["tiers"])
    )
    _, dataset = _load_split(root, manifest, "train")
    if not dataset:
        raise RayCompleteError(f"{root} has no training samples")
    ckpt_dir = Path(args.ckpt_dir) if args.ckpt_dir else root / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else ckpt_dir / "train.log"

    if args.stage == "all":
        base = _train_config(args, sizes, STAGES[0])
        state, logs = train_all(base, dataset, log_path=log_path, ckpt_dir=ckpt_dir)
        for stage in STAGES:
            tail = [e["loss"] for e in logs if e["stage"] == stage][-50:]
            if tail:
                print(f"{stage}: {np.mean(tail):.6f} mean loss over last {len(tail)} steps")
        print(f"checkpoints in {ckpt_dir}")
        return EXIT_OK

    stage = _STAGE_BY_FLAG[args.stage]
    config = _train_config(args, sizes, stage)
    if args.init is not None:
        params, adam = load_checkpoint(args.init)
        state = TrainState(params=params, adam=adam)
    elif stage == STAGES[0]:
        state = init_state(config)
    else:
        raise UsageError(f"--init is required for stage {args.stage}")
    state, logs = run_stage(config, dataset, state, log_path=log_path, ckpt_dir=ckpt_dir)
    tail = [e["loss"] for e in logs][-50:]
    if tail:
        print(f"{stage}: {np.mean(tail):.6f} mean loss over last {len(tail)} steps")
    print(f"checkpoint {ckpt_dir / (stage + '_' + str(config.steps) + '.ckpt')}")
    return EXIT_OK


def _parse_cam(text: str) -> np.ndarray:
    parts = text.split(",")
    if len(parts) != 3:
        raise UsageError(f"--cam expects x,y,z, got {text!r}")
    try:
        return np.array([float(p) for p in parts])
    except ValueError as exc:
        raise UsageError(f"--cam expects numbers, got {text!r}") from exc


def _trace_paths(out_path: Path) -> dict[str, Path]:
    stem = out_path.stem
    if stem.endswith("_final"):
        stem = stem[: -len("_final")]
    return {
        kind: out_path.with_name(f"{stem}_{kind}{out_path.suffix}")
        for kind in ("ofirst", "oinit", "mid")
    }


def _write_trace(trace, out_path: Path, emit_trace: bool) -> None:
    write_cloud(trace.p_final, out_path)
    if emit_trace:
        paths = _trace_paths(out_path)
        write_cloud(trace.p_first, paths["ofirst"])
        write_cloud(trace.p_initial, paths["oinit"])
        write_cloud(trace.p_mid, paths["mid"])


def cmd_complete(args) -> int:
    _require(args, ["ckpt"])
    single = args.input is not None
    batch = args.data is not None
    if single == batch:
        raise UsageError("use either --input/--cam/--out or --data/--out-dir")
    params, _ = load_checkpoint(args.ckpt)
    config = _train_config(args, PairSizes(), "joint")

    def perturbed(cam: np.ndarray, salt: int) -> np.ndarray:
        if args.cam_noise <= 0.0:
            return cam
        rng = np.random.default_rng(np.random.SeedSequence((args.seed, salt, 97)))
        return cam + args.cam_noise * rng.normal(size=3)

    if single:
        _require(args, ["cam", "out"])
        scan = read_cloud(args.input)
        cam = perturbed(_parse_cam(args.cam), 0)
        trace = _completion_trace(config, params, scan, cam)
        out_path = Path(args.out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        _write_trace(trace, out_path, args.emit_trace)
        print(f"wrote {trace.p_final.count} points to {out_path}")
        return EXIT_OK

    _require(args, ["out-dir"])
    root = Path(args.data)
    manifest = load_manifest(root)
    entries, pairs = _load_split(root, manifest, "test")
    if not entries:
        raise RayCompleteError(f"{root} has no test samples")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def run_one(item):
        idx, pair = item
        cam = perturbed(pair.cam, idx)
        return _completion_trace(config, params, pair.partial, cam)

    traces = _map_ordered(run_one, list(enumerate(pairs)), args.threads)
    for entry, trace in zip(entries, traces):
        _write_trace(trace, out_dir / f"{entry['sample_id']}_final.ply", args.emit_trace)
    print(f"wrote {len(traces)} completions to {out_dir}")
    return EXIT_OK


def _completion_trace(config: TrainConfig, params, scan, cam):
    pair_like = _PairView(partial=scan, cam=cam)
    return complete_pair(config, params, pair_like)


class _PairView:
    """Minimal stand-in with the two fields completion needs."""

    def __init__(self, partial, cam):
        self.partial = partial
        self.cam = cam


def cmd_eval(args) -> int:
    _require(args, ["data", "results"])
    root = Path(args.data)
    results = Path(args.results)
    out_dir = Path(args.out_dir) if args.out_dir else results
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(root)
    entries, pairs = _load_split(root, manifest, args.split)
    if not entries:
        raise RayCompleteError(f"{root} has no {args.split} samples")

    def score(item):
        entry, pair = item
        result_path = results / f"{entry['sample_id']}_final.ply"
        if not result_path.exists():
            raise RayCompleteError(f"missing result cloud {result_path}")
        result = read_cloud(result_path)
        return evaluate_pair(
            result, pair.gt_tiers[2], pair.partial, tau=args.tau, radius=args.radius
        )

    reports = _map_ordered(score, list(zip(entries, pairs)), args.threads)
    for entry, report in zip(entries, reports):
        with open(out_dir / f"{entry['sample_id']}_report.json", "w") as fh:
            json.dump(report_to_json(entry["sample_id"], report), fh, indent=2, sort_keys=True)
            fh.write("\n")
    aggregate = aggregate_reports(
        (entry["category"], report) for entry, report in zip(entries, reports)
    )
    with open(out_dir / "aggregate.json", "w") as fh:
        json.dump(aggregate, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _print_table(aggregate)
    print(f"reports in {out_dir}")
    return EXIT_OK


def _print_table(aggregate: dict) -> None:
    # CD and SCD columns are scaled by 1e4 for readability; F and DCD are not.
    header = f"{'category':<12}{'n':>5}{'CDx1e4':>10}{'F':>8}{'DCD':>8}{'SCD1x1e4':>11}{'SCD2x1e4':>11}"
    print(header)
    rows = list(aggregate["categories"].items()) + [("overall", aggregate["overall"])]
    for name, block in rows:
        print(
            f"{name:<12}{block['count']:>5}"
            f"{block['cd'] * 1e4:>10.3f}{block['fscore']:>8.3f}{block['dcd']:>8.3f}"
            f"{block['scd1'] * 1e4:>11.3f}{block['scd2'] * 1e4:>11.3f}"
        )


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, DegenerateRay, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RayCompleteError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
