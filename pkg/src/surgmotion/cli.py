"""Command-line entry point: synth, filter, train, track, eval, report.

Flags override config-file values; every run echoes its resolved config and
saves it next to the outputs.  All randomness funnels through --seed.
Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import data, metrics, supervision, synth
from .data import DataError, QuerySpec
from .model import load_checkpoint
from .supervision import StoreConfig, SupervisionError, appearance_filter, cycle_filter
from .train import TrainConfig, TrainError, export_trajectories, train

log = logging.getLogger("surgmotion")


def _setup_logging():
    level = os.environ.get("SURGMOTION_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_toml(path: Path) -> dict:
    try:
        import tomllib  # Python >= 3.11
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as f:
        return tomllib.load(f)


def _resolve_train_config(args) -> TrainConfig:
    values = {}
    if args.config:
        values.update(_load_toml(Path(args.config)))
    valid = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(values) - valid
    if unknown:
        raise DataError(f"unknown config keys: {sorted(unknown)}")
    for name in valid:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    return TrainConfig(**values)


def _echo_config(cfg, out_dir: Path | None):
    d = dataclasses.asdict(cfg)
    print("resolved config:")
    for k, v in sorted(d.items()):
        print(f"  {k} = {v!r}")
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        lines = []
        for k, v in sorted(d.items()):
            if isinstance(v, bool):
                lines.append(f"{k} = {str(v).lower()}")
            elif isinstance(v, str):
                lines.append(f'{k} = "{v}"')
            else:
                lines.append(f"{k} = {v}")
        (out_dir / "resolved_config.toml").write_text("\n".join(lines) + "\n")


def _load_supervision(data_dir: Path, num_frames: int, cfg: StoreConfig,
                      seq, apply_filters: bool):
    flows = []
    flow_dir = data_dir / "flow"
    if flow_dir.is_dir():
        for off in cfg.flow_offsets:
            for i in range(num_frames):
                for j in (i + off, i - off):
                    if not (0 <= j < num_frames):
                        continue
                    try:
                        f = supervision.load_flow_pair(flow_dir, i, j)
                    except FileNotFoundError:
                        continue
                    if apply_filters:
                        try:
                            b = supervision.load_flow_pair(flow_dir, j, i)
                            f = cycle_filter(f, b, cfg.cycle_tau)
                        except FileNotFoundError:
                            pass
                        f = appearance_filter(seq, f, cfg.rgb_tau)
                    flows.append(f)
    matches = []
    match_dir = data_dir / "matches"
    if match_dir.is_dir():
        for path in sorted(match_dir.glob("*_*.txt")):
            i, j = (int(s) for s in path.stem.split("_"))
            matches.append(supervision.load_matches(match_dir, i, j))
    return flows, matches


def cmd_synth(args) -> int:
    spec = synth.SceneSpec(seed=args.seed)
    if args.spec != "default":
        with open(args.spec) as f:
            overrides = json.load(f)
        occluders = [synth.Occluder(**o) for o in overrides.pop("occluders", [])]
        spec = synth.SceneSpec(seed=args.seed, occluders=occluders, **overrides)
    _echo_config(spec, Path(args.out))
    scene = synth.generate(spec)
    if args.outlier_fraction > 0 or args.noise_sigma > 0:
        cspec = synth.CorruptionSpec(
            noise_sigma=args.noise_sigma, outlier_fraction=args.outlier_fraction,
            outlier_magnitude=args.outlier_magnitude, seed=args.seed,
        )
        scene.flows, scene.matches = synth.corrupt_supervision(
            scene.flows, scene.matches, cspec)
    synth.write_scene(scene, args.out)
    print(f"wrote synthetic scene to {args.out}")
    return 0


def cmd_filter(args) -> int:
    seq = data.load_sequence(args.data)
    cfg = StoreConfig(cycle_tau=args.cycle_tau, rgb_tau=args.rgb_tau)
    flows, _ = _load_supervision(Path(args.data), seq.num_frames, cfg, seq,
                                 apply_filters=True)
    out = Path(args.out)
    for f in flows:
        supervision.save_flow_pair(out / "flow", f)
    kept = sum(int(f.valid.sum()) for f in flows)
    total = sum(f.valid.size for f in flows)
    print(f"filtered {len(flows)} flow fields: kept {kept}/{total} pixels")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_train_config(args)
    out_dir = Path(args.out)
    _echo_config(cfg, out_dir)
    torch.set_num_threads(args.jobs if args.jobs > 1 else 1)
    seq = data.load_sequence(args.data)
    store_cfg = StoreConfig()
    flows, matches = _load_supervision(Path(args.data), seq.num_frames,
                                       store_cfg, seq, apply_filters=not args.no_filter)
    store = supervision.build_store(seq, flows, matches, store_cfg)
    result = train(seq, store, cfg, out_dir=out_dir)
    print(f"trained {cfg.iterations} iterations; final loss {result.history[-1].total:.5f}")
    print(f"checkpoint: {out_dir / 'checkpoint_final.smck'}")
    return 0


def cmd_track(args) -> int:
    seq = data.load_sequence(args.data)
    model = load_checkpoint(args.checkpoint)
    if args.queries:
        gt = data.load_trajectories(args.queries)
    else:
        gt = data.load_trajectories(Path(args.data) / "gt.json")
    queries = QuerySpec.from_trajectories(gt)
    traj = export_trajectories(model, queries, seq,
                               visibility_threshold=args.visibility_threshold)
    data.save_trajectories(traj, args.out)
    print(f"wrote {len(traj.points)} trajectories to {args.out}")
    return 0


def cmd_eval(args) -> int:
    gt = data.load_trajectories(args.gt)
    pred = data.load_trajectories(args.pred)
    gt256 = data.resize_for_eval(gt, metrics.EVAL_RESOLUTION)
    pred256 = data.resize_for_eval(pred, metrics.EVAL_RESOLUTION)
    report = metrics.build_report(gt256, pred256)
    print(metrics.format_table([report], method=args.method))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        metrics.write_report_csv([report], out / "metrics.csv", method=args.method)
        metrics.write_report_json([report], out / "metrics.json")
    return 0


def cmd_report(args) -> int:
    reports = []
    for path in args.reports:
        for rec in json.loads(Path(path).read_text()):
            def cat(d):
                return metrics.CategoryMetrics(
                    aj=d["aj"], delta_avg=d["delta_avg"], oa=d["oa"],
                    per_threshold={float(k): v for k, v in d["per_threshold"].items()},
                )
            reports.append(metrics.MetricsReport(
                video=rec["video"], overall=cat(rec["overall"]),
                tool=cat(rec["tool"]), tissue=cat(rec["tissue"]),
            ))
    print(metrics.format_table(reports, method=args.method))
    split = metrics.challenging_split(reports)
    for video, challenging in split.items():
        print(f"{video}: {'challenging' if challenging else 'standard'}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        metrics.write_report_csv(reports, out / "report.csv", method=args.method)
        (out / "challenging.json").write_text(json.dumps(split, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="surgmotion",
                                     description="Test-time-optimization point tracker and TAP metrics harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene with analytic ground truth")
    p.add_argument("--spec", default="default", help="'default' or a JSON SceneSpec file")
    p.add_argument("--out", required=True, help="output data directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-sigma", type=float, default=0.0, dest="noise_sigma")
    p.add_argument("--outlier-fraction", type=float, default=0.0, dest="outlier_fraction")
    p.add_argument("--outlier-magnitude", type=float, default=10.0, dest="outlier_magnitude")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("filter", help="cycle/appearance filter the flow files of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cycle-tau", type=float, default=3.0, dest="cycle_tau")
    p.add_argument("--rgb-tau", type=float, default=0.15, dest="rgb_tau")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("train", help="fit the motion model to one video")
    p.add_argument("--data", required=True, help="dataset directory (frames/, flow/, ...)")
    p.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    p.add_argument("--config", help="TOML config file (flags override)")
    p.add_argument("--no-filter", action="store_true",
                   help="skip cycle/appearance filtering of the flow inputs")
    p.add_argument("--jobs", type=int, default=1, help="torch threads")
    p.add_argument("--iters", type=int, dest="iterations")
    p.add_argument("--seed", type=int)
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--mask-arap-start", type=int, dest="mask_arap_start")
    p.add_argument("--precision", choices=["float32", "float64"])
    for name in ("flow", "rgb", "mask", "arap", "long"):
        p.add_argument(f"--no-{name}-loss", action="store_false",
                       dest=f"enable_{name}", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="export trajectories from a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--queries", help="trajectory JSON providing query points (default: <data>/gt.json)")
    p.add_argument("--out", required=True)
    p.add_argument("--visibility-threshold", type=float, default=0.5,
                   dest="visibility_threshold")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score a prediction against ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--method", default="surgmotion")
    p.add_argument("--out", help="directory for metrics.csv / metrics.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="combine metrics JSONs into a benchmark table")
    p.add_argument("reports", nargs="+", help="metrics.json files")
    p.add_argument("--method", default="baseline")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def run(argv: list[str]) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        return args.func(args)
    except (DataError, SupervisionError, metrics.MetricsError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (TrainError, OSError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
