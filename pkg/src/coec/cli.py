"""``coec`` command-line entry point.

Results go to files under ``--out`` plus a one-line JSON summary on stdout;
logs go to stderr. Exit status is 0 unless an error was raised; failure
verdicts are data, not errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

from . import commands, io
from .errors import CoecError, LoadError
from .optimizer import PARAM_NAMES

log = logging.getLogger("coec")


def _csv_value(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _csv_value(v) for k, v in row.items()})


def write_jsonl(path: Path, objects: list[dict]) -> None:
    with path.open("w") as fh:
        for obj in objects:
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def write_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _emit(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


# --- argument parsing --------------------------------------------------------


def _data_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("data and pipeline overrides")
    g.add_argument("--manifest", help="frame manifest CSV")
    g.add_argument("--intrinsics", help="intrinsics JSON")
    g.add_argument("--initial", help="initial calibration JSON")
    g.add_argument("--reference", help="true calibration JSON, or per-frame references CSV")
    g.add_argument("--thresholds", help="classifier thresholds JSON")
    g.add_argument("--window", type=int, dest="window_length", help="frames per window")
    g.add_argument("--stride", type=int, dest="window_stride", help="frames between window starts")
    g.add_argument("--bins", type=int, help="histogram bins per axis")
    g.add_argument("--bin-policy", choices=("rank", "minmax"))
    g.add_argument("--pooled", action="store_true", default=None, help="one histogram over all frames")
    g.add_argument("--step-deg", type=float, help="finite-difference step for diagnostics")
    g.add_argument("--min-range", type=float, dest="min_range_m", help="drop returns closer than this (m)")
    g.add_argument("--inverse-depth", action="store_true", default=None, help="depth files hold disparity")
    g.add_argument("--engine", choices=("bobyqa", "powell"))
    g.add_argument("--rotation-bound-deg", type=float)
    g.add_argument("--free", help=f"comma-separated free parameters from {','.join(PARAM_NAMES)}")
    g.add_argument("--perturb-deg", type=float, help="seeded rotation perturbation of the start point")
    g.add_argument("--workers", type=int, help="worker processes for independent trials")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coec", description="Camera/LiDAR extrinsic calibration by depth MI.")
    parser.add_argument("--config", help="run-config JSON")
    parser.add_argument("--seed", type=int, help="random seed")
    parser.add_argument("--out", default="coec-out", help="output directory (default: %(default)s)")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    data = _data_flags()

    sub.add_parser("calibrate", parents=[data], help="calibrate on the first window")
    p = sub.add_parser("monitor", parents=[data], help="sliding-window continuous calibration")
    p.add_argument("--reseed-mode", choices=io.RESEED_MODES)
    p = sub.add_parser("diagnose", parents=[data], help="diagnostics and verdict at a given calibration")
    p.add_argument("--theta", help="calibration JSON to diagnose (default: initial, else reference)")
    p = sub.add_parser("failure-study", parents=[data], help="repeated calibration from random large errors")
    p.add_argument("--trials", type=int)
    p.add_argument("--radius-deg", type=float)
    p = sub.add_parser("bench", parents=[data], help="objective and calibration timing per frame count")
    p.add_argument("--frame-counts", help="comma-separated, e.g. 5,25,50")
    p.add_argument("--repetitions", type=int)
    p.add_argument("--calibrate-repetitions", type=int)
    p = sub.add_parser("fit-thresholds", parents=[data], help="fit classifier limits from reference windows")
    p.add_argument("--error-deg", type=float)

    p = sub.add_parser("synth", help="render a synthetic sequence into --out")
    p.add_argument("--frames", type=int)
    p.add_argument("--scene-seed", type=int)
    p.add_argument("--complexity", type=int)
    p.add_argument("--road-length", type=float)
    p.add_argument("--start-x", type=float)
    p.add_argument("--spacing", type=float)
    p.add_argument("--depth-distortion", help="inverse, log, sqrt or none")
    p.add_argument("--depth-noise", type=float)
    p.add_argument("--range-sigma", type=float)
    p.add_argument("--depth-format", choices=("pfm", "png"))
    p.add_argument("--disturb-at-frame", type=int)
    p.add_argument("--disturb-deg", type=float)
    return parser


_TOP_KEYS = (
    "manifest", "intrinsics", "initial", "reference", "thresholds", "window_length", "window_stride",
    "step_deg", "min_range_m", "inverse_depth", "perturb_deg", "workers", "reseed_mode", "trials",
    "radius_deg", "repetitions", "calibrate_repetitions", "error_deg",
)
_SYNTH_KEYS = (
    "frames", "scene_seed", "complexity", "road_length", "start_x", "spacing", "depth_noise",
    "range_sigma", "depth_format", "disturb_at_frame", "disturb_deg",
)


def resolve_config(args: argparse.Namespace) -> io.RunConfig:
    """Config file (or defaults) with every given flag layered on top."""
    cfg = io.load_run_config(args.config) if args.config else io.RunConfig()
    ns = vars(args)
    top = {k: ns.get(k) for k in _TOP_KEYS}
    if ns.get("frame_counts"):
        top["frame_counts"] = tuple(int(c) for c in ns["frame_counts"].split(","))
    if args.seed is not None:
        top["seed"] = args.seed
    cfg = cfg.with_overrides(**top)

    mi = {k: ns.get(k) for k in ("bins", "bin_policy", "pooled")}
    cfg = replace(cfg, mi=replace(cfg.mi, **{k: v for k, v in mi.items() if v is not None}))

    opt = {"engine": ns.get("engine"), "seed": cfg.seed}
    if ns.get("rotation_bound_deg") is not None:
        opt["rotation_bound"] = math.radians(ns["rotation_bound_deg"])
    if ns.get("free"):
        names = [n.strip() for n in ns["free"].split(",")]
        unknown = set(names) - set(PARAM_NAMES)
        if unknown:
            raise io.InvalidParameterError(f"unknown parameter names {sorted(unknown)}")
        opt["free"] = tuple(n in names for n in PARAM_NAMES)
    cfg = replace(cfg, optimizer=replace(cfg.optimizer, **{k: v for k, v in opt.items() if v is not None}))

    synth = {k: ns.get(k) for k in _SYNTH_KEYS}
    if ns.get("depth_distortion") is not None:
        synth["depth_distortion"] = None if ns["depth_distortion"] == "none" else ns["depth_distortion"]
    cfg = replace(cfg, synth=replace(cfg.synth, **{k: v for k, v in synth.items() if v is not None}))
    return cfg


# --- subcommand drivers --------------------------------------------------------


def _run_calibrate(cfg, out: Path) -> dict:
    rec = commands.cmd_calibrate(cfg)
    write_csv(out / "results.csv", [rec.to_row()])
    write_jsonl(out / "results.jsonl", [rec.to_json()])
    io.save_calibration(out / "calibration.json", rec.theta_star)
    return {"verdict": rec.verdict, "rotation_error_deg": rec.rotation_error_deg, "evaluations": rec.evaluations}


def _run_monitor(cfg, out: Path) -> dict:
    records = commands.cmd_monitor(cfg)
    write_csv(out / "results.csv", [r.to_row() for r in records])
    write_jsonl(out / "results.jsonl", [r.to_json() for r in records])
    accepted = [r for r in records if r.verdict != "failure"]
    if accepted:
        io.save_calibration(out / "calibration.json", accepted[-1].theta_star)
    return {"windows": len(records), "failures": sum(r.verdict == "failure" for r in records)}


def _run_diagnose(cfg, out: Path, theta_path) -> dict:
    theta = None if theta_path is None else io.load_calibration(theta_path)
    report, verdict = commands.cmd_diagnose(cfg, theta)
    io.save_report(out / "report.json", report, verdict)
    return {"verdict": verdict, **io.report_to_dict(report)}


def _run_failure_study(cfg, out: Path) -> dict:
    records, summary, polar = commands.cmd_failure_study(cfg)
    write_csv(out / "results.csv", [r.to_row() for r in records])
    write_jsonl(out / "results.jsonl", [r.to_json() for r in records])
    write_csv(out / "polar.csv", polar)
    write_json(out / "summary.json", summary)
    return summary


def _run_bench(cfg, out: Path) -> dict:
    rows, summary = commands.cmd_bench(cfg)
    write_csv(out / "bench.csv", rows)
    write_json(out / "summary.json", summary)
    return summary


def _run_synth(cfg, out: Path) -> dict:
    manifest = commands.cmd_synth(cfg, out)
    run = replace(
        cfg, manifest="manifest.csv", intrinsics="intrinsics.json", reference="references.csv", initial=None
    )
    io.save_run_config(out / "run.json", run)
    return {"frames": len(manifest), "manifest": str(out / "manifest.csv")}


def _run_fit_thresholds(cfg, out: Path) -> dict:
    thr = commands.cmd_fit_thresholds(cfg)
    io.save_thresholds(out / "thresholds.json", thr)
    return io.thresholds_to_dict(thr)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        io.save_run_config(out / "config.resolved.json", cfg)
        if args.command == "calibrate":
            summary = _run_calibrate(cfg, out)
        elif args.command == "monitor":
            summary = _run_monitor(cfg, out)
        elif args.command == "diagnose":
            summary = _run_diagnose(cfg, out, args.theta)
        elif args.command == "failure-study":
            summary = _run_failure_study(cfg, out)
        elif args.command == "bench":
            summary = _run_bench(cfg, out)
        elif args.command == "synth":
            summary = _run_synth(cfg, out)
        else:
            summary = _run_fit_thresholds(cfg, out)
    except (CoecError, ValueError, OSError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, LoadError) and exc.path is not None:
            err["path"] = str(exc.path)
        sys.stderr.write(json.dumps({"command": args.command, **err}, sort_keys=True) + "\n")
        return 1
    _emit({"command": args.command, **summary})
    return 0


if __name__ == "__main__":
    sys.exit(main())
