"""Workflows behind the CLI subcommands.

Each ``cmd_*`` takes a resolved RunConfig and returns plain data; writing
files is left to the CLI layer. Fields whose names start with ``time_`` hold
wall-clock measurements and are the only values that vary between reruns.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io
from .camera import DoubleSphereIntrinsics
from .diagnostics import ClassifierThresholds, DiagnosticsReport, classify, diagnose, fit_thresholds
from .errors import FormatError, LoadError, PreconditionError
from .features import Frame
from .geometry import (
    ExtrinsicParams,
    apply_rotation_perturbation,
    perturbation_axis,
    rotation_error_deg,
    sample_rotation_perturbation,
)
from .mi import MiObjective
from .optimizer import calibrate
from .synthetic import SensorRig, synthesize_sequence

log = logging.getLogger(__name__)

CONVERGED_DEG = 0.5
DIVERGED_DEG = 1.0


@dataclass(frozen=True)
class RunRecord:
    window_id: int
    frame_ids: tuple[str, ...]
    theta0: ExtrinsicParams
    theta_star: ExtrinsicParams
    rotation_error_deg: float | None
    initial_error_deg: float | None
    report: DiagnosticsReport | None
    verdict: str | None
    evaluations: int
    converged: bool
    objective_start: float
    objective_star: float
    time_elapsed_s: float

    def to_row(self) -> dict:
        row = {"window_id": self.window_id, "first_frame": self.frame_ids[0], "last_frame": self.frame_ids[-1]}
        for prefix, p in (("theta0", self.theta0), ("theta", self.theta_star)):
            for axis, v in zip("xyz", p.rotation_deg):
                row[f"{prefix}_r{axis}_deg"] = float(v)
            for axis, v in zip("xyz", p.translation):
                row[f"{prefix}_t{axis}_m"] = float(v)
        row["initial_error_deg"] = self.initial_error_deg
        row["rotation_error_deg"] = self.rotation_error_deg
        rep = self.report
        row["mi_value"] = None if rep is None else rep.mi_value
        row["grad_norm"] = None if rep is None else rep.grad_norm
        row["curvature_agg"] = None if rep is None else rep.curvature_agg
        row["verdict"] = self.verdict
        row["evaluations"] = self.evaluations
        row["converged"] = self.converged
        row["objective_start"] = self.objective_start
        row["objective_star"] = self.objective_star
        row["time_elapsed_s"] = self.time_elapsed_s
        return row

    def to_json(self) -> dict:
        return {
            "window_id": self.window_id,
            "frame_ids": list(self.frame_ids),
            "theta0": io.calibration_to_dict(self.theta0),
            "theta_star": io.calibration_to_dict(self.theta_star),
            "initial_error_deg": self.initial_error_deg,
            "rotation_error_deg": self.rotation_error_deg,
            "report": None if self.report is None else io.report_to_dict(self.report),
            "verdict": self.verdict,
            "evaluations": self.evaluations,
            "converged": self.converged,
            "objective_start": self.objective_start,
            "objective_star": self.objective_star,
            "time_elapsed_s": self.time_elapsed_s,
        }


# --- input resolution ----------------------------------------------------------


class References:
    """Known true extrinsics: one for every frame, or per frame from a CSV."""

    def __init__(self, default: ExtrinsicParams | None = None, per_frame: dict | None = None):
        self.default = default
        self.per_frame = per_frame or {}

    def __bool__(self):
        return self.default is not None or bool(self.per_frame)

    def for_window(self, frame_ids: Sequence[str]) -> ExtrinsicParams | None:
        # a window is scored against its first frame's truth
        return self.per_frame.get(frame_ids[0], self.default)


REFERENCE_HEADER = ("frame_id", "rx_deg", "ry_deg", "rz_deg", "tx_m", "ty_m", "tz_m")


def write_references(path, frame_ids: Sequence[str], truths: Sequence[ExtrinsicParams]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REFERENCE_HEADER)
        for fid, p in zip(frame_ids, truths, strict=True):
            writer.writerow([fid, *(repr(float(v)) for v in p.rotation_deg), *(repr(float(v)) for v in p.translation)])


def load_references(path) -> References:
    if path is None:
        return References()
    path = Path(path)
    if path.suffix.lower() != ".csv":
        return References(default=io.load_calibration(path))
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise LoadError(f"cannot read references ({exc.strerror})", path) from exc
    if not rows or tuple(rows[0]) != REFERENCE_HEADER:
        raise FormatError(f"reference header must be {','.join(REFERENCE_HEADER)}", path)
    per_frame = {}
    for row in rows[1:]:
        try:
            values = [float(v) for v in row[1:7]]
        except ValueError:
            raise FormatError(f"bad reference row {row!r}", path) from None
        per_frame[row[0]] = ExtrinsicParams.from_degrees(values[:3], values[3:])
    return References(per_frame=per_frame)


@dataclass(frozen=True)
class Inputs:
    manifest: io.FrameManifest
    intrinsics: DoubleSphereIntrinsics
    initial: ExtrinsicParams | None
    references: References
    thresholds: ClassifierThresholds | None

    def load(self, cfg: io.RunConfig, frame_ids: Sequence[str]) -> tuple[Frame, ...]:
        return io.load_frameset(self.manifest, frame_ids, self.intrinsics, cfg.min_range_m, cfg.inverse_depth)

    def start(self, frame_ids: Sequence[str]) -> ExtrinsicParams:
        if self.initial is not None:
            return self.initial
        ref = self.references.for_window(frame_ids)
        if ref is None:
            raise PreconditionError("no initial calibration and no reference to start from")
        return ref


def resolve_inputs(cfg: io.RunConfig) -> Inputs:
    if cfg.manifest is None:
        raise PreconditionError("no manifest given (config key 'manifest' or --manifest)")
    if cfg.intrinsics is None:
        raise PreconditionError("no intrinsics given (config key 'intrinsics' or --intrinsics)")
    return Inputs(
        manifest=io.read_manifest(cfg.manifest),
        intrinsics=io.load_intrinsics(cfg.intrinsics),
        initial=None if cfg.initial is None else io.load_calibration(cfg.initial),
        references=load_references(cfg.reference),
        thresholds=None if cfg.thresholds is None else io.load_thresholds(cfg.thresholds),
    )


def _perturbed(theta: ExtrinsicParams, radius_deg: float, rng_key) -> ExtrinsicParams:
    if radius_deg <= 0:
        return theta
    return apply_rotation_perturbation(theta, sample_rotation_perturbation(radius_deg, np.random.default_rng(rng_key)))


def _error(a: ExtrinsicParams, b: ExtrinsicParams | None) -> float | None:
    return None if b is None else rotation_error_deg(a, b)


def _run_window(
    cfg: io.RunConfig,
    frames: Sequence[Frame],
    intr: DoubleSphereIntrinsics,
    theta0: ExtrinsicParams,
    reference: ExtrinsicParams | None,
    thresholds: ClassifierThresholds | None,
    window_id: int,
    frame_ids: Sequence[str],
) -> RunRecord:
    start = time.perf_counter()
    result = calibrate(frames, theta0, intr, cfg.mi, cfg.optimizer)
    report = diagnose(frames, result.theta_star, intr, cfg.mi, cfg.step)
    verdict = None if thresholds is None else classify(report, thresholds)
    return RunRecord(
        window_id=window_id,
        frame_ids=tuple(frame_ids),
        theta0=theta0,
        theta_star=result.theta_star,
        rotation_error_deg=_error(result.theta_star, reference),
        initial_error_deg=_error(theta0, reference),
        report=report,
        verdict=verdict,
        evaluations=result.evaluations,
        converged=result.converged,
        objective_start=result.objective_at_start,
        objective_star=result.objective_at_optimum,
        time_elapsed_s=time.perf_counter() - start,
    )


def _first_window(inputs: Inputs, cfg: io.RunConfig) -> tuple[str, ...]:
    if len(inputs.manifest) == 0:
        raise LoadError("manifest lists no frames", inputs.manifest.root)
    return tuple(inputs.manifest.ids[: cfg.window_length])


# --- commands ----------------------------------------------------------------


def cmd_calibrate(cfg: io.RunConfig) -> RunRecord:
    """Calibrate on the first window of the manifest, then diagnose and classify the result."""
    inputs = resolve_inputs(cfg)
    ids = _first_window(inputs, cfg)
    frames = inputs.load(cfg, ids)
    theta0 = _perturbed(inputs.start(ids), cfg.perturb_deg, [cfg.seed, 0])
    reference = inputs.references.for_window(ids)
    return _run_window(cfg, frames, inputs.intrinsics, theta0, reference, inputs.thresholds, 0, ids)


def cmd_monitor(cfg: io.RunConfig) -> list[RunRecord]:
    """Sliding-window calibration over the whole manifest.

    ``previous`` reseeding starts each window from the last Θ* not classified
    as a failure; ``fixed`` restarts every window from the configured Θ₀
    (perturbed per window when ``perturb_deg`` > 0).
    """
    inputs = resolve_inputs(cfg)
    windows = io.sliding_windows(inputs.manifest, cfg.window_length, cfg.window_stride)
    records = []
    accepted = None
    for w, ids in enumerate(windows):
        if cfg.reseed_mode == "previous" and accepted is not None:
            theta0 = accepted
        else:
            theta0 = _perturbed(inputs.start(ids), cfg.perturb_deg, [cfg.seed, w])
        frames = inputs.load(cfg, ids)
        rec = _run_window(
            cfg, frames, inputs.intrinsics, theta0, inputs.references.for_window(ids), inputs.thresholds, w, ids
        )
        if rec.verdict != "failure":
            accepted = rec.theta_star
        log.info("window %d: verdict=%s error=%s", w, rec.verdict, rec.rotation_error_deg)
        records.append(rec)
    return records


def cmd_diagnose(cfg: io.RunConfig, theta: ExtrinsicParams | None = None) -> tuple[DiagnosticsReport, str | None]:
    inputs = resolve_inputs(cfg)
    ids = _first_window(inputs, cfg)
    theta = inputs.start(ids) if theta is None else theta
    report = diagnose(inputs.load(cfg, ids), theta, inputs.intrinsics, cfg.mi, cfg.step)
    return report, None if inputs.thresholds is None else classify(report, inputs.thresholds)


def _study_trial(args) -> tuple[RunRecord, dict]:
    cfg, frames, intr, center, reference, thresholds, trial, ids = args
    delta = sample_rotation_perturbation(cfg.radius_deg, np.random.default_rng([cfg.seed, trial]))
    theta0 = apply_rotation_perturbation(center, delta)
    rec = _run_window(cfg, frames, intr, theta0, reference, thresholds, trial, ids)
    axis = perturbation_axis(delta)
    polar = {
        "trial": trial,
        "axis_azimuth_deg": math.degrees(math.atan2(axis[1], axis[0])),
        "axis_elevation_deg": math.degrees(math.asin(max(-1.0, min(1.0, axis[2])))),
        "initial_error_deg": rec.initial_error_deg,
        "final_error_deg": rec.rotation_error_deg,
        "verdict": rec.verdict,
    }
    return rec, polar


def summarize_study(records: Sequence[RunRecord]) -> dict:
    errors = [r.rotation_error_deg for r in records]
    known = [e for e in errors if e is not None]
    summary = {
        "trials": len(records),
        "converged": sum(e < CONVERGED_DEG for e in known),
        "intermediate": sum(CONVERGED_DEG <= e <= DIVERGED_DEG for e in known),
        "diverged": sum(e > DIVERGED_DEG for e in known),
        "flagged_failure": sum(r.verdict == "failure" for r in records),
        "flagged_success": sum(r.verdict == "success" for r in records),
    }
    if known and all(r.verdict is not None for r in records):
        summary["misclassified"] = sum(
            (e > DIVERGED_DEG and r.verdict != "failure") or (e < CONVERGED_DEG and r.verdict != "success")
            for r, e in zip(records, errors)
            if e is not None
        )
    else:
        summary["misclassified"] = None
    return summary


def cmd_failure_study(cfg: io.RunConfig) -> tuple[list[RunRecord], dict, list[dict]]:
    """``trials`` calibrations of the first window from seeded perturbations of radius ``radius_deg``."""
    inputs = resolve_inputs(cfg)
    ids = _first_window(inputs, cfg)
    frames = inputs.load(cfg, ids)
    center = inputs.start(ids)
    reference = inputs.references.for_window(ids)
    jobs = [
        (cfg, frames, inputs.intrinsics, center, reference, inputs.thresholds, t, ids) for t in range(cfg.trials)
    ]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_study_trial, jobs))
    else:
        results = [_study_trial(j) for j in jobs]
    records = [r for r, _ in results]
    return records, summarize_study(records), [p for _, p in results]


def linear_fit_r2(x, y) -> float:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    total = np.sum((y - y.mean()) ** 2)
    return 1.0 if total == 0 else float(1.0 - np.sum(resid**2) / total)


def cmd_bench(cfg: io.RunConfig) -> tuple[list[dict], dict]:
    """Time single objective evaluations and full calibrations for each frame count."""
    inputs = resolve_inputs(cfg)
    n = len(inputs.manifest)
    if max(cfg.frame_counts) > n:
        raise PreconditionError(f"frame count {max(cfg.frame_counts)} exceeds manifest length {n}")
    rows = []
    for count in cfg.frame_counts:
        ids = tuple(inputs.manifest.ids[:count])
        frames = inputs.load(cfg, ids)
        theta = inputs.start(ids)
        objective = MiObjective(frames, inputs.intrinsics, cfg.mi)
        objective(theta)  # warm-up
        mi_times = []
        for _ in range(cfg.repetitions):
            t0 = time.perf_counter()
            objective(theta)
            mi_times.append(time.perf_counter() - t0)
        cal_times, evals = [], []
        theta0 = _perturbed(theta, cfg.perturb_deg, [cfg.seed, count])
        for _ in range(cfg.calibrate_repetitions):
            t0 = time.perf_counter()
            res = calibrate(frames, theta0, inputs.intrinsics, cfg.mi, cfg.optimizer)
            cal_times.append(time.perf_counter() - t0)
            evals.append(res.evaluations)
        rows.append(
            {
                "frames": count,
                "mi_repetitions": cfg.repetitions,
                "calibrate_repetitions": cfg.calibrate_repetitions,
                "calibrate_evaluations": evals[0] if evals else None,
                "time_mi_mean_s": float(np.mean(mi_times)),
                "time_mi_std_s": float(np.std(mi_times)),
                "time_mi_min_s": float(np.min(mi_times)),
                "time_calibrate_mean_s": float(np.mean(cal_times)) if cal_times else None,
                "time_calibrate_std_s": float(np.std(cal_times)) if cal_times else None,
            }
        )
        log.info("bench %d frames: %.4f s per objective", count, rows[-1]["time_mi_mean_s"])
    counts = [r["frames"] for r in rows]
    # the fit uses the fastest repetition, the least disturbed by other load
    r2 = linear_fit_r2(counts, [r["time_mi_min_s"] for r in rows]) if len(set(counts)) > 1 else None
    return rows, {"frame_counts": counts, "time_mi_linear_r2": r2}


def cmd_synth(cfg: io.RunConfig, out_dir) -> io.FrameManifest:
    """Render ``cfg.synth`` to disk with the manifest, intrinsics and true extrinsics."""
    out_dir = Path(out_dir)
    frames, truths, rig = synthesize_sequence(cfg.synth, seed=cfg.seed, rig=SensorRig())
    # 10 Hz frame clock
    manifest = io.write_frameset(out_dir, frames, [0.1 * k for k in range(len(frames))], cfg.synth.depth_format)
    io.save_intrinsics(out_dir / "intrinsics.json", rig.intrinsics)
    io.save_calibration(out_dir / "reference.json", rig.truth)
    write_references(out_dir / "references.csv", manifest.ids, truths)
    return manifest


def cmd_fit_thresholds(cfg: io.RunConfig) -> ClassifierThresholds:
    """Fit limits from diagnostics at the reference and at ``error_deg`` off it, one pair per window."""
    inputs = resolve_inputs(cfg)
    if not inputs.references:
        raise PreconditionError("fitting thresholds needs a reference calibration")
    windows = io.sliding_windows(inputs.manifest, cfg.window_length, cfg.window_stride)
    at_truth, at_error = [], []
    for w, ids in enumerate(windows):
        frames = inputs.load(cfg, ids)
        truth = inputs.references.for_window(ids)
        at_truth.append(diagnose(frames, truth, inputs.intrinsics, cfg.mi, cfg.step))
        wrong = _perturbed(truth, cfg.error_deg, [cfg.seed, w])
        at_error.append(diagnose(frames, wrong, inputs.intrinsics, cfg.mi, cfg.step))
    thr = fit_thresholds(at_truth, at_error)
    return replace(thr, metadata={**thr.metadata, "error_deg": cfg.error_deg, "windows": len(windows)})
