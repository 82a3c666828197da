"""On-disk data model: frame manifests, point clouds, depth maps and JSON files.

Every JSON document carries ``schema_version``. Angles are degrees on disk
and radians in memory.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .camera import DoubleSphereIntrinsics
from .diagnostics import DEFAULT_STEP, ClassifierThresholds, DiagnosticsReport
from .errors import DimensionError, FormatError, InvalidParameterError, LoadError, PreconditionError
from .features import DEFAULT_MIN_RANGE, DepthMap, Frame, PointCloud
from .geometry import CONVENTION, ExtrinsicParams
from .mi import MiConfig
from .optimizer import PARAM_NAMES, OptimizerConfig
from .synthetic import SynthConfig

SCHEMA_VERSION = 1
MANIFEST_HEADER = ("frame_id", "cloud_path", "depth_path", "timestamp_s")
PNG_MAX = 65535


# --- manifests ---------------------------------------------------------------


@dataclass(frozen=True)
class FrameRecord:
    frame_id: str
    cloud_path: str
    depth_path: str
    timestamp_s: float


@dataclass(frozen=True)
class FrameManifest:
    """Ordered frame records; relative paths resolve against ``root``."""

    records: tuple[FrameRecord, ...]
    root: Path = Path(".")

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "root", Path(self.root))
        stamps = [r.timestamp_s for r in self.records]
        if any(b < a for a, b in zip(stamps, stamps[1:])):
            raise FormatError("manifest timestamps must be non-decreasing")
        ids = self.ids
        if len(set(ids)) != len(ids):
            raise FormatError("manifest frame ids must be unique")

    def __len__(self):
        return len(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.frame_id for r in self.records]

    def record(self, frame_id: str) -> FrameRecord:
        for r in self.records:
            if r.frame_id == frame_id:
                return r
        raise PreconditionError(f"frame id {frame_id!r} not in manifest")

    def resolve(self, relative: str) -> Path:
        p = Path(relative)
        return p if p.is_absolute() else self.root / p


def read_manifest(path) -> FrameManifest:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
                raise FormatError(f"manifest header must be {','.join(MANIFEST_HEADER)}", path)
            records = []
            for line_no, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 4:
                    raise FormatError(f"line {line_no}: expected 4 fields, got {len(row)}", path)
                try:
                    stamp = float(row[3])
                except ValueError:
                    raise FormatError(f"line {line_no}: bad timestamp {row[3]!r}", path) from None
                records.append(FrameRecord(row[0].strip(), row[1].strip(), row[2].strip(), stamp))
    except OSError as exc:
        raise LoadError(f"cannot read manifest ({exc.strerror})", path) from exc
    try:
        return FrameManifest(tuple(records), path.parent)
    except FormatError as exc:
        raise FormatError(str(exc), path) from exc


def write_manifest(path, manifest: FrameManifest) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in manifest.records:
            writer.writerow([r.frame_id, r.cloud_path, r.depth_path, repr(float(r.timestamp_s))])


def sliding_windows(source, length: int, stride: int) -> list[tuple]:
    """Windows ``[0, N), [stride, stride + N), ...`` that fit entirely in the sequence.

    ``source`` is a frame count (windows of indices) or a manifest (windows of ids).
    """
    if length < 1 or stride < 1:
        raise PreconditionError("window length and stride must be >= 1")
    ids = list(range(source)) if isinstance(source, int) else source.ids
    if length > len(ids):
        raise PreconditionError(f"window length {length} exceeds sequence length {len(ids)}")
    return [tuple(ids[s : s + length]) for s in range(0, len(ids) - length + 1, stride)]


# --- point clouds ------------------------------------------------------------


def read_velodyne(path) -> PointCloud:
    """KITTI-style float32 (x, y, z, intensity) records; intensity is dropped."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read point cloud ({exc.strerror})", path) from exc
    if len(raw) % 16 != 0:
        raise FormatError(f"point cloud size {len(raw)} bytes is not a multiple of 16", path)
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    if not np.all(np.isfinite(data[:, :3])):
        raise FormatError("point cloud contains non-finite coordinates", path)
    return PointCloud(data[:, :3].astype(float))


def write_velodyne(path, points, intensity=None) -> None:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    out = np.zeros((points.shape[0], 4), dtype="<f4")
    out[:, :3] = points
    if intensity is not None:
        out[:, 3] = intensity
    Path(path).write_bytes(out.tobytes())


# --- depth maps --------------------------------------------------------------


def read_pfm(path) -> np.ndarray:
    """Single-channel PFM as a top-row-first float array."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read depth map ({exc.strerror})", path) from exc
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0].strip() != b"Pf":
        raise FormatError("not a single-channel PFM file", path)
    try:
        width, height = (int(v) for v in parts[1].split())
        scale = float(parts[2])
    except ValueError:
        raise FormatError("malformed PFM header", path) from None
    dtype = "<f4" if scale < 0 else ">f4"
    body = parts[3]
    if len(body) != width * height * 4:
        raise FormatError(f"PFM body has {len(body)} bytes, expected {width * height * 4}", path)
    # rows are stored bottom to top
    return np.frombuffer(body, dtype=dtype).reshape(height, width)[::-1].astype(float)


def write_pfm(path, values) -> None:
    values = np.asarray(values, dtype="<f4")
    if values.ndim != 2:
        raise InvalidParameterError("PFM writer expects a 2-D array")
    h, w = values.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(values[::-1]).tobytes())


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".scale.json")


def read_png16(path) -> np.ndarray:
    """16-bit grayscale PNG decoded as ``offset + scale * q``; ``q = 0`` becomes NaN.

    The scale and offset live in ``<name>.png.scale.json``.
    """
    path = Path(path)
    try:
        with Image.open(path) as img:
            q = np.array(img)
    except FileNotFoundError as exc:
        raise LoadError("cannot read depth map (file not found)", path) from exc
    except OSError as exc:
        raise FormatError(f"cannot decode PNG ({exc})", path) from exc
    if q.ndim != 2:
        raise FormatError("depth PNG must be single-channel", path)
    side = _read_json(_sidecar(path))
    try:
        scale, offset = float(side["scale"]), float(side.get("offset", 0.0))
    except (KeyError, TypeError, ValueError):
        raise FormatError("scale sidecar needs a numeric 'scale'", _sidecar(path)) from None
    values = offset + scale * q.astype(float)
    values[q == 0] = np.nan
    return values


def write_png16(path, values, mask=None) -> None:
    """Quantize masked values to 1..65535 and write the scale sidecar; unmasked pixels become 0."""
    path = Path(path)
    values = np.asarray(values, dtype=float)
    mask = np.isfinite(values) if mask is None else (np.asarray(mask, dtype=bool) & np.isfinite(values))
    q = np.zeros(values.shape, dtype=np.uint16)
    lo, hi = (float(values[mask].min()), float(values[mask].max())) if mask.any() else (0.0, 1.0)
    scale = (hi - lo) / (PNG_MAX - 1) if hi > lo else 1.0
    q[mask] = 1 + np.rint((values[mask] - lo) / scale).astype(np.uint16)
    Image.fromarray(q).save(path)
    _write_json(_sidecar(path), {"schema_version": SCHEMA_VERSION, "scale": scale, "offset": lo - scale})


def read_depth(path, inverse: bool = False) -> DepthMap:
    """Load a PFM or 16-bit PNG depth map, masked and min-max normalized."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pfm":
        raw = read_pfm(path)
    elif suffix == ".png":
        raw = read_png16(path)
    else:
        raise FormatError(f"unsupported depth format {suffix!r}", path)
    return DepthMap.from_array(raw, normalize=True, inverse=inverse)


def write_depth(path, depth: DepthMap) -> None:
    """Store masked values shifted by +1 so none collides with the zero invalid marker.

    Readers min-max normalize, so the shift does not change the loaded map.
    """
    path = Path(path)
    values = np.where(depth.mask, depth.values + 1.0, np.nan)
    if path.suffix.lower() == ".png":
        write_png16(path, values, depth.mask)
    else:
        write_pfm(path, values)


def load_frameset(
    manifest: FrameManifest,
    frame_ids: Sequence[str],
    intr: DoubleSphereIntrinsics,
    min_range: float = DEFAULT_MIN_RANGE,
    inverse_depth: bool = False,
) -> tuple[Frame, ...]:
    """Decode the listed frames in order, with depth normalized and short returns dropped."""
    frames = []
    for frame_id in frame_ids:
        rec = manifest.record(frame_id)
        depth_path = manifest.resolve(rec.depth_path)
        cloud = read_velodyne(manifest.resolve(rec.cloud_path)).filter_min_range(min_range)
        depth = read_depth(depth_path, inverse=inverse_depth)
        if (depth.width, depth.height) != (intr.width, intr.height):
            raise DimensionError(
                f"depth map is {depth.width}x{depth.height}, intrinsics expect {intr.width}x{intr.height}", depth_path
            )
        frames.append(Frame(depth, cloud))
    return tuple(frames)


def write_frameset(
    root, frames: Sequence[Frame], timestamps: Sequence[float] | None = None, depth_format: str = "pfm"
) -> FrameManifest:
    """Write clouds, depth maps and ``manifest.csv`` under ``root``."""
    if depth_format not in ("pfm", "png"):
        raise InvalidParameterError("depth_format must be 'pfm' or 'png'")
    root = Path(root)
    (root / "clouds").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    if timestamps is None:
        timestamps = [0.1 * k for k in range(len(frames))]
    records = []
    for k, (frame, stamp) in enumerate(zip(frames, timestamps, strict=True)):
        frame_id = f"{k:06d}"
        cloud_rel = f"clouds/{frame_id}.bin"
        depth_rel = f"depth/{frame_id}.{depth_format}"
        write_velodyne(root / cloud_rel, frame.cloud.points)
        write_depth(root / depth_rel, frame.depth)
        records.append(FrameRecord(frame_id, cloud_rel, depth_rel, float(stamp)))
    manifest = FrameManifest(tuple(records), root)
    write_manifest(root / "manifest.csv", manifest)
    return manifest


# --- JSON documents ----------------------------------------------------------


def _read_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise LoadError(f"cannot read file ({exc.strerror})", path) from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON ({exc.msg} at line {exc.lineno})", path) from None
    if not isinstance(doc, dict):
        raise FormatError("expected a JSON object", path)
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise FormatError(f"unsupported schema_version {version!r}", path)
    return doc


def _write_json(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")


def calibration_to_dict(params: ExtrinsicParams) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "convention": CONVENTION,
        "rotation_deg": [float(v) for v in params.rotation_deg],
        "translation_m": [float(v) for v in params.translation],
    }


def calibration_from_dict(doc: dict, path=None) -> ExtrinsicParams:
    if "convention" not in doc:
        raise FormatError("calibration file lacks the 'convention' key", path)
    if doc["convention"] != CONVENTION:
        raise FormatError(f"unsupported rotation convention {doc['convention']!r}, expected {CONVENTION!r}", path)
    try:
        rot = [float(v) for v in doc["rotation_deg"]]
        trans = [float(v) for v in doc.get("translation_m", (0.0, 0.0, 0.0))]
    except (KeyError, TypeError, ValueError):
        raise FormatError("calibration needs numeric 'rotation_deg' and 'translation_m'", path) from None
    if len(rot) != 3 or len(trans) != 3:
        raise FormatError("rotation_deg and translation_m need three entries each", path)
    try:
        return ExtrinsicParams.from_degrees(rot, trans)
    except InvalidParameterError as exc:
        raise FormatError(str(exc), path) from None


def save_calibration(path, params: ExtrinsicParams) -> None:
    _write_json(path, calibration_to_dict(params))


def load_calibration(path) -> ExtrinsicParams:
    return calibration_from_dict(_read_json(path), path)


def intrinsics_to_dict(intr: DoubleSphereIntrinsics) -> dict:
    return {"schema_version": SCHEMA_VERSION, "model": "double-sphere", **asdict(intr)}


def intrinsics_from_dict(doc: dict, path=None) -> DoubleSphereIntrinsics:
    model = doc.get("model")
    try:
        if model == "double-sphere":
            return DoubleSphereIntrinsics(
                float(doc["fx"]), float(doc["fy"]), float(doc["cx"]), float(doc["cy"]),
                float(doc["xi"]), float(doc["alpha"]), int(doc["width"]), int(doc["height"]),
            )
        if model == "pinhole":
            return DoubleSphereIntrinsics.pinhole(
                float(doc["fx"]), float(doc["fy"]), float(doc["cx"]), float(doc["cy"]),
                int(doc["width"]), int(doc["height"]),
            )
    except KeyError as exc:
        raise FormatError(f"intrinsics missing key {exc.args[0]!r}", path) from None
    except (TypeError, ValueError) as exc:
        raise FormatError(f"bad intrinsics: {exc}", path) from None
    raise FormatError(f"unknown camera model {model!r}; expected 'double-sphere' or 'pinhole'", path)


def save_intrinsics(path, intr: DoubleSphereIntrinsics) -> None:
    _write_json(path, intrinsics_to_dict(intr))


def load_intrinsics(path) -> DoubleSphereIntrinsics:
    return intrinsics_from_dict(_read_json(path), path)


def _limit_out(v: float):
    # a disabled (infinite) limit is stored as null
    return None if math.isinf(v) else float(v)


def thresholds_to_dict(thr: ClassifierThresholds) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "mi_lim": _limit_out(thr.mi_lim),
        "grad_lim": _limit_out(thr.grad_lim),
        "curv_lim": _limit_out(thr.curv_lim),
        "metadata": thr.metadata,
    }


def thresholds_from_dict(doc: dict, path=None) -> ClassifierThresholds:
    def limit(key, disabled):
        v = doc.get(key)
        return disabled if v is None else float(v)

    try:
        return ClassifierThresholds(
            limit("mi_lim", -math.inf),
            limit("grad_lim", math.inf),
            limit("curv_lim", -math.inf),
            metadata=dict(doc.get("metadata", {})),
        )
    except (TypeError, ValueError) as exc:
        raise FormatError(f"bad thresholds: {exc}", path) from None


def save_thresholds(path, thr: ClassifierThresholds) -> None:
    _write_json(path, thresholds_to_dict(thr))


def load_thresholds(path) -> ClassifierThresholds:
    return thresholds_from_dict(_read_json(path), path)


def report_to_dict(report: DiagnosticsReport) -> dict:
    d = report.to_dict()
    d["step_size_deg"] = round(math.degrees(report.step_size), 12)
    return d


def save_report(path, report: DiagnosticsReport, verdict: str | None = None) -> None:
    _write_json(path, {"schema_version": SCHEMA_VERSION, "report": report_to_dict(report), "verdict": verdict})


def load_report(path) -> tuple[DiagnosticsReport, str | None]:
    doc = _read_json(path)
    try:
        return DiagnosticsReport.from_dict(doc["report"]), doc.get("verdict")
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad diagnostics report: {exc}", path) from None


# --- run configuration -------------------------------------------------------

RESEED_MODES = ("previous", "fixed")
_PATH_KEYS = ("manifest", "intrinsics", "initial", "reference", "thresholds")


@dataclass(frozen=True)
class RunConfig:
    """Everything a CLI run needs besides the data itself.

    Paths are stored as given; ``load_run_config`` resolves relative ones
    against the config file's directory.
    """

    mi: MiConfig = field(default_factory=MiConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    step_deg: float = round(math.degrees(DEFAULT_STEP), 12)
    window_length: int = 25
    window_stride: int = 72
    manifest: str | None = None
    intrinsics: str | None = None
    initial: str | None = None
    reference: str | None = None
    thresholds: str | None = None
    min_range_m: float = DEFAULT_MIN_RANGE
    inverse_depth: bool = False
    reseed_mode: str = "previous"
    perturb_deg: float = 0.0
    trials: int = 100
    radius_deg: float = 25.0
    error_deg: float = 3.0
    frame_counts: tuple[int, ...] = (5, 25, 50)
    repetitions: int = 100
    calibrate_repetitions: int = 100
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "frame_counts", tuple(int(c) for c in self.frame_counts))
        if self.window_length < 1 or self.window_stride < 1:
            raise InvalidParameterError("window length and stride must be >= 1")
        if not self.step_deg > 0:
            raise InvalidParameterError("diagnostics step must be positive")
        if self.reseed_mode not in RESEED_MODES:
            raise InvalidParameterError(f"reseed_mode must be one of {RESEED_MODES}")
        if self.trials < 1 or self.repetitions < 1 or self.calibrate_repetitions < 0 or self.workers < 1:
            raise InvalidParameterError("trials, repetitions and workers must be >= 1")
        if self.radius_deg < 0 or self.perturb_deg < 0 or self.error_deg <= 0:
            raise InvalidParameterError("radius and perturbation must be >= 0, error_deg > 0")
        if not self.frame_counts or min(self.frame_counts) < 1:
            raise InvalidParameterError("frame counts must be >= 1")

    @property
    def step(self) -> float:
        return math.radians(self.step_deg)

    def with_overrides(self, **overrides) -> "RunConfig":
        """Replace top-level keys, ignoring ``None`` values (unset CLI flags)."""
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


def _optimizer_to_dict(cfg: OptimizerConfig) -> dict:
    return {
        "rotation_bound_deg": round(math.degrees(cfg.rotation_bound), 12),
        "translation_bound_m": cfg.translation_bound,
        "free": [name for name, f in zip(PARAM_NAMES, cfg.free) if f],
        "xtol_rotation": cfg.xtol_rotation,
        "xtol_translation": cfg.xtol_translation,
        "max_evals_per_param": cfg.max_evals_per_param,
        "initial_step": cfg.initial_step,
        "restarts": cfg.restarts,
        "engine": cfg.engine,
    }


def _optimizer_from_dict(doc: dict, seed: int) -> OptimizerConfig:
    d = OptimizerConfig()
    unknown = set(doc) - set(_optimizer_to_dict(d))
    if unknown:
        raise InvalidParameterError(f"unknown optimizer keys {sorted(unknown)}")
    free_names = doc.get("free", [n for n, f in zip(PARAM_NAMES, d.free) if f])
    bad = set(free_names) - set(PARAM_NAMES)
    if bad:
        raise InvalidParameterError(f"unknown parameter names {sorted(bad)}")
    return OptimizerConfig(
        rotation_bound=math.radians(float(doc.get("rotation_bound_deg", math.degrees(d.rotation_bound)))),
        translation_bound=float(doc.get("translation_bound_m", d.translation_bound)),
        free=tuple(n in free_names for n in PARAM_NAMES),
        xtol_rotation=float(doc.get("xtol_rotation", d.xtol_rotation)),
        xtol_translation=float(doc.get("xtol_translation", d.xtol_translation)),
        max_evals_per_param=int(doc.get("max_evals_per_param", d.max_evals_per_param)),
        initial_step=float(doc.get("initial_step", d.initial_step)),
        restarts=int(doc.get("restarts", d.restarts)),
        engine=str(doc.get("engine", d.engine)),
        seed=seed,
    )


def run_config_to_dict(cfg: RunConfig) -> dict:
    doc = {"schema_version": SCHEMA_VERSION}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in ("mi", "synth"):
            value = asdict(value)
        elif f.name == "optimizer":
            value = _optimizer_to_dict(value)
        elif f.name == "frame_counts":
            value = list(value)
        doc[f.name] = value
    return doc


def run_config_from_dict(doc: dict, base_dir=None) -> RunConfig:
    doc = {k: v for k, v in doc.items() if k != "schema_version"}
    known = {f.name for f in fields(RunConfig)}
    unknown = set(doc) - known
    if unknown:
        raise InvalidParameterError(f"unknown config keys {sorted(unknown)}")
    seed = int(doc.get("seed", 0))
    if "mi" in doc:
        doc["mi"] = MiConfig(**doc["mi"])
    if "synth" in doc:
        doc["synth"] = SynthConfig(**doc["synth"])
    doc["optimizer"] = _optimizer_from_dict(doc.get("optimizer", {}), seed)
    if base_dir is not None:
        for key in _PATH_KEYS:
            if doc.get(key) is not None and not Path(doc[key]).is_absolute():
                doc[key] = str(Path(base_dir) / doc[key])
    return RunConfig(**doc)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    doc = _read_json(path)
    try:
        return run_config_from_dict(doc, path.parent)
    except (ValueError, TypeError) as exc:
        raise FormatError(f"bad run config: {exc}", path) from None


def save_run_config(path, cfg: RunConfig) -> None:
    _write_json(path, run_config_to_dict(cfg))

