"""Depth maps, point clouds and the paired depth features fed to the MI estimator."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import DoubleSphereIntrinsics, pixel_indices, project_points
from .errors import EmptyOverlapError, InvalidParameterError, PreconditionError
from .geometry import ExtrinsicParams, params_to_transform, transform_points

DEFAULT_MIN_RANGE = 1.0


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Relative depth, increasing with metric distance, row-major (height, width)."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        mask = np.array(self.mask, dtype=bool)
        if values.ndim != 2 or values.shape != mask.shape:
            raise InvalidParameterError(f"depth {values.shape} and mask {mask.shape} must be equal 2-D shapes")
        mask &= np.isfinite(values)
        values[~mask] = 0.0
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "mask", _readonly(mask))

    @classmethod
    def from_array(cls, values, normalize: bool = True, inverse: bool = False) -> "DepthMap":
        """Build from raw network/disk output; zero and non-finite pixels are unmasked.

        ``inverse`` flips disparity-like maps (large = near) to increase with distance.
        """
        values = np.asarray(values, dtype=float)
        mask = np.isfinite(values) & (values != 0.0)
        if inverse:
            values = -values
        depth = cls(values, mask)
        return depth.normalized() if normalize else depth

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def normalized(self) -> "DepthMap":
        """Min-max rescale the masked pixels to [0, 1]."""
        if not self.mask.any():
            return self
        masked = self.values[self.mask]
        lo, hi = masked.min(), masked.max()
        scale = hi - lo
        values = np.zeros_like(self.values)
        values[self.mask] = (masked - lo) / scale if scale > 0 else 0.0
        return DepthMap(values, self.mask)

    def map_values(self, fn) -> "DepthMap":
        values = np.zeros_like(self.values)
        values[self.mask] = fn(self.values[self.mask])
        return DepthMap(values, self.mask)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """LiDAR-frame points in meters with optional per-point time offsets in seconds."""

    points: np.ndarray
    times: np.ndarray | None = None

    def __post_init__(self):
        points = np.array(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(points)):
            raise InvalidParameterError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", _readonly(points))
        if self.times is not None:
            times = np.array(self.times, dtype=float).reshape(-1)
            if times.shape[0] != points.shape[0]:
                raise InvalidParameterError("one time offset per point required")
            object.__setattr__(self, "times", _readonly(times))

    def __len__(self):
        return self.points.shape[0]

    def select(self, keep: np.ndarray) -> "PointCloud":
        return PointCloud(self.points[keep], None if self.times is None else self.times[keep])

    def filter_min_range(self, min_range: float = DEFAULT_MIN_RANGE) -> "PointCloud":
        return self.select(range_features(self) >= min_range)


@dataclass(frozen=True, eq=False)
class FeaturePairs:
    f_depth: np.ndarray
    f_range: np.ndarray
    pixels: np.ndarray  # (M, 2) row, col
    point_index: np.ndarray  # (M,) index into the source cloud

    def __len__(self):
        return self.f_depth.shape[0]


@dataclass(frozen=True, eq=False)
class Frame:
    """One time-synchronized depth map / point cloud pair with cached ranges."""

    depth: DepthMap
    cloud: PointCloud
    ranges: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "ranges", _readonly(range_features(self.cloud)))


FrameSet = tuple  # tuple[Frame, ...]; immutable, order is meaningful


def make_frameset(pairs) -> tuple[Frame, ...]:
    return tuple(p if isinstance(p, Frame) else Frame(*p) for p in pairs)


def range_features(cloud: PointCloud) -> np.ndarray:
    pts = cloud.points
    return np.sqrt(np.einsum("ij,ij->i", pts, pts))


def extract_feature_pairs(
    depth: DepthMap,
    cloud: PointCloud,
    params: ExtrinsicParams,
    intr: DoubleSphereIntrinsics,
    ranges: np.ndarray | None = None,
) -> FeaturePairs:
    """Pair every LiDAR point that lands on a masked depth pixel with that pixel's value.

    A pixel hit by several points contributes one pair per point.
    """
    if (depth.width, depth.height) != (intr.width, intr.height):
        raise InvalidParameterError(
            f"depth map {depth.width}x{depth.height} does not match intrinsics {intr.width}x{intr.height}"
        )
    if ranges is None:
        ranges = range_features(cloud)
    cam_points = transform_points(params_to_transform(params), cloud.points)
    uv, valid = project_points(cam_points, intr)
    idx = np.flatnonzero(valid)
    rows, cols = pixel_indices(uv[idx])
    on_mask = depth.mask[rows, cols]
    idx, rows, cols = idx[on_mask], rows[on_mask], cols[on_mask]
    if idx.size == 0:
        raise EmptyOverlapError("no LiDAR point projects onto a valid depth pixel")
    return FeaturePairs(
        f_depth=depth.values[rows, cols],
        f_range=ranges[idx],
        pixels=np.stack([rows, cols], axis=1),
        point_index=idx,
    )


def _so3_exp_terms(omega_dt: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-row coefficients (sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3) with small-angle series."""
    theta = np.linalg.norm(omega_dt, axis=1)
    small = theta < 1e-4
    t = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(t) / t)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(t)) / t**2)
    c = np.where(small, 1.0 / 6.0 - theta**2 / 120.0, (t - np.sin(t)) / t**3)
    return a, b, c


def motion_compensate(cloud: PointCloud, ego_velocity, frame_duration: float) -> PointCloud:
    """De-skew a sweep under constant ego velocity.

    ``ego_velocity`` is (vx, vy, vz, wx, wy, wz) in the sensor frame (m/s, rad/s);
    time offsets are seconds since sweep start. Every point is re-expressed in
    the sensor frame at the end of the sweep, ``t = frame_duration``.
    """
    if cloud.times is None:
        raise PreconditionError("motion compensation requires per-point time offsets")
    twist = np.asarray(ego_velocity, dtype=float).reshape(6)
    v, w = twist[:3], twist[3:]
    dt = (cloud.times - frame_duration)[:, None]
    p = cloud.points
    wdt = w[None, :] * dt
    vdt = v[None, :] * dt
    a, b, c = _so3_exp_terms(wdt)
    a, b, c = a[:, None], b[:, None], c[:, None]
    # R p = p + a (w x p) + b w x (w x p); V v with V = I + b [w]x + c [w]x^2
    wxp = np.cross(wdt, p)
    rotated = p + a * wxp + b * np.cross(wdt, wxp)
    wxv = np.cross(wdt, vdt)
    shifted = vdt + b * wxv + c * np.cross(wdt, wxv)
    return PointCloud(rotated + shifted, cloud.times)


def time_offsets_from_azimuth(cloud: PointCloud, frame_duration: float, axis: int = 2) -> PointCloud:
    """Assign sweep times to a spinning-LiDAR cloud from each point's azimuth about ``axis``.

    The sweep is assumed to start at azimuth -pi and rotate counter-clockwise.
    """
    others = [i for i in range(3) if i != axis]
    az = np.arctan2(cloud.points[:, others[1]], cloud.points[:, others[0]])
    times = (az + np.pi) / (2.0 * np.pi) * frame_duration
    return PointCloud(cloud.points, times)
