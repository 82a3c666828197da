"""Ground-truth road scenes and simulated camera / LiDAR sensors.

World frame: x forward along the road, y left, z up, ground at z = 0.

Both sensor frames use the optical axis convention (x right, y down,
z forward). For the LiDAR this means its spin axis is -y; the returned
ranges are unaffected, and a forward-looking rig then has small Euler
angles instead of sitting at the fixed-xyz gimbal lock.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .camera import DoubleSphereIntrinsics
from .features import DepthMap, Frame, PointCloud
from .geometry import (
    ExtrinsicParams,
    RigidTransform,
    apply_rotation_perturbation,
    euler_to_rotation,
    params_to_transform,
    rot_z,
    sample_rotation_perturbation,
)

_BIG = np.inf
# boxes beyond this distance are left out of rendered depth maps
RENDER_DISTANCE = 150.0


@dataclass(frozen=True)
class Plane:
    """Infinite plane ``normal . p = offset``, clipped to the scene extent."""

    normal: tuple[float, float, float]
    offset: float


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]


@dataclass(frozen=True)
class Scene:
    primitives: tuple
    extent_lo: tuple[float, float, float] = (-50.0, -50.0, -1.0)
    extent_hi: tuple[float, float, float] = (150.0, 50.0, 30.0)

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("a scene needs at least one primitive")


@dataclass(frozen=True)
class BeamPattern:
    ring_elevations: tuple[float, ...]
    azimuth_step: float
    max_range: float = 80.0

    def __post_init__(self):
        if not self.ring_elevations or self.azimuth_step <= 0:
            raise ValueError("beam pattern must have rings and a positive azimuth step")
        if self.max_range <= 0:
            raise ValueError("max range must be positive")

    @classmethod
    def default(cls) -> "BeamPattern":
        return cls(tuple(np.radians(np.linspace(-24.0, 2.0, 16)).tolist()), math.radians(0.5), 80.0)


def default_intrinsics() -> DoubleSphereIntrinsics:
    return DoubleSphereIntrinsics(fx=120.0, fy=120.0, cx=200.0, cy=150.0, xi=-0.2, alpha=0.6, width=400, height=300)


def default_truth() -> ExtrinsicParams:
    # camera 10 cm below and 6 cm ahead of the LiDAR, a few degrees of misalignment.
    # Parallax between the sensors biases the MI peak; larger baselines cost accuracy.
    rot = np.radians([2.0, -1.5, 1.0])
    r = euler_to_rotation(*rot)
    cam_in_lidar = np.array([0.02, 0.1, 0.06])
    return ExtrinsicParams.from_array(np.concatenate([rot, -r @ cam_in_lidar]))


@dataclass(frozen=True)
class SensorRig:
    truth: ExtrinsicParams = field(default_factory=default_truth)
    intrinsics: DoubleSphereIntrinsics = field(default_factory=default_intrinsics)
    beams: BeamPattern = field(default_factory=BeamPattern.default)

    def camera_pose(self, lidar_pose: RigidTransform) -> RigidTransform:
        """World-from-camera given world-from-LiDAR."""
        return lidar_pose @ params_to_transform(self.truth).inverse()


@dataclass(frozen=True)
class NoiseConfig:
    range_sigma: float = 0.02
    depth_distortion: str | None = "inverse"
    depth_noise: float = 0.003
    border: int = 4


# world-from-optical rotation for a sensor looking along +x_world
_OPTICAL_TO_WORLD = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def sensor_pose(x: float, y: float, height: float, heading: float = 0.0) -> RigidTransform:
    """World-from-sensor pose for a level sensor at (x, y, height) facing ``heading``."""
    return RigidTransform.from_rt(rot_z(heading) @ _OPTICAL_TO_WORLD, [x, y, height])


def straight_trajectory(n: int, start_x: float = 0.0, spacing: float = 2.0, height: float = 1.8,
                        lateral: float = 0.0) -> list[RigidTransform]:
    return [sensor_pose(start_x + i * spacing, lateral, height) for i in range(n)]


def generate_scene(seed: int, complexity: int = 20, road_length: float = 120.0) -> Scene:
    """Road corridor: ground plane plus ``complexity - 1`` boxes along ``road_length`` meters of road."""
    if complexity < 1:
        raise ValueError("complexity must be >= 1")
    rng = np.random.default_rng(seed)
    prims: list = [Plane((0.0, 0.0, 1.0), 0.0)]
    for k in range(complexity - 1):
        kind = k % 4
        x0 = rng.uniform(-5.0, road_length)
        side = 1.0 if rng.random() < 0.5 else -1.0
        if kind == 0:  # building facade
            depth, length, height = rng.uniform(3, 8), rng.uniform(6, 18), rng.uniform(4, 12)
            y_near = rng.uniform(6.0, 11.0)
        elif kind == 1:  # parked car
            depth, length, height = 1.8, rng.uniform(3.5, 4.8), rng.uniform(1.3, 1.7)
            y_near = rng.uniform(3.0, 4.5)
        elif kind == 2:  # pole / tree trunk
            depth, length, height = 0.4, 0.4, rng.uniform(3, 7)
            y_near = rng.uniform(3.5, 6.0)
        else:  # wall or hedge
            depth, length, height = rng.uniform(0.5, 1.5), rng.uniform(5, 15), rng.uniform(1.0, 3.0)
            y_near = rng.uniform(4.5, 8.0)
        y_lo, y_hi = (y_near, y_near + depth) if side > 0 else (-y_near - depth, -y_near)
        prims.append(Box((x0, y_lo, 0.0), (x0 + length, y_hi, height)))
    return Scene(tuple(prims), extent_hi=(road_length + 30.0, 50.0, 30.0))


def _box_distance(box: Box, point: np.ndarray) -> float:
    nearest = np.clip(point, box.lo, box.hi)
    return float(np.linalg.norm(nearest - point))


def _hit_plane(plane: Plane, o, d, lo_ext, hi_ext) -> np.ndarray:
    n = np.array(plane.normal, dtype=float)
    dn = d @ n
    ok = np.abs(dn) > 1e-12
    t = np.where(ok, (plane.offset - o @ n) / np.where(ok, dn, 1.0), _BIG)
    t = np.where(t > 1e-9, t, _BIG)
    finite = np.isfinite(t)
    hit = o + np.where(finite, t, 0.0)[:, None] * d
    inside = finite & np.all((hit >= lo_ext) & (hit <= hi_ext), axis=1)
    return np.where(inside, t, _BIG)


def _hit_box(box: Box, o, d, inv, best) -> None:
    lo, hi = np.array(box.lo), np.array(box.hi)
    # bounding-sphere pre-test, then the slab test on candidate rays only
    center, radius = 0.5 * (lo + hi) - o, 0.5 * np.linalg.norm(hi - lo)
    along = d @ center
    cand = np.flatnonzero((center @ center - along**2 <= radius * radius) & (along > -radius))
    if cand.size == 0:
        return
    t1 = (lo - o) * inv[cand]
    t2 = (hi - o) * inv[cand]
    tmin = np.minimum(t1, t2).max(axis=1)
    tmax = np.maximum(t1, t2).min(axis=1)
    t_enter = np.where(tmin > 1e-9, tmin, tmax)
    t = np.where((tmax >= np.maximum(tmin, 0.0)) & (t_enter > 1e-9), t_enter, _BIG)
    best[cand] = np.minimum(best[cand], t)


def ray_cast(scene: Scene, origin, directions, max_distance: float = np.inf) -> np.ndarray:
    """Distance along each unit direction to the first hit; inf on a miss.

    Boxes farther than ``max_distance`` from the origin are skipped.
    """
    o = np.asarray(origin, dtype=float)
    d = np.asarray(directions, dtype=float).reshape(-1, 3)
    lo_ext, hi_ext = np.array(scene.extent_lo), np.array(scene.extent_hi)
    best = np.full(d.shape[0], _BIG)
    # zero components become tiny so slab bounds are +-huge instead of nan
    inv = 1.0 / np.where(d == 0.0, 1e-300, d)
    for prim in scene.primitives:
        if isinstance(prim, Plane):
            np.minimum(best, _hit_plane(prim, o, d, lo_ext, hi_ext), out=best)
        elif _box_distance(prim, o) <= max_distance:
            _hit_box(prim, o, d, inv, best)
    return best


def unproject_pixels(u, v, intr: DoubleSphereIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Unit camera-frame rays for pixel coordinates, with a validity mask."""
    mx = (np.asarray(u, dtype=float) - intr.cx) / intr.fx
    my = (np.asarray(v, dtype=float) - intr.cy) / intr.fy
    r2 = mx * mx + my * my
    a, xi = intr.alpha, intr.xi
    disc = 1.0 - (2.0 * a - 1.0) * r2
    valid = disc >= 0.0
    mz = (1.0 - a * a * r2) / (a * np.sqrt(np.maximum(disc, 0.0)) + 1.0 - a)
    disc2 = mz * mz + (1.0 - xi * xi) * r2
    valid &= disc2 >= 0.0
    scale = (mz * xi + np.sqrt(np.maximum(disc2, 0.0))) / (mz * mz + r2)
    rays = np.stack([scale * mx, scale * my, scale * mz - xi], axis=-1)
    rays /= np.linalg.norm(rays, axis=-1, keepdims=True)
    return rays, valid


DISTORTIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    # increasing in distance, disparity-shaped like a monocular network
    "inverse": lambda d: -1.0 / (d + 2.0),
    "log": lambda d: np.log(d + 0.5),
    "sqrt": np.sqrt,
}


def render_depth(
    scene: Scene,
    rig: SensorRig,
    camera_pose: RigidTransform,
    noise: NoiseConfig | None = None,
    rng: np.random.Generator | None = None,
    depth_kind: str = "range",
) -> DepthMap:
    """Ray-cast the camera's per-pixel depth, optionally emulating monocular depth.

    ``depth_kind="range"`` gives distance along the pixel ray; ``"z"`` gives
    depth along the optical axis and masks rays that do not point forward.
    """
    if depth_kind not in ("range", "z"):
        raise ValueError(f"unknown depth kind {depth_kind!r}")
    intr = rig.intrinsics
    cols, rows = np.meshgrid(np.arange(intr.width) + 0.5, np.arange(intr.height) + 0.5)
    rays, valid = unproject_pixels(cols, rows, intr)
    world_dirs = rays.reshape(-1, 3) @ camera_pose.rotation.T
    dist = ray_cast(scene, camera_pose.translation, world_dirs, RENDER_DISTANCE).reshape(intr.height, intr.width)
    mask = valid & np.isfinite(dist)
    if depth_kind == "z":
        dist = dist * rays[..., 2]
        mask &= rays[..., 2] > 0
    values = np.where(mask, dist, 0.0)
    if noise is not None:
        if noise.depth_distortion is not None:
            values[mask] = DISTORTIONS[noise.depth_distortion](values[mask])
        if noise.depth_noise > 0 and mask.any():
            rng = rng if rng is not None else np.random.default_rng(0)
            spread = np.ptp(values[mask])
            values[mask] += rng.normal(0.0, noise.depth_noise * spread, size=int(mask.sum()))
        if noise.border > 0:
            b = noise.border
            mask[:b, :] = mask[-b:, :] = False
            mask[:, :b] = mask[:, -b:] = False
    return DepthMap(values, mask).normalized()


def lidar_directions(beams: BeamPattern) -> tuple[np.ndarray, np.ndarray]:
    """Unit LiDAR-frame beam directions and their azimuths, ring-major."""
    el = np.asarray(beams.ring_elevations, dtype=float)
    n_az = int(round(2.0 * math.pi / beams.azimuth_step))
    az = -math.pi + beams.azimuth_step * np.arange(n_az)
    el_g, az_g = np.meshgrid(el, az, indexing="ij")
    dirs = np.stack([np.cos(el_g) * np.sin(az_g), -np.sin(el_g), np.cos(el_g) * np.cos(az_g)], axis=-1)
    return dirs.reshape(-1, 3), az_g.ravel()


def simulate_lidar(
    scene: Scene,
    rig: SensorRig,
    lidar_pose: RigidTransform,
    range_sigma: float = 0.02,
    rng: np.random.Generator | None = None,
    frame_duration: float = 0.1,
) -> PointCloud:
    """First-hit returns within max range, in the LiDAR frame, with sweep time offsets."""
    dirs, az = lidar_directions(rig.beams)
    dist = ray_cast(scene, lidar_pose.translation, dirs @ lidar_pose.rotation.T, rig.beams.max_range)
    keep = dist <= rig.beams.max_range
    dist, dirs, az = dist[keep], dirs[keep], az[keep]
    if range_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        dist = dist + rng.normal(0.0, range_sigma, size=dist.shape)
        # noise must not push a return past the sensor's reach
        keep = (dist > 0) & (dist <= rig.beams.max_range)
        dist, dirs, az = dist[keep], dirs[keep], az[keep]
    times = (az + math.pi) / (2.0 * math.pi) * frame_duration
    return PointCloud(dirs * dist[:, None], times)


def _render_frame(scene, rig, lidar_pose, noise, key) -> Frame:
    # separate streams keep the clouds independent of the camera side
    depth = render_depth(scene, rig, rig.camera_pose(lidar_pose), noise, np.random.default_rng([*key, 0]))
    sigma = 0.0 if noise is None else noise.range_sigma
    return Frame(depth, simulate_lidar(scene, rig, lidar_pose, sigma, np.random.default_rng([*key, 1])))


def make_frameset(
    scene: Scene,
    rig: SensorRig,
    trajectory: Sequence[RigidTransform],
    noise: NoiseConfig | None = NoiseConfig(),
    seed: int = 0,
) -> tuple[Frame, ...]:
    """One (depth, cloud) pair per world-from-LiDAR pose in ``trajectory``."""
    if len(trajectory) == 0:
        raise ValueError("trajectory must not be empty")
    return tuple(
        _render_frame(scene, rig, pose, noise, (seed, k)) for k, pose in enumerate(trajectory)
    )


@dataclass(frozen=True)
class SynthConfig:
    """A straight drive through one generated scene.

    With ``disturb_at_frame`` set, frames from that index on are rendered with
    the true rotation perturbed by ``disturb_deg`` about a seeded random axis.
    """

    scene_seed: int = 7
    complexity: int = 200
    road_length: float = 600.0
    frames: int = 50
    start_x: float = 0.0
    spacing: float = 3.0
    depth_distortion: str | None = "inverse"
    depth_noise: float = 0.003
    range_sigma: float = 0.02
    depth_format: str = "pfm"
    disturb_at_frame: int | None = None
    disturb_deg: float = 5.0

    def __post_init__(self):
        if self.frames < 1 or self.complexity < 1:
            raise ValueError("frames and complexity must be >= 1")
        if self.depth_distortion is not None and self.depth_distortion not in DISTORTIONS:
            raise ValueError(f"unknown depth distortion {self.depth_distortion!r}")
        if self.depth_format not in ("pfm", "png"):
            raise ValueError("depth_format must be 'pfm' or 'png'")

    @property
    def noise(self) -> NoiseConfig:
        return NoiseConfig(self.range_sigma, self.depth_distortion, self.depth_noise)


def synthesize_sequence(cfg: SynthConfig, seed: int = 0, rig: SensorRig | None = None):
    """Frames plus the per-frame true extrinsics for ``cfg``; returns (frames, truths, rig)."""
    rig = rig if rig is not None else SensorRig()
    scene = generate_scene(cfg.scene_seed, cfg.complexity, road_length=cfg.road_length)
    poses = straight_trajectory(cfg.frames, start_x=cfg.start_x, spacing=cfg.spacing)
    split = cfg.frames if cfg.disturb_at_frame is None else min(max(cfg.disturb_at_frame, 0), cfg.frames)
    frames = list(make_frameset(scene, rig, poses[:split], cfg.noise, seed)) if split else []
    truths = [rig.truth] * split
    if split < cfg.frames:
        delta = sample_rotation_perturbation(cfg.disturb_deg, np.random.default_rng([seed, 1 << 20]))
        moved = SensorRig(apply_rotation_perturbation(rig.truth, delta), rig.intrinsics, rig.beams)
        for k in range(split, cfg.frames):
            # same per-frame random streams as an undisturbed run
            frames.append(_render_frame(scene, moved, poses[k], cfg.noise, (seed, k)))
            truths.append(moved.truth)
    return tuple(frames), truths, rig
