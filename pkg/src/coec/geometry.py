"""Rigid-body parameterization of the camera-from-LiDAR extrinsics.

Rotation convention is fixed-axis X-Y-Z: the point is rotated about the
x axis first, then y, then z, so ``R = Rz(theta_z) @ Ry(theta_y) @ Rx(theta_x)``.
Angles are radians everywhere inside the library.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError

CONVENTION = "fixed-xyz"
ROTATION = slice(0, 3)
TRANSLATION = slice(3, 6)


def wrap_angle(angle: float) -> float:
    """Map an angle to (-pi, pi]."""
    wrapped = math.remainder(angle, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class ExtrinsicParams:
    """Six-parameter camera-from-LiDAR extrinsics (radians, meters)."""

    theta_x: float = 0.0
    theta_y: float = 0.0
    theta_z: float = 0.0
    t_x: float = 0.0
    t_y: float = 0.0
    t_z: float = 0.0

    def __post_init__(self):
        values = self.as_array()
        if not np.all(np.isfinite(values)):
            raise InvalidParameterError(f"non-finite extrinsic parameters: {values.tolist()}")
        for name in ("theta_x", "theta_y", "theta_z"):
            angle = getattr(self, name)
            if not -math.pi < angle <= math.pi:
                raise InvalidParameterError(f"{name}={angle} outside (-pi, pi]")

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.theta_x, self.theta_y, self.theta_z, self.t_x, self.t_y, self.t_z],
            dtype=float,
        )

    @classmethod
    def from_array(cls, values, wrap: bool = True) -> "ExtrinsicParams":
        values = np.asarray(values, dtype=float).reshape(6)
        if not np.all(np.isfinite(values)):
            raise InvalidParameterError(f"non-finite extrinsic parameters: {values.tolist()}")
        angles = [wrap_angle(a) if wrap else float(a) for a in values[ROTATION]]
        return cls(*angles, *(float(t) for t in values[TRANSLATION]))

    @classmethod
    def from_degrees(cls, rotation_deg, translation_m=(0.0, 0.0, 0.0)) -> "ExtrinsicParams":
        return cls.from_array(np.concatenate([np.radians(rotation_deg), translation_m]))

    @property
    def rotation_deg(self) -> np.ndarray:
        return np.degrees(self.as_array()[ROTATION])

    @property
    def translation(self) -> np.ndarray:
        return self.as_array()[TRANSLATION]


class RigidTransform:
    """Immutable 4x4 homogeneous transform, target-frame-from-source-frame."""

    __slots__ = ("_matrix",)

    def __init__(self, matrix):
        matrix = np.array(matrix, dtype=float)
        if matrix.shape != (4, 4):
            raise InvalidParameterError(f"expected a 4x4 matrix, got {matrix.shape}")
        if not np.all(np.isfinite(matrix)):
            raise InvalidParameterError("non-finite transform")
        if not np.array_equal(matrix[3], [0.0, 0.0, 0.0, 1.0]):
            raise InvalidParameterError("bottom row must be [0, 0, 0, 1]")
        rot = matrix[:3, :3]
        if np.max(np.abs(rot.T @ rot - np.eye(3))) >= 1e-9 or abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise InvalidParameterError("rotation block is not a proper rotation")
        matrix.setflags(write=False)
        self._matrix = matrix

    @classmethod
    def from_rt(cls, rotation, translation) -> "RigidTransform":
        matrix = np.eye(4)
        matrix[:3, :3] = rotation
        matrix[:3, 3] = translation
        return cls(matrix)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(4))

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    @property
    def rotation(self) -> np.ndarray:
        return self._matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self._matrix[:3, 3]

    def inverse(self) -> "RigidTransform":
        rot_t = self.rotation.T
        return RigidTransform.from_rt(rot_t, -rot_t @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return RigidTransform(self._matrix @ other._matrix)

    def __eq__(self, other):
        return isinstance(other, RigidTransform) and np.array_equal(self._matrix, other._matrix)

    def __hash__(self):
        return hash(self._matrix.tobytes())

    def __repr__(self):
        return f"RigidTransform({self._matrix.tolist()!r})"


def rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_to_rotation(theta_x: float, theta_y: float, theta_z: float) -> np.ndarray:
    return rot_z(theta_z) @ rot_y(theta_y) @ rot_x(theta_x)


def rotation_to_euler(rotation) -> tuple[float, float, float]:
    """Inverse of :func:`euler_to_rotation`; theta_y is returned in [-pi/2, pi/2]."""
    r = np.asarray(rotation, dtype=float)
    theta_y = -math.asin(max(-1.0, min(1.0, r[2, 0])))
    theta_x = math.atan2(r[2, 1], r[2, 2])
    theta_z = math.atan2(r[1, 0], r[0, 0])
    return wrap_angle(theta_x), wrap_angle(theta_y), wrap_angle(theta_z)


def params_to_transform(params: ExtrinsicParams) -> RigidTransform:
    values = params.as_array()
    if not np.all(np.isfinite(values)):
        raise InvalidParameterError(f"non-finite extrinsic parameters: {values.tolist()}")
    return RigidTransform.from_rt(euler_to_rotation(*values[ROTATION]), values[TRANSLATION])


def params_from_transform(transform: RigidTransform) -> ExtrinsicParams:
    return ExtrinsicParams(*rotation_to_euler(transform.rotation), *transform.translation.tolist())


def transform_points(transform: RigidTransform, points) -> np.ndarray:
    """Apply ``p' = R p + t`` to an (K, 3) array of points."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    return points @ transform.rotation.T + transform.translation


def rotation_angle(rotation) -> float:
    """Geodesic angle of a rotation matrix in radians, in [0, pi]."""
    r = np.asarray(rotation, dtype=float)
    # atan2 form stays accurate near 0 and pi where arccos loses digits
    axis = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return math.atan2(0.5 * np.linalg.norm(axis), 0.5 * (np.trace(r) - 1.0))


def rotation_error_deg(a: ExtrinsicParams, b: ExtrinsicParams) -> float:
    ra = euler_to_rotation(*a.as_array()[ROTATION])
    rb = euler_to_rotation(*b.as_array()[ROTATION])
    return math.degrees(rotation_angle(ra @ rb.T))


def axis_angle_to_rotation(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def random_unit_vector(rng: np.random.Generator) -> np.ndarray:
    while True:
        v = rng.standard_normal(3)
        n = np.linalg.norm(v)
        if n > 1e-12:
            return v / n


def sample_rotation_perturbation(radius_deg: float, rng: np.random.Generator) -> ExtrinsicParams:
    """Rotation-only perturbation of exactly ``radius_deg`` about a uniform random axis."""
    if radius_deg < 0:
        raise InvalidParameterError(f"radius_deg must be >= 0, got {radius_deg}")
    axis = random_unit_vector(rng)
    rot = axis_angle_to_rotation(axis, math.radians(radius_deg))
    return ExtrinsicParams(*rotation_to_euler(rot))


def perturbation_axis(delta: ExtrinsicParams) -> np.ndarray:
    """Unit rotation axis of a rotation-only perturbation (zero vector for identity)."""
    r = euler_to_rotation(*delta.as_array()[ROTATION])
    axis = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    n = np.linalg.norm(axis)
    return axis / n if n > 0 else np.zeros(3)


def apply_rotation_perturbation(params: ExtrinsicParams, delta: ExtrinsicParams) -> ExtrinsicParams:
    """Left-compose the rotation of ``delta`` onto ``params``; translation is kept."""
    values = params.as_array()
    rot = euler_to_rotation(*delta.as_array()[ROTATION]) @ euler_to_rotation(*values[ROTATION])
    return ExtrinsicParams(*rotation_to_euler(rot), *values[TRANSLATION].tolist())
