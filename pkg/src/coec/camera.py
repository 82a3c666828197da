"""Double-sphere fisheye projection.

Pixel ``(col, row)`` covers the half-open square ``[col, col+1) x [row, row+1)``
in continuous coordinates, so the pixel nearest a projection is
``floor(u), floor(v)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InvalidParameterError

DENOM_EPS = 1e-9


@dataclass(frozen=True)
class DoubleSphereIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    xi: float
    alpha: float
    width: int
    height: int

    def __post_init__(self):
        values = (self.fx, self.fy, self.cx, self.cy, self.xi, self.alpha, self.width, self.height)
        if not all(math.isfinite(v) for v in values):
            raise InvalidParameterError(f"non-finite intrinsics: {values}")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidParameterError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise InvalidParameterError("image size must be positive")
        if not 0.0 <= self.alpha < 1.0:
            raise InvalidParameterError(f"alpha={self.alpha} outside [0, 1)")

    @classmethod
    def pinhole(cls, fx, fy, cx, cy, width, height) -> "DoubleSphereIntrinsics":
        return cls(fx, fy, cx, cy, 0.0, 0.0, width, height)

    @property
    def validity_w2(self) -> float:
        a, xi = self.alpha, self.xi
        w1 = a / (1.0 - a) if a <= 0.5 else (1.0 - a) / a
        return (w1 + xi) / math.sqrt(2.0 * w1 * xi + xi * xi + 1.0)


class PixelPoint(NamedTuple):
    u: float
    v: float
    valid: bool


def project_points(points, intr: DoubleSphereIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of (K, 3) camera-frame points.

    Returns ``(uv, valid)`` with ``uv`` of shape (K, 2); invalid rows hold
    whatever the formula produced (possibly nan) and must be ignored.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    xi, alpha = intr.xi, intr.alpha
    d1 = np.sqrt(x * x + y * y + z * z)
    zs = xi * d1 + z
    d2 = np.sqrt(x * x + y * y + zs * zs)
    denom = alpha * d2 + (1.0 - alpha) * zs
    valid = np.isfinite(denom) & (z > -intr.validity_w2 * d1) & (denom > DENOM_EPS)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * x / denom + intr.cx
        v = intr.fy * y / denom + intr.cy
    valid &= (u >= 0.0) & (u < intr.width) & (v >= 0.0) & (v < intr.height)
    return np.stack([u, v], axis=1), valid


def project(point, intr: DoubleSphereIntrinsics) -> PixelPoint:
    uv, valid = project_points(np.asarray(point, dtype=float).reshape(1, 3), intr)
    return PixelPoint(float(uv[0, 0]), float(uv[0, 1]), bool(valid[0]))


def project_cloud(points, intr: DoubleSphereIntrinsics) -> list[PixelPoint]:
    uv, valid = project_points(points, intr)
    return [PixelPoint(float(u), float(v), bool(ok)) for (u, v), ok in zip(uv, valid)]


def pixel_indices(uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-pixel (row, col) for in-bounds continuous coordinates."""
    return np.floor(uv[:, 1]).astype(np.intp), np.floor(uv[:, 0]).astype(np.intp)
