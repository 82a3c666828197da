"""Histogram mutual information between LiDAR range and image depth features.

Two bin-range policies are offered, both adaptive per frame:

``rank``
    equal-frequency bins whose edges are order statistics of the sample. Any
    strictly increasing remapping of a feature leaves every bin index, and
    therefore the MI, bit-identical. This is what makes un-scaled relative
    depth usable and it is the default.
``minmax``
    equal-width bins spanning the sample's min and max. Only invariant under
    increasing affine remappings.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .camera import DoubleSphereIntrinsics
from .errors import EmptyOverlapError, InvalidDistributionError, InvalidParameterError, PreconditionError
from .features import FeaturePairs, Frame, extract_feature_pairs
from .geometry import ExtrinsicParams

BIN_POLICIES = ("rank", "minmax")


@dataclass(frozen=True)
class MiConfig:
    bins: int = 50
    bin_policy: str = "rank"
    pooled: bool = False

    def __post_init__(self):
        if int(self.bins) != self.bins or self.bins < 2:
            raise InvalidParameterError(f"bin count must be an integer >= 2, got {self.bins}")
        if self.bin_policy not in BIN_POLICIES:
            raise InvalidParameterError(f"unknown bin policy {self.bin_policy!r}; expected one of {BIN_POLICIES}")


@dataclass(frozen=True, eq=False)
class JointHistogram:
    """Normalized B x B table; axis 0 indexes range bins, axis 1 depth bins."""

    bins: np.ndarray
    marginal_range: np.ndarray
    marginal_depth: np.ndarray
    edges_range: np.ndarray
    edges_depth: np.ndarray
    sample_count: int

    @classmethod
    def from_table(cls, table, sample_count: int | None = None) -> "JointHistogram":
        table = np.asarray(table, dtype=float)
        total = table.sum()
        if np.any(table < 0) or total <= 0:
            raise InvalidDistributionError("joint table must be non-negative with positive mass")
        p = table / total
        n0, n1 = p.shape
        return cls(
            bins=p,
            marginal_range=p.sum(axis=1),
            marginal_depth=p.sum(axis=0),
            edges_range=np.arange(n0 + 1, dtype=float),
            edges_depth=np.arange(n1 + 1, dtype=float),
            sample_count=int(total) if sample_count is None else sample_count,
        )

    def transposed(self) -> "JointHistogram":
        return JointHistogram(
            self.bins.T, self.marginal_depth, self.marginal_range, self.edges_depth, self.edges_range, self.sample_count
        )


def bin_indices(values, bin_count: int, policy: str = "rank") -> tuple[np.ndarray, np.ndarray]:
    """Assign each value to one of ``bin_count`` bins; returns (indices, edges).

    A constant sample lands entirely in bin 0. The maximum value always falls
    in the last occupied bin (closed upper edge).
    """
    x = np.asarray(values, dtype=float)
    n = x.shape[0]
    if n == 0:
        raise PreconditionError("cannot bin an empty sample")
    if policy == "rank":
        order = np.sort(x)
        # number of strictly smaller samples; ties share a rank
        ranks = np.searchsorted(order, x, side="left")
        idx = (ranks * bin_count) // n
        edge_pos = np.minimum((np.arange(bin_count + 1) * n + bin_count - 1) // bin_count, n - 1)
        return idx, order[edge_pos]
    if policy == "minmax":
        lo, hi = float(x.min()), float(x.max())
        edges = np.linspace(lo, hi, bin_count + 1)
        if hi <= lo:
            return np.zeros(n, dtype=np.intp), edges
        idx = np.floor((x - lo) / (hi - lo) * bin_count).astype(np.intp)
        return np.minimum(idx, bin_count - 1), edges
    raise InvalidParameterError(f"unknown bin policy {policy!r}")


def build_histogram_from_samples(f_range, f_depth, cfg: MiConfig) -> JointHistogram:
    f_range = np.asarray(f_range, dtype=float)
    f_depth = np.asarray(f_depth, dtype=float)
    if f_range.shape != f_depth.shape:
        raise PreconditionError("feature lists must have equal length")
    if f_range.size == 0:
        raise PreconditionError("cannot build a histogram from zero pairs")
    b = cfg.bins
    i, edges_r = bin_indices(f_range, b, cfg.bin_policy)
    j, edges_d = bin_indices(f_depth, b, cfg.bin_policy)
    counts = np.bincount(i * b + j, minlength=b * b).reshape(b, b)
    p = counts / f_range.size
    return JointHistogram(
        bins=p,
        marginal_range=p.sum(axis=1),
        marginal_depth=p.sum(axis=0),
        edges_range=edges_r,
        edges_depth=edges_d,
        sample_count=int(f_range.size),
    )


def build_histogram(pairs: FeaturePairs, cfg: MiConfig) -> JointHistogram:
    return build_histogram_from_samples(pairs.f_range, pairs.f_depth, cfg)


def entropy(probabilities) -> float:
    """Shannon entropy in nats, with 0 ln 0 = 0."""
    p = np.asarray(probabilities, dtype=float).ravel()
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise InvalidDistributionError("probabilities must be finite and non-negative")
    if abs(p.sum() - 1.0) > 1e-9:
        raise InvalidDistributionError(f"probabilities sum to {p.sum()}, expected 1")
    nz = p[p > 0]
    return float(max(0.0, -np.sum(nz * np.log(nz))))


def mutual_information(hist: JointHistogram) -> float:
    mi = entropy(hist.marginal_range) + entropy(hist.marginal_depth) - entropy(hist.bins)
    if -1e-12 < mi < 0:
        return 0.0
    return float(mi)


def frame_pairs(frame: Frame, params: ExtrinsicParams, intr: DoubleSphereIntrinsics) -> FeaturePairs | None:
    try:
        return extract_feature_pairs(frame.depth, frame.cloud, params, intr, ranges=frame.ranges)
    except EmptyOverlapError:
        return None


def frame_mi_values(
    frames: Sequence[Frame], params: ExtrinsicParams, intr: DoubleSphereIntrinsics, cfg: MiConfig
) -> list[float | None]:
    """Per-frame MI in frame order; ``None`` marks an empty-overlap frame."""
    values = []
    for frame in frames:
        pairs = frame_pairs(frame, params, intr)
        values.append(None if pairs is None else mutual_information(build_histogram(pairs, cfg)))
    return values


def average_mi(
    frames: Sequence[Frame], params: ExtrinsicParams, intr: DoubleSphereIntrinsics, cfg: MiConfig = MiConfig()
) -> float:
    """Mean per-frame MI; empty-overlap frames count as zero.

    With ``cfg.pooled`` all frames' pairs go into one histogram instead.
    """
    if len(frames) == 0:
        raise PreconditionError("average_mi needs at least one frame")
    if cfg.pooled:
        pairs = [p for p in (frame_pairs(f, params, intr) for f in frames) if p is not None]
        if not pairs:
            raise EmptyOverlapError("no frame has any LiDAR/depth overlap")
        return mutual_information(
            build_histogram_from_samples(
                np.concatenate([p.f_range for p in pairs]), np.concatenate([p.f_depth for p in pairs]), cfg
            )
        )
    values = frame_mi_values(frames, params, intr, cfg)
    if all(v is None for v in values):
        raise EmptyOverlapError("no frame has any LiDAR/depth overlap")
    total = 0.0
    for v in values:
        total += 0.0 if v is None else v
    return total / len(values)


class MiObjective:
    """``average_mi`` bound to a frame set, callable on ExtrinsicParams; counts evaluations."""

    def __init__(self, frames: Sequence[Frame], intr: DoubleSphereIntrinsics, cfg: MiConfig = MiConfig()):
        if len(frames) == 0:
            raise PreconditionError("objective needs at least one frame")
        self.frames = tuple(frames)
        self.intr = intr
        self.cfg = cfg
        self.evaluations = 0

    def __call__(self, params: ExtrinsicParams) -> float:
        self.evaluations += 1
        return average_mi(self.frames, params, self.intr, self.cfg)

