"""Self-diagnosis: MI value, finite-difference slope and peakedness, and the failure classifier."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .camera import DoubleSphereIntrinsics
from .errors import InvalidParameterError, NoSeparatingThresholdError, PreconditionError
from .features import Frame
from .geometry import ExtrinsicParams
from .mi import MiConfig, MiObjective

DEFAULT_STEP = math.radians(0.25)
DEFAULT_TRANSLATION_STEP = 0.01
ROTATION_INDICES = (0, 1, 2)

Objective = Callable[[ExtrinsicParams], float]


@dataclass(frozen=True)
class DiagnosticsReport:
    mi_value: float
    grad: tuple[float, ...]
    grad_norm: float
    curvature: tuple[float, ...]
    curvature_agg: float
    step_size: float
    parameters: tuple[int, ...] = ROTATION_INDICES

    def __post_init__(self):
        values = [self.mi_value, self.grad_norm, self.curvature_agg, *self.grad, *self.curvature]
        if not all(math.isfinite(v) for v in values):
            raise InvalidParameterError("diagnostics must be finite")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grad"] = list(self.grad)
        d["curvature"] = list(self.curvature)
        d["parameters"] = list(self.parameters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DiagnosticsReport":
        return cls(
            mi_value=float(d["mi_value"]),
            grad=tuple(d["grad"]),
            grad_norm=float(d["grad_norm"]),
            curvature=tuple(d["curvature"]),
            curvature_agg=float(d["curvature_agg"]),
            step_size=float(d["step_size"]),
            parameters=tuple(d.get("parameters", ROTATION_INDICES)),
        )


@dataclass(frozen=True)
class ClassifierThresholds:
    mi_lim: float
    grad_lim: float
    curv_lim: float
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        # an infinite limit disables its clause; nan never compares sensibly
        if any(math.isnan(v) for v in (self.mi_lim, self.grad_lim, self.curv_lim)):
            raise InvalidParameterError("thresholds must not be nan")


def _step_for(index: int, h: float, h_translation: float) -> float:
    return h if index < 3 else h_translation


def _shifted(params: ExtrinsicParams, index: int, delta: float) -> ExtrinsicParams:
    values = params.as_array()
    values[index] += delta
    return ExtrinsicParams.from_array(values)


def _probe(objective: Objective, params: ExtrinsicParams, h: float, indices, h_translation: float):
    if h <= 0:
        raise PreconditionError(f"finite-difference step must be positive, got {h}")
    center = objective(params)
    plus, minus, steps = [], [], []
    for i in indices:
        step = _step_for(i, h, h_translation)
        plus.append(objective(_shifted(params, i, step)))
        minus.append(objective(_shifted(params, i, -step)))
        steps.append(step)
    return center, np.array(plus), np.array(minus), np.array(steps)


def fd_gradient(
    objective: Objective,
    params: ExtrinsicParams,
    h: float = DEFAULT_STEP,
    indices: Sequence[int] = ROTATION_INDICES,
    h_translation: float = DEFAULT_TRANSLATION_STEP,
) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` per parameter."""
    if h <= 0:
        raise PreconditionError(f"finite-difference step must be positive, got {h}")
    out = []
    for i in indices:
        step = _step_for(i, h, h_translation)
        out.append((objective(_shifted(params, i, step)) - objective(_shifted(params, i, -step))) / (2.0 * step))
    return np.array(out)


def fd_curvature(
    objective: Objective,
    params: ExtrinsicParams,
    h: float = DEFAULT_STEP,
    indices: Sequence[int] = ROTATION_INDICES,
    h_translation: float = DEFAULT_TRANSLATION_STEP,
) -> np.ndarray:
    """Peakedness ``-(f(x+h) - 2 f(x) + f(x-h)) / h^2``; positive at a concave peak."""
    center, plus, minus, steps = _probe(objective, params, h, indices, h_translation)
    return -(plus - 2.0 * center + minus) / steps**2


def report_from_objective(
    objective: Objective,
    params: ExtrinsicParams,
    h: float = DEFAULT_STEP,
    indices: Sequence[int] = ROTATION_INDICES,
    h_translation: float = DEFAULT_TRANSLATION_STEP,
) -> DiagnosticsReport:
    """All three metrics from the shared 2k + 1 objective evaluations."""
    center, plus, minus, steps = _probe(objective, params, h, indices, h_translation)
    grad = (plus - minus) / (2.0 * steps)
    curv = -(plus - 2.0 * center + minus) / steps**2
    return DiagnosticsReport(
        mi_value=float(center),
        grad=tuple(float(g) for g in grad),
        grad_norm=float(np.linalg.norm(grad)),
        curvature=tuple(float(c) for c in curv),
        curvature_agg=float(np.mean(curv)),
        step_size=float(h),
        parameters=tuple(int(i) for i in indices),
    )


def diagnose(
    frames: Sequence[Frame],
    params: ExtrinsicParams,
    intr: DoubleSphereIntrinsics,
    mi_cfg: MiConfig = MiConfig(),
    h: float = DEFAULT_STEP,
    indices: Sequence[int] = ROTATION_INDICES,
) -> DiagnosticsReport:
    return report_from_objective(MiObjective(frames, intr, mi_cfg), params, h, indices)


def classify(report: DiagnosticsReport, thr: ClassifierThresholds) -> str:
    """``"failure"`` if any metric is strictly past its limit, else ``"success"``."""
    failed = (
        report.mi_value < thr.mi_lim
        or report.grad_norm > thr.grad_lim
        or report.curvature_agg < thr.curv_lim
    )
    return "failure" if failed else "success"


def fit_thresholds(
    reports_at_truth: Sequence[DiagnosticsReport], reports_at_error: Sequence[DiagnosticsReport]
) -> ClassifierThresholds:
    """Midpoint between the worst truth-side and best error-side value of each metric.

    A metric whose two populations overlap gets a disabled (infinite) limit;
    the per-metric margins are returned in ``metadata``.
    """
    if not reports_at_truth or not reports_at_error:
        raise PreconditionError("both report lists must be non-empty")

    def split(lower_is_failure, truth, error):
        worst_truth = min(truth) if lower_is_failure else max(truth)
        best_error = max(error) if lower_is_failure else min(error)
        margin = (worst_truth - best_error) if lower_is_failure else (best_error - worst_truth)
        if margin > 0:
            limit = 0.5 * (worst_truth + best_error)
        else:
            limit = -math.inf if lower_is_failure else math.inf
        return limit, float(margin)

    mi_lim, mi_margin = split(True, [r.mi_value for r in reports_at_truth], [r.mi_value for r in reports_at_error])
    grad_lim, grad_margin = split(
        False, [r.grad_norm for r in reports_at_truth], [r.grad_norm for r in reports_at_error]
    )
    curv_lim, curv_margin = split(
        True, [r.curvature_agg for r in reports_at_truth], [r.curvature_agg for r in reports_at_error]
    )
    margins = {"mi": mi_margin, "grad": grad_margin, "curvature": curv_margin}
    if all(m <= 0 for m in margins.values()):
        raise NoSeparatingThresholdError(f"no metric separates the populations (margins {margins})")
    return ClassifierThresholds(
        mi_lim,
        grad_lim,
        curv_lim,
        metadata={
            "margins": margins,
            "n_truth": len(reports_at_truth),
            "n_error": len(reports_at_error),
            "step_size": reports_at_truth[0].step_size,
        },
    )
