"""Bounded derivative-free maximization of the MI objective over the extrinsics."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import nlopt
import numpy as np
from scipy import optimize as sp_optimize

from .camera import DoubleSphereIntrinsics
from .errors import InvalidParameterError, OptimizationAbortedError, PreconditionError
from .features import Frame
from .geometry import ExtrinsicParams
from .mi import MiConfig, MiObjective

log = logging.getLogger(__name__)

ENGINES = ("bobyqa", "powell")
PARAM_NAMES = ("theta_x", "theta_y", "theta_z", "t_x", "t_y", "t_z")
ROTATION_ONLY = (True, True, True, False, False, False)


@dataclass(frozen=True)
class OptimizerConfig:
    """Search box half-widths are relative to the starting point.

    ``initial_step`` is the starting trust-region radius as a fraction of each
    half-width; ``max_evals_per_param`` scales the evaluation budget with the
    number of free parameters.
    """

    rotation_bound: float = math.radians(15.0)
    translation_bound: float = 0.5
    free: tuple[bool, ...] = ROTATION_ONLY
    xtol_rotation: float = 1e-4
    xtol_translation: float = 1e-4
    max_evals_per_param: int = 500
    initial_step: float = 0.2
    restarts: int = 3
    engine: str = "bobyqa"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "free", tuple(bool(f) for f in self.free))
        if len(self.free) != 6:
            raise InvalidParameterError("free mask needs six entries")
        if not any(self.free):
            raise InvalidParameterError("at least one parameter must be free")
        if self.rotation_bound <= 0 or self.translation_bound <= 0:
            raise InvalidParameterError("bounds must be positive")
        if self.xtol_rotation <= 0 or self.xtol_translation <= 0:
            raise InvalidParameterError("step tolerance must be positive")
        if self.max_evals_per_param < 1:
            raise InvalidParameterError("evaluation budget must be positive")
        if self.restarts < 0:
            raise InvalidParameterError("restarts must be >= 0")
        if not 0 < self.initial_step <= 1:
            raise InvalidParameterError("initial_step must be in (0, 1]")
        if self.engine not in ENGINES:
            raise InvalidParameterError(f"unknown engine {self.engine!r}; expected one of {ENGINES}")

    @property
    def free_indices(self) -> np.ndarray:
        return np.flatnonzero(self.free)

    @property
    def half_widths(self) -> np.ndarray:
        return np.array([self.rotation_bound] * 3 + [self.translation_bound] * 3)

    @property
    def xtols(self) -> np.ndarray:
        return np.array([self.xtol_rotation] * 3 + [self.xtol_translation] * 3)

    @property
    def max_evals(self) -> int:
        return self.max_evals_per_param * int(sum(self.free))

    def bounds_around(self, theta0: ExtrinsicParams) -> tuple[np.ndarray, np.ndarray]:
        center = theta0.as_array()
        return center - self.half_widths, center + self.half_widths


@dataclass(frozen=True)
class CalibrationResult:
    theta_star: ExtrinsicParams
    objective_at_optimum: float
    objective_at_start: float
    evaluations: int
    elapsed: float
    converged: bool
    metadata: dict = field(default_factory=dict, compare=False)


class _Wrapped:
    """Maps the scaled search vector to ExtrinsicParams and tracks the best point."""

    def __init__(self, objective, theta0: ExtrinsicParams, cfg: OptimizerConfig):
        self.objective = objective
        self.center = theta0.as_array()
        self.free = cfg.free_indices
        self.scale = cfg.half_widths[self.free]
        self.evaluations = 0
        self.best_value = -math.inf
        self.best_z = np.zeros(len(self.free))

    def params(self, z) -> ExtrinsicParams:
        values = self.center.copy()
        values[self.free] += np.clip(np.asarray(z, dtype=float), -1.0, 1.0) * self.scale
        return ExtrinsicParams.from_array(values)

    def __call__(self, z) -> float:
        value = self.objective(self.params(z))
        self.evaluations += 1
        if not math.isfinite(value):
            raise OptimizationAbortedError(f"objective returned {value} at evaluation {self.evaluations}")
        if value > self.best_value:
            self.best_value = value
            self.best_z = np.array(z, dtype=float)
        return value


_NLOPT_STATUS = {
    nlopt.SUCCESS: "success",
    nlopt.FTOL_REACHED: "ftol_reached",
    nlopt.XTOL_REACHED: "xtol_reached",
    nlopt.MAXEVAL_REACHED: "maxeval_reached",
    nlopt.STOPVAL_REACHED: "stopval_reached",
    nlopt.MAXTIME_REACHED: "maxtime_reached",
}


def _run_bobyqa(fn: _Wrapped, cfg: OptimizerConfig, xtol: np.ndarray) -> tuple[str, bool]:
    """BOBYQA, warm-restarted from the incumbent while a restart still improves it.

    Histogram MI is rough at sub-bin scales, which can collapse the trust
    region early; a fresh radius from the best point escapes such stalls.
    """
    n = len(fn.free)
    nlopt.srand(cfg.seed)
    status = "not_started"
    for attempt in range(cfg.restarts + 1):
        budget = cfg.max_evals - fn.evaluations
        if budget <= 2 * n + 1:
            return "maxeval_reached", False
        before = fn.best_value
        opt = nlopt.opt(nlopt.LN_BOBYQA, n)
        opt.set_lower_bounds([-1.0] * n)
        opt.set_upper_bounds([1.0] * n)
        opt.set_max_objective(lambda z, grad: fn(z))
        opt.set_xtol_abs(xtol.tolist())
        opt.set_maxeval(budget)
        opt.set_initial_step([cfg.initial_step] * n)
        try:
            opt.optimize(fn.best_z.copy())
            code = opt.last_optimize_result()
            status = _NLOPT_STATUS.get(code, str(code))
        except nlopt.RoundoffLimited:
            status = "roundoff_limited"
        if status in ("maxeval_reached", "maxtime_reached"):
            return status, False
        if attempt > 0 and not fn.best_value > before:
            break
    return status, True


def _run_powell(fn: _Wrapped, cfg: OptimizerConfig, xtol: np.ndarray) -> tuple[str, bool]:
    n = len(fn.free)
    res = sp_optimize.minimize(
        lambda z: -fn(z),
        np.zeros(n),
        method="Powell",
        bounds=[(-1.0, 1.0)] * n,
        options={
            "xtol": float(np.min(xtol)),
            "ftol": 1e-12,
            "maxfev": cfg.max_evals,
            "direc": np.eye(n) * cfg.initial_step,
        },
    )
    return str(res.message), bool(res.success)


def maximize(
    objective: Callable[[ExtrinsicParams], float], theta0: ExtrinsicParams, cfg: OptimizerConfig = OptimizerConfig()
) -> CalibrationResult:
    """Maximize ``objective`` inside the box around ``theta0``; fixed parameters never move.

    The returned point is the best one evaluated, so it never scores below
    ``theta0``. Exhausting the budget yields ``converged=False`` rather than
    an error.
    """
    start = time.perf_counter()
    fn = _Wrapped(objective, theta0, cfg)
    f0 = fn(np.zeros(len(fn.free)))
    xtol = cfg.xtols[fn.free] / fn.scale
    runner = _run_bobyqa if cfg.engine == "bobyqa" else _run_powell
    status, converged = runner(fn, cfg, xtol)
    if fn.best_value > f0:
        theta_star, f_star = fn.params(fn.best_z), fn.best_value
    else:
        theta_star, f_star = theta0, f0
    elapsed = time.perf_counter() - start
    log.debug("%s finished (%s) after %d evaluations: %.6f -> %.6f", cfg.engine, status, fn.evaluations, f0, f_star)
    return CalibrationResult(
        theta_star=theta_star,
        objective_at_optimum=f_star,
        objective_at_start=f0,
        evaluations=fn.evaluations,
        elapsed=elapsed,
        converged=converged,
        metadata={
            "engine": cfg.engine,
            "status": status,
            "initial_trust_radius": cfg.initial_step,
            "interpolation_points": 2 * len(fn.free) + 1 if cfg.engine == "bobyqa" else None,
            "max_evals": cfg.max_evals,
            "free": [PARAM_NAMES[i] for i in fn.free],
        },
    )


def calibrate(
    frames: Sequence[Frame],
    theta0: ExtrinsicParams,
    intr: DoubleSphereIntrinsics,
    mi_cfg: MiConfig = MiConfig(),
    opt_cfg: OptimizerConfig = OptimizerConfig(),
) -> CalibrationResult:
    if len(frames) == 0:
        raise PreconditionError("calibration needs at least one frame")
    return maximize(MiObjective(frames, intr, mi_cfg), theta0, opt_cfg)
