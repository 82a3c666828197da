import math

import numpy as np
import pytest

from coec.errors import InvalidParameterError, OptimizationAbortedError, PreconditionError
from coec.geometry import ExtrinsicParams, apply_rotation_perturbation, rotation_error_deg, sample_rotation_perturbation
from coec.mi import MiConfig
from coec.optimizer import OptimizerConfig, calibrate, maximize

PEAK = np.array([0.03, -0.05, 0.08, 0.1, -0.2, 0.05])


def quadratic(params):
    d = params.as_array() - PEAK
    return -float(d @ d)


def test_quadratic_peak_recovered_to_step_tolerance():
    res = maximize(quadratic, ExtrinsicParams())
    assert res.converged
    np.testing.assert_allclose(res.theta_star.as_array()[:3], PEAK[:3], atol=1e-4)
    # translations are fixed by default
    np.testing.assert_array_equal(res.theta_star.translation, [0.0, 0.0, 0.0])
    assert res.objective_at_optimum >= res.objective_at_start


def test_all_six_free_with_powell():
    cfg = OptimizerConfig(free=(True,) * 6, engine="powell")
    res = maximize(quadratic, ExtrinsicParams(), cfg)
    np.testing.assert_allclose(res.theta_star.as_array(), PEAK, atol=1e-4)
    assert res.metadata["engine"] == "powell"


def test_masked_parameters_never_move():
    start = ExtrinsicParams(0.0, 0.0, 0.0, 0.3, 0.3, 0.3)
    seen = []

    def recording(p):
        seen.append(p.as_array())
        return quadratic(p)

    res = maximize(recording, start, OptimizerConfig(free=(True, False, True, False, False, False)))
    seen = np.array(seen)
    assert np.all(seen[:, [1, 3, 4, 5]] == start.as_array()[[1, 3, 4, 5]])
    assert res.theta_star.theta_y == 0.0
    assert res.metadata["free"] == ["theta_x", "theta_z"]


def test_evaluations_stay_inside_the_box():
    cfg = OptimizerConfig(rotation_bound=math.radians(2.0))
    start = ExtrinsicParams()
    lo, hi = cfg.bounds_around(start)
    seen = []

    def far_peak(p):
        seen.append(p.as_array())
        return -float(np.sum((p.as_array()[:3] - 1.0) ** 2))

    res = maximize(far_peak, start, cfg)
    seen = np.array(seen)
    assert np.all(seen >= lo - 1e-15) and np.all(seen <= hi + 1e-15)
    # the best point sits on the upper face
    np.testing.assert_allclose(res.theta_star.as_array()[:3], hi[:3], atol=1e-9)


def test_constant_objective_stays_at_start():
    start = ExtrinsicParams(0.1, 0.2, 0.3)
    res = maximize(lambda p: 1.5, start)
    assert res.converged
    assert res.theta_star == start
    assert res.objective_at_optimum == 1.5


def test_non_finite_objective_aborts():
    calls = []

    def broken(p):
        calls.append(p)
        return float("nan") if len(calls) > 3 else 0.0

    with pytest.raises(OptimizationAbortedError):
        maximize(broken, ExtrinsicParams())


def test_budget_exhaustion_is_reported():
    cfg = OptimizerConfig(max_evals_per_param=4, xtol_rotation=1e-12)
    res = maximize(quadratic, ExtrinsicParams(), cfg)
    assert not res.converged
    assert res.evaluations <= cfg.max_evals
    assert res.metadata["status"] == "maxeval_reached"


def test_metadata_keys():
    res = maximize(quadratic, ExtrinsicParams())
    keys = {"engine", "status", "initial_trust_radius", "interpolation_points", "max_evals", "free"}
    assert keys <= set(res.metadata)
    assert res.metadata["interpolation_points"] == 7


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(free=(False,) * 6),
        dict(free=(True,) * 5),
        dict(rotation_bound=0.0),
        dict(engine="lbfgs"),
        dict(restarts=-1),
    ],
)
def test_bad_config_rejected(kwargs):
    with pytest.raises(InvalidParameterError):
        OptimizerConfig(**kwargs)


def test_calibrate_needs_frames(rig):
    with pytest.raises(PreconditionError):
        calibrate((), rig.truth, rig.intrinsics)


def test_calibration_is_bit_identical(frames, rig):
    start = apply_rotation_perturbation(rig.truth, sample_rotation_perturbation(4.0, np.random.default_rng(0)))
    a = calibrate(frames[:3], start, rig.intrinsics)
    b = calibrate(frames[:3], start, rig.intrinsics)
    assert a.theta_star.as_array().tobytes() == b.theta_star.as_array().tobytes()
    assert a.evaluations == b.evaluations


def test_start_at_truth_stays_near_truth(frames, rig):
    res = calibrate(frames, rig.truth, rig.intrinsics)
    assert rotation_error_deg(res.theta_star, rig.truth) < 0.3
    assert res.objective_at_optimum >= res.objective_at_start


@pytest.mark.parametrize("bins", [25, 50, 100])
def test_recovery_across_bin_counts(frames, rig, bins):
    start = apply_rotation_perturbation(rig.truth, sample_rotation_perturbation(5.0, np.random.default_rng(bins)))
    res = calibrate(frames, start, rig.intrinsics, MiConfig(bins=bins))
    assert rotation_error_deg(res.theta_star, rig.truth) < 0.5
