import math

import numpy as np
import pytest

from coec import synthetic as S
from coec.camera import DoubleSphereIntrinsics
from coec.features import range_features
from coec.geometry import ExtrinsicParams, apply_rotation_perturbation, sample_rotation_perturbation
from coec.mi import MiConfig, average_mi, build_histogram_from_samples, entropy

PIN = DoubleSphereIntrinsics.pinhole(40.0, 40.0, 20.0, 15.0, 40, 30)
FLAT_RIG = S.SensorRig(truth=ExtrinsicParams(), intrinsics=PIN)


def test_complexity_one_is_ground_plane_only():
    scene = S.generate_scene(3, 1)
    assert scene.primitives == (S.Plane((0.0, 0.0, 1.0), 0.0),)
    with pytest.raises(ValueError):
        S.generate_scene(3, 0)


def test_generators_are_deterministic():
    assert S.generate_scene(5, 30) == S.generate_scene(5, 30)
    assert S.generate_scene(5, 30) != S.generate_scene(6, 30)
    scene = S.generate_scene(5, 30)
    traj = S.straight_trajectory(2)
    a, b = S.make_frameset(scene, S.SensorRig(), traj, seed=4), S.make_frameset(scene, S.SensorRig(), traj, seed=4)
    for fa, fb in zip(a, b):
        np.testing.assert_array_equal(fa.depth.values, fb.depth.values)
        np.testing.assert_array_equal(fa.cloud.points, fb.cloud.points)


def test_rendered_depth_is_informative():
    scene = S.generate_scene(2, 20)
    rig = S.SensorRig()
    noise = S.NoiseConfig(depth_noise=0.0)
    depth = S.render_depth(scene, rig, rig.camera_pose(S.sensor_pose(0.0, 0.0, 1.8)), noise)
    vals = depth.values[depth.mask]
    # minmax bins so the entropy reflects the depth spread, not rank uniformity
    h = build_histogram_from_samples(vals, vals, MiConfig(bins=50, bin_policy="minmax"))
    assert entropy(h.marginal_depth) > 2.0


def test_nothing_in_view():
    far_away = S.Scene((S.Plane((1.0, 0.0, 0.0), -200.0),))
    pose = S.sensor_pose(0.0, 0.0, 1.0)
    depth = S.render_depth(far_away, FLAT_RIG, pose)
    assert not depth.mask.any()
    assert len(S.simulate_lidar(far_away, FLAT_RIG, pose)) == 0


def test_fronto_parallel_plane_has_constant_depth():
    wall = S.Scene((S.Plane((1.0, 0.0, 0.0), 5.0),))
    depth = S.render_depth(wall, FLAT_RIG, S.sensor_pose(0.0, 0.0, 1.0), depth_kind="z")
    assert depth.mask.all()
    assert np.all(depth.values == depth.values[0, 0])


def test_slanted_plane_is_monotone_along_scanline():
    # the plane x + y = 5 recedes toward the right of the image
    slant = S.Scene((S.Plane((math.sqrt(0.5), math.sqrt(0.5), 0.0), 5.0 * math.sqrt(0.5)),))
    narrow_pin = DoubleSphereIntrinsics.pinhole(80.0, 80.0, 20.0, 15.0, 40, 30)
    narrow = S.SensorRig(truth=ExtrinsicParams(), intrinsics=narrow_pin)
    for kind in ("range", "z"):
        depth = S.render_depth(slant, narrow, S.sensor_pose(0.0, 0.0, 1.0), depth_kind=kind)
        assert depth.mask.all()
        assert np.all(np.diff(depth.values[15]) > 0)


def test_ground_returns_lie_on_the_plane():
    sigma = 0.02
    pose = S.sensor_pose(0.0, 0.0, 1.8)
    cloud = S.simulate_lidar(S.generate_scene(0, 1), FLAT_RIG, pose, sigma, np.random.default_rng(1))
    assert len(cloud) > 1000
    world_z = cloud.points @ pose.rotation.T[:, 2] + pose.translation[2]
    assert np.max(np.abs(world_z)) < 4 * sigma


def test_noiseless_ranges_match_ray_plane_distance():
    pose = S.sensor_pose(0.0, 0.0, 1.8)
    cloud = S.simulate_lidar(S.generate_scene(0, 1), FLAT_RIG, pose, range_sigma=0.0)
    dirs = cloud.points / np.linalg.norm(cloud.points, axis=1, keepdims=True)
    down = -(dirs @ pose.rotation.T[:, 2])
    np.testing.assert_allclose(range_features(cloud), 1.8 / down, rtol=0, atol=1e-9)


def test_clouds_respect_max_range(long_scene):
    rig = S.SensorRig(beams=S.BeamPattern(S.BeamPattern.default().ring_elevations, math.radians(1.0), 25.0))
    cloud = S.simulate_lidar(long_scene, rig, S.sensor_pose(50.0, 0.0, 1.8), 0.5, np.random.default_rng(0))
    assert len(cloud) > 0
    assert range_features(cloud).max() <= 25.0


def test_single_pose_gives_one_frame(scene, rig):
    assert len(S.make_frameset(scene, rig, S.straight_trajectory(1))) == 1
    with pytest.raises(ValueError):
        S.make_frameset(scene, rig, [])


@pytest.mark.parametrize("distortion", [None, "inverse", "log"])
def test_truth_beats_sixteen_three_degree_errors(scene, rig, distortion):
    noise = S.NoiseConfig(depth_distortion=distortion)
    frames = S.make_frameset(scene, rig, S.straight_trajectory(5, spacing=3.0), noise, seed=1)
    at_truth = average_mi(frames, rig.truth, rig.intrinsics)
    rng = np.random.default_rng(2)
    for _ in range(16):
        wrong = apply_rotation_perturbation(rig.truth, sample_rotation_perturbation(3.0, rng))
        assert average_mi(frames, wrong, rig.intrinsics) < at_truth


def test_truth_is_argmax_on_one_degree_grid(frames, rig):
    truth = rig.truth.as_array()
    for axis in range(3):
        scores = []
        for step in range(-5, 6):
            values = truth.copy()
            values[axis] += math.radians(step)
            scores.append(average_mi(frames, ExtrinsicParams.from_array(values), rig.intrinsics))
        assert int(np.argmax(scores)) == 5, (axis, scores)


def test_disturbed_sequence_switches_truth():
    cfg = S.SynthConfig(complexity=20, road_length=60.0, frames=4, disturb_at_frame=2, disturb_deg=5.0)
    frames, truths, rig = S.synthesize_sequence(cfg, seed=3)
    assert len(frames) == 4
    assert truths[0] == truths[1] == rig.truth
    assert truths[2] == truths[3] != rig.truth
    plain, _, _ = S.synthesize_sequence(S.SynthConfig(complexity=20, road_length=60.0, frames=4), seed=3)
    # LiDAR clouds do not depend on the extrinsics
    np.testing.assert_array_equal(plain[3].cloud.points, frames[3].cloud.points)
    np.testing.assert_array_equal(plain[1].depth.values, frames[1].depth.values)
    assert not np.array_equal(plain[3].depth.values, frames[3].depth.values)


def test_synth_config_validation():
    with pytest.raises(ValueError):
        S.SynthConfig(frames=0)
    with pytest.raises(ValueError):
        S.SynthConfig(depth_distortion="cubic")
    with pytest.raises(ValueError):
        S.SynthConfig(depth_format="jpg")
