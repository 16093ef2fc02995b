import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from genservo import inference as inf
from genservo import simulator as sim
from genservo.errors import IKNotConverged, InsufficientDetections
from genservo.geometry import Pose, pose_distance, random_rotation
from genservo.model import forward_kinematics, frame_gauge, predict_image, predict_image_from_pose, scale_gauge


def joints_near(world, rng, spread=0.3):
    return sim.clip(world, world.home + rng.uniform(-spread, spread, world.n))


# -- pose from image -----------------------------------------------------------


def test_pose_round_trip_from_noiseless_image(ur5_clean):
    model = ur5_clean.true_model
    j = joints_near(ur5_clean, np.random.default_rng(0))
    truth = forward_kinematics(model.kinematics, j)
    got = inf.infer_pose_from_image(model, predict_image(model, j).uv, initial=forward_kinematics(model.kinematics, ur5_clean.home))
    assert pose_distance(got, truth) < 1e-6


def test_three_detections_are_not_enough(ur5_clean):
    px = np.full((2, 12, 2), np.nan)
    px[0, :3] = 100.0
    with pytest.raises(InsufficientDetections):
        inf.infer_pose_from_image(ur5_clean.true_model, px)


def test_pose_residual_sits_at_the_noise_floor(ur5):
    model = ur5.true_model
    rng = np.random.default_rng(1)
    rms = []
    for _ in range(20):
        j = joints_near(ur5, rng)
        obs = sim.observe(ur5, j, rng)
        pose = inf.infer_pose_from_image(model, obs.pixels, initial=forward_kinematics(model.kinematics, j))
        pred = predict_image_from_pose(model.features, model.cameras, pose).uv
        rms.append(inf.image_rms(pred, obs.pixels))
    # RMS of the 2D distance per feature; 48 coordinates minus 6 pose
    # parameters leave an expected 0.5 * sqrt(2) * sqrt(42 / 48) = 0.661
    assert 0.6 < np.mean(rms) < 0.72


# -- joints from pose --------------------------------------------------------------


def test_ik_from_the_answer_returns_it(ur5_clean):
    model = ur5_clean.true_model
    j0 = joints_near(ur5_clean, np.random.default_rng(2))
    got = inf.infer_joints_from_pose(model, forward_kinematics(model.kinematics, j0), j0)
    assert np.allclose(got, j0, atol=1e-9)


def test_ik_from_a_nearby_start_matches_the_pose(ur5_clean):
    model = ur5_clean.true_model
    rng = np.random.default_rng(3)
    j0 = joints_near(ur5_clean, rng)
    target = forward_kinematics(model.kinematics, j0)
    got = inf.infer_joints_from_pose(model, target, j0 + rng.uniform(-0.1, 0.1, 6))
    assert pose_distance(forward_kinematics(model.kinematics, got), target) < 1e-6


def test_unreachable_pose_reports_best_effort(ur5_clean):
    model = ur5_clean.true_model
    far = Pose(np.eye(3), [10.0, 0.0, 0.0])  # ten times the arm's reach
    with pytest.raises(IKNotConverged) as info:
        inf.infer_joints_from_pose(model, far, ur5_clean.home, restarts=2)
    assert info.value.best is not None and info.value.residual > 1.0


# -- joints from image ------------------------------------------------------------


def test_joints_from_rendered_image_reproduce_it(ur5_clean):
    model = ur5_clean.true_model
    rng = np.random.default_rng(4)
    j = joints_near(ur5_clean, rng)
    target = predict_image(model, j).uv
    got = inf.infer_joints_from_image(model, inf.ServoTarget(target), j + rng.uniform(-0.05, 0.05, 6))
    assert np.max(np.abs(predict_image(model, got).uv - target)) < 1e-6


@settings(max_examples=10)
@given(st.integers(0, 2**32 - 1))
def test_image_space_round_trip(seed):
    world = sim.make_world("ur5_sim", noise={"pixel_sigma": 0.0})
    model = world.true_model
    rng = np.random.default_rng(seed)
    j = sim.random_joints(world, rng)
    target = predict_image(model, j).uv
    got = inf.infer_joints_from_image(model, target, j + rng.uniform(-0.05, 0.05, 6))
    assert np.max(np.abs(predict_image(model, got).uv - target)) < 1e-6


def test_current_image_as_target_needs_no_motion(ur5_clean):
    model = ur5_clean.true_model
    j = joints_near(ur5_clean, np.random.default_rng(5))
    got = inf.infer_joints_from_image(model, predict_image(model, j).uv, j)
    assert np.max(np.abs(got - j)) < 1e-9


def test_infeasible_target_returns_best_fit_with_residual(ur5_clean):
    model = ur5_clean.true_model
    rng = np.random.default_rng(6)
    j = joints_near(ur5_clean, rng)
    target = predict_image(model, j).uv + rng.normal(0, 5.0, (2, 12, 2))  # no rigid body explains this
    est = inf.infer_joints_from_image(model, target, j, return_estimate=True)
    assert est.converged and est.residual_px > 1.0


def test_target_needs_four_coordinates():
    px = np.full((1, 5, 2), np.nan)
    px[0, :3] = 1.0
    with pytest.raises(InsufficientDetections):
        inf.ServoTarget(px)


# -- servo step ---------------------------------------------------------------------


def test_step_toward_current_image_is_zero(ur5_clean):
    model = ur5_clean.true_model
    j = joints_near(ur5_clean, np.random.default_rng(7))
    px = predict_image(model, j).uv
    delta, _, _ = inf.servo_step(model, px, inf.ServoTarget(px), joints=j)
    assert np.max(np.abs(delta)) < 1e-9


def test_gain_must_be_in_unit_interval(ur5_clean):
    px = predict_image(ur5_clean.true_model, ur5_clean.home).uv
    with pytest.raises(ValueError):
        inf.servo_step(ur5_clean.true_model, px, inf.ServoTarget(px), gain=0.0, joints=ur5_clean.home)


def test_pure_image_mode_infers_current_joints(ur5_clean):
    model = ur5_clean.true_model
    rng = np.random.default_rng(8)
    j = joints_near(ur5_clean, rng, 0.1)
    px = predict_image(model, j).uv
    goal = predict_image(model, joints_near(ur5_clean, rng, 0.1)).uv
    _, _, current = inf.servo_step(model, px, inf.ServoTarget(goal), joint_guess=ur5_clean.home)
    assert np.max(np.abs(predict_image(model, current).uv - px)) < 1e-6


# -- servo loop ---------------------------------------------------------------------


def servo(world, model, seed, **kw):
    rng = np.random.default_rng(seed)
    start, goal = joints_near(world, rng, 0.2), joints_near(world, rng, 0.2)
    target = inf.ServoTarget(sim.render(world, goal))
    robot = inf.SimRobot(world, start, seed=seed)
    return inf.servo_loop(model, robot, target, **kw)


def test_exact_model_reaches_target_in_one_step_at_full_gain(ur5_clean):
    trace = servo(ur5_clean, ur5_clean.true_model, 0, gain=1.0, clamp=None, stop_px=1e-6)
    assert trace.rms_px[0] < 1e-6
    assert trace.steps <= 2


def test_half_gain_halves_the_error_each_step(ur5_clean):
    trace = servo(ur5_clean, ur5_clean.true_model, 1, gain=0.5, clamp=None, max_steps=8)
    errs = np.array([trace.initial_rms_px] + trace.rms_px)
    ratios = errs[4:8] / errs[3:7]
    assert np.all(np.abs(ratios - 0.5) < 0.05), ratios


def test_noiseless_error_never_increases(ur5_clean):
    trace = servo(ur5_clean, ur5_clean.true_model, 2, max_steps=30, settle_rad=0.0)
    assert all(b <= a + 1e-9 for a, b in zip(trace.rms_px, trace.rms_px[1:]))
    assert trace.final_rms_px < 1e-6


def test_servo_is_indifferent_to_the_model_gauge(ur5_clean):
    model = ur5_clean.true_model
    g = Pose(random_rotation(np.random.default_rng(0)), [0.3, -0.2, 0.5])
    base = servo(ur5_clean, model, 3, max_steps=10)
    for other in (scale_gauge(model, 2.5), frame_gauge(model, g)):
        trace = servo(ur5_clean, other, 3, max_steps=10)
        assert trace.steps == base.steps
        assert np.allclose(trace.rms_px, base.rms_px, atol=1e-6)


def test_actuation_noise_stays_bounded(ur5_clean):
    rng = np.random.default_rng(4)
    world = ur5_clean
    goal = joints_near(world, rng, 0.2)
    target = inf.ServoTarget(sim.render(world, goal))
    robot = inf.SimRobot(world, joints_near(world, rng, 0.2), seed=4, actuation_noise=0.001)
    trace = inf.servo_loop(world.true_model, robot, target, max_steps=200, settle_rad=0.0)
    assert trace.steps == 200
    tail = np.array(trace.rms_px[50:])
    assert np.all(np.isfinite(tail)) and tail.max() < 10.0
    assert np.median(tail) < 3.0


def test_trace_csv(tmp_path, ur5_clean):
    trace = servo(ur5_clean, ur5_clean.true_model, 5, max_steps=3)
    path = tmp_path / "trace.csv"
    trace.to_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0][:3] == ["step", "rms_px", "command_0"]
    assert len(rows) == trace.steps + 2
    assert float(rows[-1][1]) == trace.final_rms_px
