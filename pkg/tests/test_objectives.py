"""Analytic gradients of every learning and inference objective against finite differences."""

import numpy as np
import pytest

from genservo import dual as ad
from genservo import inference as inf
from genservo import learning as L
from genservo import simulator as sim
from genservo.geometry import pose_from_params
from genservo.model import forward_kinematics, forward_kinematics_batch
from genservo.objectives import PixelProblem, PoseProblem, pixel_loss

from .oracles import central_difference, relative_error

POINTS = 20
STEP = 1e-3  # spread of the random evaluation points around the start


@pytest.fixture(scope="module")
def scene(ur5):
    data = sim.collect_random(ur5, 5, seed=3)
    truth = ur5.true_model
    return data, truth


def worst_gradient_error(fg, x0, seed, spread=STEP):
    """Largest relative error between analytic and central-difference gradients."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(POINTS):
        x = x0 + rng.normal(0.0, spread, size=x0.shape)
        f, g = fg(x)
        assert np.isfinite(f)
        fd = central_difference(lambda v: fg(v)[0], x)
        worst = max(worst, relative_error(g, fd))
    return worst


def full_problem(model, data, frozen=frozenset(), **extra):
    return L._full_problem(model, data, frozen, **extra)


def stage_one_case(data, truth):
    r, t = forward_kinematics_batch(truth.kinematics, data.joints)
    er, et = truth.extrinsics_arrays()
    p = PixelProblem(
        data.pixels,
        truth.features,
        truth.intrinsics_array(),
        er,
        et,
        pose_rotation=r,
        pose_translation=t,
        free_features=np.ones(truth.m, bool),
        free_intrinsics=np.ones(truth.c, bool),
        free_extrinsics=np.ones(truth.c, bool),
        free_poses=True,
    )
    return p.value_and_gradient, p.initial_vector(), STEP


def full_case(data, truth):
    p = full_problem(truth, data)
    assert p.size == truth.parameter_count
    return p.value_and_gradient, p.initial_vector(), STEP


def frozen_case(data, truth):
    p = full_problem(truth, data, frozenset({"kinematics", "camera:0", "feature:3"}))
    return p.value_and_gradient, p.initial_vector(), STEP


def unobserved_case(data, truth):
    actions = np.diff(data.joints, axis=0) + 0.01
    p = full_problem(
        truth, data, free_joints=True, joint_penalty=50.0, actions=actions, joint_anchor=data.joints[0] + 0.02
    )
    return p.value_and_gradient, p.initial_vector(), STEP


def kinematic_case(data, truth):
    poses = [forward_kinematics(truth.kinematics, j) for j in data.joints]
    base = pose_from_params(truth.kinematics.base)
    p = PoseProblem(
        data.joints,
        np.array([q.rotation for q in poses]),
        np.array([q.translation for q in poses]),
        base.rotation,
        base.translation,
        truth.kinematics.links * 1.01,
        np.eye(3),
        np.zeros(3),
    )
    return p.evaluate, p.initial_vector(), STEP


def pose_image_case(data, truth):
    fit = inf._PoseImageFit(truth, data.pixels[1], forward_kinematics(truth.kinematics, data.joints[0]))
    return fit.value_and_gradient, np.zeros(6), STEP


def joint_image_case(data, truth):
    fit = inf._JointImageFit(truth, data.pixels[1], data.joints[0])
    return fit.value_and_gradient, data.joints[0], 1e-2


OBJECTIVES = {
    "camera-structure": stage_one_case,
    "full": full_case,
    "full-frozen": frozen_case,
    "unobserved-joints": unobserved_case,
    "kinematic-pose": kinematic_case,
    "pose-from-image": pose_image_case,
    "joints-from-image": joint_image_case,
}


@pytest.mark.parametrize("name", list(OBJECTIVES))
def test_objective_gradient(scene, name):
    fg, x0, spread = OBJECTIVES[name](*scene)
    worst = worst_gradient_error(fg, x0, seed=list(OBJECTIVES).index(name), spread=spread)
    assert worst < 1e-5, worst


def test_gauss_newton_matrix_is_the_residual_jacobian_product(scene):
    data, truth = scene
    p = full_problem(truth, data)
    x = p.initial_vector() + 1e-3
    J = p.jacobian(x).toarray()
    fd = np.column_stack(
        [central_difference(lambda v: ad.value_of(p.residuals(v)[0]).ravel()[k], x) for k in range(0, J.shape[0], 37)]
    ).T
    assert relative_error(J[::37], fd) < 1e-5
    assert np.allclose(p.gauss_newton(x), 2.0 * J.T @ J, rtol=1e-10, atol=1e-8)


# -- pixel loss -------------------------------------------------------------


def test_pixel_loss_of_perfect_prediction_is_zero():
    uv = np.random.default_rng(0).normal(size=(2, 3, 2))
    assert pixel_loss(uv, np.ones((2, 3), bool), uv) == (0.0, 6)


def test_pixel_loss_of_three_four_offset():
    total, count = pixel_loss([[[3.0, 4.0]]], [[True]], [[[0.0, 0.0]]])
    assert total == 25.0 and count == 1


def test_pixel_loss_with_every_detection_missing():
    assert pixel_loss(np.ones((2, 3, 2)), np.ones((2, 3), bool), np.full((2, 3, 2), np.nan)) == (0.0, 0)


def test_pixel_loss_ignores_points_behind_the_camera():
    assert pixel_loss([[[3.0, 4.0]]], [[False]], [[[0.0, 0.0]]]) == (0.0, 0)
