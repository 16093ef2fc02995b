import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from genservo.errors import DegenerateConfiguration
from genservo.geometry import (
    Pose,
    PoseParams,
    arun_align,
    compose,
    look_at,
    matrix_to_rotvec,
    mean_pose,
    orthonormalize,
    params_from_pose,
    pose_distance,
    pose_from_params,
    random_rotation,
    rotvec_to_matrix,
    similarity_align,
)

finite = st.floats(-3.0, 3.0, allow_nan=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)
seeds = st.integers(0, 2**32 - 1)


def small_rotvec():
    # axis-angle with angle strictly below pi
    return st.tuples(vec3, st.floats(0.0, 3.1)).map(
        lambda p: p[0] / np.linalg.norm(p[0]) * p[1] if np.linalg.norm(p[0]) > 1e-6 else np.zeros(3)
    )


def random_pose(seed) -> Pose:
    rng = np.random.default_rng(seed)
    return Pose(random_rotation(rng), rng.normal(size=3))


# -- compose ---------------------------------------------------------------


def test_identity_compose_identity_is_identity():
    p = compose(Pose.identity(), Pose.identity())
    assert np.array_equal(p.matrix(), np.eye(4))


@given(seeds)
def test_identity_is_neutral(seed):
    p = random_pose(seed)
    assert np.allclose(compose(Pose.identity(), p).matrix(), p.matrix(), atol=0)
    assert np.allclose(compose(p, Pose.identity()).matrix(), p.matrix(), atol=0)


def test_rotate_after_translate_moves_origin_to_y():
    # hand multiplication: Rz(pi/2) @ Tx(1) maps the origin to (0, 1, 0)
    rz = Pose(rotvec_to_matrix(np.array([0.0, 0.0, np.pi / 2])), np.zeros(3))
    tx = Pose.translation_only([1.0, 0.0, 0.0])
    assert np.allclose(compose(rz, tx).apply(np.zeros(3)), [0.0, 1.0, 0.0], atol=1e-15)


@given(seeds)
def test_compose_matches_matrix_product_and_stays_valid(seed):
    a, b = random_pose(seed), random_pose(seed + 1)
    c = compose(a, b)
    assert np.allclose(c.matrix(), a.matrix() @ b.matrix(), atol=1e-14)
    assert c.is_valid()


@given(seeds)
def test_compose_is_associative(seed):
    a, b, c = random_pose(seed), random_pose(seed + 1), random_pose(seed + 2)
    left = compose(compose(a, b), c).matrix()
    right = compose(a, compose(b, c)).matrix()
    assert np.max(np.abs(left - right)) < 1e-12


@given(seeds)
def test_inverse_undoes_pose(seed):
    p = random_pose(seed)
    assert np.allclose((p @ p.inverse()).matrix(), np.eye(4), atol=1e-14)


# -- parameterization ------------------------------------------------------


def test_zero_params_give_identity():
    assert np.array_equal(pose_from_params(PoseParams.zero()).matrix(), np.eye(4))


def test_quarter_turn_yaw():
    # Rodrigues by hand: 90 degrees about z
    p = pose_from_params(PoseParams(np.zeros(3), [0.0, 0.0, np.pi / 2]))
    expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    assert np.allclose(p.rotation, expected, atol=1e-15)
    assert np.array_equal(p.translation, np.zeros(3))


def test_pure_translation():
    p = pose_from_params(PoseParams([1.0, 2.0, 3.0], np.zeros(3)))
    assert np.array_equal(p.rotation, np.eye(3))
    assert np.array_equal(p.translation, [1.0, 2.0, 3.0])


@given(small_rotvec())
def test_rodrigues_matches_independent_rotation_library(w):
    assert np.allclose(rotvec_to_matrix(w), Rotation.from_rotvec(w).as_matrix(), atol=1e-12)


@given(small_rotvec(), vec3)
def test_params_round_trip_preserves_pose(w, t):
    p = pose_from_params(PoseParams(t, w))
    q = pose_from_params(params_from_pose(p))
    assert np.max(np.abs(p.matrix() - q.matrix())) < 1e-9
    assert p.is_valid() and q.is_valid()


def test_round_trip_through_pi_aliases_the_vector_not_the_pose():
    w = np.array([0.0, 0.0, np.pi])
    p = pose_from_params(PoseParams(np.zeros(3), w))
    q = pose_from_params(params_from_pose(p))
    assert np.allclose(p.matrix(), q.matrix(), atol=1e-9)


def test_rotvec_derivative_is_finite_at_zero():
    from genservo import dual as ad

    r = rotvec_to_matrix(ad.Dual.variable(np.zeros(3)))
    # d R / d w at w = 0 is the cross-product generator
    assert np.allclose(r.grad[..., 2], [[0, -1, 0], [1, 0, 0], [0, 0, 0]])


@given(seeds)
def test_matrix_to_rotvec_inverts_rodrigues(seed):
    r = random_rotation(np.random.default_rng(seed))
    assert np.allclose(rotvec_to_matrix(matrix_to_rotvec(r)), r, atol=1e-12)


def test_orthonormalize_repairs_drift():
    rng = np.random.default_rng(0)
    r = random_rotation(rng) + 1e-6 * rng.normal(size=(3, 3))
    q = orthonormalize(r)
    assert np.allclose(q.T @ q, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(q) - 1.0) < 1e-12


# -- distance --------------------------------------------------------------


@given(seeds)
def test_distance_to_self_is_zero(seed):
    p = random_pose(seed)
    assert pose_distance(p, p) == 0.0


def test_distance_to_unit_translation_is_one():
    assert pose_distance(Pose.identity(), Pose.translation_only([1.0, 0.0, 0.0])) == 1.0


@given(seeds)
def test_distance_is_symmetric_frobenius_norm(seed):
    a, b = random_pose(seed), random_pose(seed + 7)
    assert pose_distance(a, b) == pose_distance(b, a)
    assert np.isclose(pose_distance(a, b), np.linalg.norm(a.matrix() - b.matrix()), rtol=1e-14)


# -- alignment -------------------------------------------------------------


def test_align_identical_sets_gives_identity():
    p = np.random.default_rng(0).normal(size=(10, 3))
    t = arun_align(p, p)
    assert np.allclose(t.matrix(), np.eye(4), atol=1e-12)


def test_align_shifted_set_gives_pure_translation():
    p = np.random.default_rng(0).normal(size=(10, 3))
    t = arun_align(p, p + [0.0, 0.0, 5.0])
    assert np.allclose(t.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(t.translation, [0.0, 0.0, 5.0], atol=1e-12)


@given(seeds)
def test_align_recovers_known_rigid_transform(seed):
    rng = np.random.default_rng(seed)
    truth = Pose(random_rotation(rng), rng.normal(size=3) * 3)
    p = rng.normal(size=(10, 3))
    est = arun_align(p, truth.apply(p))
    assert np.max(np.abs(est.matrix() - truth.matrix())) < 1e-9
    assert np.max(np.abs(est.apply(p) - truth.apply(p))) < 1e-9


def test_align_never_returns_a_reflection():
    p = np.random.default_rng(3).normal(size=(8, 3))
    mirrored = p * [1.0, 1.0, -1.0]
    t = arun_align(p, mirrored)
    assert np.linalg.det(t.rotation) > 0


@pytest.mark.parametrize(
    "points",
    [np.zeros((2, 3)), np.outer(np.arange(5.0), [1.0, 2.0, 3.0])],
    ids=["two points", "collinear"],
)
def test_align_rejects_degenerate_sets(points):
    with pytest.raises(DegenerateConfiguration):
        arun_align(points, points)


@given(seeds, st.floats(0.1, 10.0))
def test_similarity_align_recovers_scale(seed, s):
    rng = np.random.default_rng(seed)
    truth = Pose(random_rotation(rng), rng.normal(size=3))
    p = rng.normal(size=(12, 3))
    scale, pose = similarity_align(p, s * truth.rotation.dot(p.T).T + truth.translation)
    assert np.isclose(scale, s, rtol=1e-9)
    assert np.allclose(pose.rotation, truth.rotation, atol=1e-9)


def test_mean_pose_of_identical_poses_is_that_pose():
    p = random_pose(5)
    assert np.allclose(mean_pose([p, p, p]).matrix(), p.matrix(), atol=1e-12)


def test_look_at_puts_target_on_optical_axis():
    cam = look_at([2.0, 1.0, 1.0], [0.0, 0.0, 0.3])
    x = cam.apply([0.0, 0.0, 0.3])
    assert np.allclose(x[:2], 0.0, atol=1e-12) and x[2] > 0
    assert cam.is_valid()
