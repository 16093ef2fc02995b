import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from genservo import dual as ad
from genservo import simulator as sim
from genservo.errors import DimensionMismatch
from genservo.geometry import Pose, PoseParams, pose_from_params, random_rotation, rotvec_to_matrix
from genservo.model import (
    CameraParams,
    KinematicParams,
    ModelParams,
    dh_link_transform,
    feature_world_coords,
    forward_kinematics,
    forward_kinematics_batch,
    frame_gauge,
    from_dict,
    pack,
    parameter_count,
    predict_image,
    predict_image_from_pose,
    project,
    render_from_joints,
    scale_gauge,
    to_dict,
    unpack,
)

from . import oracles

seeds = st.integers(0, 2**32 - 1)


def random_model(rng, n=6, m=5, c=2) -> ModelParams:
    links = np.column_stack(
        [rng.uniform(-0.3, 0.3, n), rng.uniform(0.0, 0.3, n), rng.uniform(-0.3, 0.3, n), rng.uniform(-1.6, 1.6, n)]
    )
    base = PoseParams(rng.normal(0, 0.1, 3), rng.normal(0, 0.3, 3))
    feats = rng.uniform(-0.05, 0.05, (m, 3))
    cams = tuple(
        CameraParams(
            [rng.uniform(400, 700), rng.uniform(400, 700), rng.uniform(300, 340), rng.uniform(220, 260)],
            PoseParams(rng.normal(0, 0.2, 3) + [0, 0, 3.0], rng.normal(0, 0.3, 3)),
        )
        for _ in range(c)
    )
    return ModelParams(KinematicParams(base, links), feats, cams)


def oracle_pixels(p: ModelParams, joints):
    cams = [(*cam.intrinsics, cam.extrinsics.rotation, cam.extrinsics.translation) for cam in p.cameras]
    kb = p.kinematics.base
    return oracles.render_model(kb.rotation, kb.translation, p.kinematics.links, p.features, cams, joints)


# -- DH link ---------------------------------------------------------------


def test_zero_link_is_identity():
    assert np.array_equal(dh_link_transform([0, 0, 0, 0], 0.0).matrix(), np.eye(4))


def test_link_length_translates_along_x():
    t = dh_link_transform([0, 0, 1.0, 0], 0.0)
    assert np.allclose(t.matrix(), oracles.trans(1, 0, 0), atol=0)


def test_offset_with_quarter_turn():
    t = dh_link_transform([0, 2.0, 0, 0], np.pi / 2)
    expected = np.array([[0, -1, 0, 0], [1, 0, 0, 0], [0, 0, 1, 2.0], [0, 0, 0, 1]])
    assert np.allclose(t.matrix(), expected, atol=1e-15)


@given(seeds)
def test_link_matches_independent_matrix_chain(seed):
    rng = np.random.default_rng(seed)
    link, q = rng.normal(size=4), rng.uniform(-np.pi, np.pi)
    assert np.allclose(dh_link_transform(link, q).matrix(), oracles.dh_matrix(*link, q), atol=1e-14)


# -- forward kinematics ----------------------------------------------------


def planar(n=2):
    return KinematicParams(PoseParams.zero(), [[0, 0, 1.0, 0]] * n)


def test_single_zero_link_identity():
    kin = KinematicParams(PoseParams.zero(), [[0, 0, 0, 0]])
    assert np.array_equal(forward_kinematics(kin, [0.0]).matrix(), np.eye(4))


def test_planar_arm_straight():
    assert np.allclose(forward_kinematics(planar(), [0, 0]).translation, [2, 0, 0], atol=1e-15)


def test_planar_arm_raised():
    assert np.allclose(forward_kinematics(planar(), [np.pi / 2, 0]).translation, [0, 2, 0], atol=1e-15)


def test_empty_chain_is_rejected():
    with pytest.raises(DimensionMismatch):
        KinematicParams(PoseParams.zero(), np.zeros((0, 4)))


def test_wrong_joint_count_is_rejected():
    with pytest.raises(DimensionMismatch):
        forward_kinematics(planar(), [0.0, 0.0, 0.0])


@given(seeds)
def test_fk_matches_oracle_and_stays_valid(seed):
    rng = np.random.default_rng(seed)
    p = random_model(rng, n=7)
    q = rng.uniform(-np.pi, np.pi, 7)
    pose = forward_kinematics(p.kinematics, q)
    kb = p.kinematics.base
    assert np.allclose(pose.matrix(), oracles.fk_matrix(kb.rotation, kb.translation, p.kinematics.links, q), atol=1e-12)
    assert pose.is_valid()


def test_batch_matches_single_evaluations(rng):
    p = random_model(rng)
    q = rng.uniform(-1, 1, (5, 6))
    r, t = forward_kinematics_batch(p.kinematics, q)
    for k in range(5):
        single = forward_kinematics(p.kinematics, q[k])
        assert np.allclose(r[k], single.rotation, atol=1e-14)
        assert np.allclose(t[k], single.translation, atol=1e-14)


# -- features and projection ----------------------------------------------


def test_identity_pose_leaves_features():
    f = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(feature_world_coords(f, Pose.identity()), f)


def test_translation_shifts_features():
    f = np.arange(6.0).reshape(2, 3)
    out = feature_world_coords(f, Pose.translation_only([0, 0, 1.0]))
    assert np.array_equal(out, f + [0, 0, 1.0])


def test_yaw_rotates_feature():
    rz = Pose(rotvec_to_matrix(np.array([0, 0, np.pi / 2])), np.zeros(3))
    assert np.allclose(feature_world_coords([[1.0, 0, 0]], rz), [[0, 1, 0]], atol=1e-15)


CAM = CameraParams([100.0, 100.0, 50.0, 50.0], PoseParams.zero())


def test_principal_point():
    pred = project(CAM, [[0, 0, 1.0]])
    assert np.array_equal(pred.uv, [[50.0, 50.0]]) and pred.in_front.all()


def test_pinhole_offset():
    assert np.allclose(project(CAM, [[0.1, 0, 1.0]]).uv, [[60.0, 50.0]], atol=1e-12)


def test_point_behind_camera_is_flagged_not_thrown():
    pred = project(CAM, [[0, 0, -1.0], [0, 0, 1e-9]])
    assert not pred.in_front.any()
    assert np.isnan(pred.masked()).all()


def test_non_positive_focal_length_is_rejected():
    with pytest.raises(ValueError):
        CameraParams([0.0, 100.0, 50.0, 50.0], PoseParams.zero())


# -- full prediction -------------------------------------------------------


@given(seeds)
def test_predict_image_matches_straight_line_oracle(seed):
    rng = np.random.default_rng(seed)
    p = random_model(rng)
    q = rng.uniform(-1, 1, 6)
    uv, z = oracle_pixels(p, q)
    pred = predict_image(p, q)
    assert np.max(np.abs(pred.uv - uv)) < 1e-9
    assert np.array_equal(pred.in_front, z > 1e-6)


@given(seeds)
def test_predict_from_pose_agrees_with_predict_image(seed):
    rng = np.random.default_rng(seed)
    p = random_model(rng)
    q = rng.uniform(-1, 1, 6)
    a = predict_image(p, q).uv
    b = predict_image_from_pose(p.features, p.cameras, forward_kinematics(p.kinematics, q)).uv
    assert np.max(np.abs(a - b)) < 1e-12


@given(seeds)
def test_predict_from_random_pose_matches_matrix_chain(seed):
    rng = np.random.default_rng(seed)
    p = random_model(rng)
    pose = Pose(random_rotation(rng), rng.normal(0, 0.2, 3))
    world = (pose.matrix() @ np.column_stack([p.features, np.ones(p.m)]).T).T[:, :3]
    got = predict_image_from_pose(p.features, p.cameras, pose).uv
    for k, cam in enumerate(p.cameras):
        uv, _ = oracles.pixels(*cam.intrinsics, pose_from_params(cam.extrinsics).matrix(), world)
        assert np.max(np.abs(got[k] - uv)) < 1e-12 * max(1.0, np.abs(uv).max())


def test_identity_pose_feature_on_axis_hits_principal_point():
    pred = predict_image_from_pose([[0, 0, 1.0]], [CAM], Pose.identity())
    assert np.allclose(pred.uv, [[[50.0, 50.0]]])


def test_batch_prediction_matches_single(rng):
    p = random_model(rng)
    q = rng.uniform(-1, 1, (4, 6))
    batch = predict_image(p, q).uv
    assert batch.shape == (4, 2, 5, 2)
    for k in range(4):
        assert np.array_equal(batch[k], predict_image(p, q[k]).uv)


def test_ground_truth_model_reproduces_noiseless_simulator(ur5_clean):
    q = sim.random_joints(ur5_clean, np.random.default_rng(0), size=10)
    obs = sim.render(ur5_clean, q)
    pred = predict_image(ur5_clean.true_model, q).masked()
    vis = ~np.isnan(obs)
    assert vis.any()
    assert np.array_equal(pred[vis], obs[vis])


# -- counting and packing --------------------------------------------------


@pytest.mark.parametrize("n,m,c,count", [(6, 12, 2, 86), (1, 1, 1, 23), (7, 12, 2, 90)])
def test_parameter_count(n, m, c, count):
    assert parameter_count(n, m, c) == count


def test_presets_have_the_expected_parameter_counts():
    assert sim.make_world("ur5_sim").true_model.parameter_count == 86
    assert sim.make_world("baxter_like").true_model.parameter_count == 90


@given(seeds, st.integers(1, 7), st.integers(1, 6), st.integers(1, 3))
def test_pack_round_trip(seed, n, m, c):
    rng = np.random.default_rng(seed)
    p = random_model(rng, n, m, c)
    v = pack(p)
    assert v.size == parameter_count(n, m, c)
    assert np.array_equal(pack(unpack(v, n, m, c)), v)
    q = rng.uniform(-1, 1, n)
    assert np.array_equal(predict_image(unpack(v, n, m, c), q).uv, predict_image(p, q).uv)


def test_unpack_rejects_wrong_length():
    with pytest.raises(DimensionMismatch):
        unpack(np.zeros(85), 6, 12, 2)


def test_model_dict_round_trip(rng):
    p = random_model(rng)
    assert np.array_equal(pack(from_dict(to_dict(p))), pack(p))


def test_model_dict_rejects_inconsistent_counts(rng):
    d = to_dict(random_model(rng))
    d["m"] = 99
    with pytest.raises(DimensionMismatch):
        from_dict(d)


# -- gauges ------------------------------------------------------------------


@given(seeds, st.floats(0.1, 10.0))
def test_scale_gauge_leaves_pixels_unchanged(seed, s):
    rng = np.random.default_rng(seed)
    p = random_model(rng)
    q = rng.uniform(-1, 1, (3, 6))
    a, b = predict_image(p, q).uv, predict_image(scale_gauge(p, s), q).uv
    assert np.max(np.abs(a - b)) < 1e-9


@given(seeds)
def test_frame_gauge_leaves_pixels_unchanged(seed):
    rng = np.random.default_rng(seed)
    p = random_model(rng)
    g = Pose(random_rotation(rng), rng.normal(size=3))
    q = rng.uniform(-1, 1, (3, 6))
    a, b = predict_image(p, q).uv, predict_image(frame_gauge(p, g), q).uv
    assert np.max(np.abs(a - b)) < 1e-9


# -- differentiability ------------------------------------------------------


def _pixels_from_vector(v, n, m, c):
    """Pixels as a function of packed parameters followed by joints."""
    i = 6 + 4 * n + 3 * m
    base_r = rotvec_to_matrix(v[3:6])
    links = v[6 : 6 + 4 * n].reshape((n, 4))
    feats = v[6 + 4 * n : i].reshape((m, 3))
    cams = v[i : i + 10 * c].reshape((c, 10))
    intr = cams[:, :4]
    ext_r = ad.stack([rotvec_to_matrix(cams[k, 7:10]) for k in range(c)])
    uv, _ = render_from_joints(base_r, v[:3], links, feats, intr, ext_r, cams[:, 4:7], v[i + 10 * c :])
    return uv


def test_pixel_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    n, m, c = 6, 3, 2
    p = random_model(rng, n, m, c)
    x = np.concatenate([pack(p), rng.uniform(-1, 1, n)])
    weights = rng.normal(size=(c, m, 2))
    f = lambda v: (_pixels_from_vector(v, n, m, c) * weights).sum()
    jac = ad.Dual.variable(x)
    g = f(jac).grad
    fd = oracles.central_difference(lambda v: float(f(v)), x)
    assert g.shape == (parameter_count(n, m, c) + n,)
    assert oracles.relative_error(g, fd) < 1e-5
