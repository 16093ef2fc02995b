import threading

import numpy as np
import pytest

from genservo import experiments as E
from genservo import learning as L
from genservo import simulator as sim
from genservo.data import Dataset
from genservo.geometry import Pose, pose_distance
from genservo.initialization import InitEstimate, initialize_by_triangulation
from genservo.model import (
    KinematicParams,
    forward_kinematics,
    forward_kinematics_batch,
    pack,
    predict_image_from_pose,
)
from genservo.objectives import pixel_loss


def stage_one_rms(features, cameras, poses, data):
    total, count = 0.0, 0
    for t, p in enumerate(poses):
        pred = predict_image_from_pose(features, cameras, p)
        f, k = pixel_loss(pred.uv, pred.in_front, data.pixels[t])
        total, count = total + f, count + k
    return np.sqrt(total / count)


def truth_poses(world, joints):
    return [forward_kinematics(world.true_model.kinematics, j) for j in joints]


# -- stage 1 -------------------------------------------------------------------


def test_noiseless_camera_structure_fit_is_exact(ur5_clean):
    data = sim.collect_random(ur5_clean, 20, seed=0)
    K = ur5_clean.factory_guess()
    init = initialize_by_triangulation(data, np.tile(K, (2, 1)))
    feats, cams, poses, rep = L.learn_camera_structure(data, init, L.LearnConfig(), K)
    assert stage_one_rms(feats, cams, poses, data) < 1e-8
    assert rep.final_objective <= rep.initial_objective


def test_noisy_camera_structure_fit_reaches_the_noise_floor(ur5):
    data = sim.collect_random(ur5, 50, seed=1)
    K = ur5.factory_guess()
    init = initialize_by_triangulation(data, np.tile(K, (2, 1)))
    feats, cams, poses, _ = L.learn_camera_structure(data, init, L.LearnConfig(), K)
    assert 0.3 <= stage_one_rms(feats, cams, poses, data) <= 0.8


def test_frozen_truth_structure_reduces_to_pose_estimation(ur5_clean):
    data = sim.collect_random(ur5_clean, 6, seed=2)
    tm = ur5_clean.true_model
    truth = truth_poses(ur5_clean, data.joints)
    nudge = Pose.translation_only([0.01, -0.01, 0.02])
    init = InitEstimate([c.pose.inverse() for c in tm.cameras], [nudge @ p for p in truth], tm.features.copy())
    cfg = L.LearnConfig(frozen=frozenset({"features", "cameras"}))
    feats, cams, poses, _ = L.learn_camera_structure(data, init, cfg, tm.intrinsics_array())
    assert np.array_equal(feats, tm.features)
    for got, want in zip(poses, truth):
        assert np.max(np.abs(got.matrix() - want.matrix())) < 1e-6


# -- stage 2 ------------------------------------------------------------------


def test_kinematics_recovered_from_exact_targets(ur5_clean):
    joints = sim.random_joints(ur5_clean, np.random.default_rng(0), size=20)
    targets = truth_poses(ur5_clean, joints)
    kin = ur5_clean.true_model.kinematics
    start = KinematicParams(kin.base, kin.links * 1.01)
    fit = L.learn_kinematics(joints, targets, initial=start, fit_tool=False)
    r, t = forward_kinematics_batch(fit.kinematics, joints)
    worst = max(pose_distance(Pose(r[k], t[k]), targets[k]) for k in range(20))
    assert worst < 1e-8
    assert fit.report.final_objective <= fit.report.initial_objective


def test_single_timestep_is_flagged_but_still_fit(ur5_clean):
    joints = ur5_clean.home[None]
    fit = L.learn_kinematics(joints, truth_poses(ur5_clean, joints), nominal_links=ur5_clean.nominal_links)
    assert fit.report.final_objective < 1e-12
    assert any("underdetermined" in note for note in fit.report.notes)


def test_kinematics_need_one_pose_per_joint_vector(ur5_clean):
    with pytest.raises(ValueError):
        L.learn_kinematics(np.zeros((3, 6)), [Pose.identity()] * 2, nominal_links=ur5_clean.nominal_links)


# -- stage 3 and pipeline -----------------------------------------------------


def test_full_fit_from_truth_stops_immediately(ur5_clean):
    data = sim.collect_random(ur5_clean, 10, seed=3)
    res = L.learn_full(data, ur5_clean.true_model)
    assert res.reports[0].iterations == 0
    assert res.train_rms_px < 1e-9
    # rotations pass through a matrix round trip, so only near-bitwise
    assert np.allclose(pack(res.model), pack(ur5_clean.true_model), rtol=0, atol=1e-12)


def test_full_fit_needs_joint_readings(ur5_clean):
    data = sim.collect_random(ur5_clean, 3, seed=3)
    with pytest.raises(ValueError):
        L.learn_full(Dataset(data.pixels, np.full((3, 6), np.nan)), ur5_clean.true_model)


def test_noiseless_pipeline_is_exact_on_heldout(ur5_clean):
    data = sim.collect_random(ur5_clean, 50, seed=0)
    res = L.learn_pipeline(data, L.WorldHints.from_world(ur5_clean))
    assert L.rms_px(res.model, E.heldout_set(ur5_clean, 0)) < 1e-3


def test_noisy_pipeline_is_sub_pixel_on_heldout(ur5, learned_ur5):
    assert L.rms_px(learned_ur5.model, E.heldout_set(ur5, 0)) <= 1.0


def test_every_stage_decreases_its_objective(learned_ur5):
    assert [r.stage for r in learned_ur5.reports] == ["camera_structure", "kinematic", "full"]
    for rep in learned_ur5.reports:
        assert rep.final_objective <= rep.initial_objective


def test_learned_model_is_not_the_true_model_but_predicts_like_it(ur5, learned_ur5):
    gap = np.abs(pack(learned_ur5.model) - pack(ur5.true_model))
    assert gap.max() > 1e-2
    assert L.rms_px(learned_ur5.model, E.heldout_set(ur5, 0)) <= 1.0


def test_pipeline_is_deterministic(ur5):
    data = sim.collect_random(ur5, 20, seed=5)
    hints = L.WorldHints.from_world(ur5)
    a = L.learn_pipeline(data, hints)
    b = L.learn_pipeline(data, hints)
    assert np.array_equal(pack(a.model), pack(b.model))
    assert a.train_rms_px == b.train_rms_px


def test_nofull_variant_skips_the_joint_refinement(ur5):
    data = sim.collect_random(ur5, 20, seed=5)
    res = L.learn_pipeline(data, L.WorldHints.from_world(ur5), L.LearnConfig.for_variant("dvs-nofull"))
    assert [r.stage for r in res.reports] == ["camera_structure", "kinematic"]
    assert res.variant == "dvs-nofull"


@pytest.mark.parametrize(
    "changes",
    [
        dict(camera_structure=False, kinematic=False, full=False),
        dict(lam=0.0),
        dict(init="random"),
        dict(window=0),
    ],
)
def test_invalid_configs_are_rejected(changes):
    with pytest.raises(ValueError):
        L.LearnConfig(**changes)


def test_unknown_variant_is_rejected():
    with pytest.raises(ValueError):
        L.LearnConfig.for_variant("nn1")


# -- unobserved joints --------------------------------------------------------


def test_integrate_actions_from_start():
    got = L.integrate_actions([[1.0, 0.0], [0.5, -1.0]], start=[0.0, 2.0])
    assert np.array_equal(got, [[0.0, 2.0], [1.0, 2.0], [1.5, 1.0]])


def test_empty_actions_are_a_precondition_error(ur5):
    obs = sim.observe(ur5, ur5.home)
    data = Dataset(obs.pixels[None], None, np.zeros((0, 6)))
    with pytest.raises(ValueError):
        L.learn_unobserved(data, L.WorldHints.from_world(ur5))


# -- online updates ------------------------------------------------------------


def test_frozen_groups_are_bitwise_unchanged(ur5, learned_ur5):
    model = learned_ur5.model
    data = sim.collect_random(ur5, 5, seed=9)
    frozen = L.groups_except(model, ["camera:1:extrinsics", "feature:0"])
    new = L.online_update(model, data, frozen).model
    assert np.array_equal(new.kinematics.links, model.kinematics.links)
    assert np.array_equal(new.kinematics.base.vector(), model.kinematics.base.vector())
    assert np.array_equal(new.features[1:], model.features[1:])
    assert np.array_equal(new.cameras[0].intrinsics, model.cameras[0].intrinsics)
    assert np.array_equal(new.cameras[0].extrinsics.vector(), model.cameras[0].extrinsics.vector())
    assert np.array_equal(new.cameras[1].intrinsics, model.cameras[1].intrinsics)
    assert not np.array_equal(new.cameras[1].extrinsics.vector(), model.cameras[1].extrinsics.vector())


def test_online_update_uses_the_latest_window(ur5, learned_ur5):
    data = sim.collect_random(ur5, 8, seed=4)
    frozen = L.groups_except(learned_ur5.model, ["camera:0:extrinsics"])
    cfg = L.LearnConfig(window=3)
    a = L.online_update(learned_ur5.model, data, frozen, cfg).model
    b = L.online_update(learned_ur5.model, data.tail(3), frozen, cfg).model
    assert np.array_equal(pack(a), pack(b))


def test_online_update_needs_a_sample(learned_ur5):
    with pytest.raises(ValueError):
        L.online_update(learned_ur5.model, Dataset(np.zeros((0, 2, 12, 2)), np.zeros((0, 6))))


def test_new_features_are_appended_before_fitting(ur5, learned_ur5):
    world = sim.apply_perturbation(ur5, sim.AttachFeatures.random(2, seed=1))
    data = sim.collect_random(world, 4, seed=4)
    new = L.online_update(learned_ur5.model, data, L.groups_except(learned_ur5.model, ["feature:12", "feature:13"]))
    assert new.model.m == 14
    assert np.array_equal(new.model.features[:12], learned_ur5.model.features)


def test_group_shorthands_expand():
    got = L.expand_groups({"features", "camera:1"}, m=2, c=2)
    assert got == {"feature:0", "feature:1", "camera:1:intrinsics", "camera:1:extrinsics"}


# -- change detection -------------------------------------------------------------


def test_unchanged_world_raises_no_flag(ur5_clean):
    flag, rms = L.detect_change(ur5_clean.true_model, sim.observe(ur5_clean, ur5_clean.home), 3.0)
    assert rms < 1e-9 and not flag


def test_moved_camera_is_flagged(ur5_clean):
    moved = sim.apply_perturbation(ur5_clean, sim.MoveCamera(0, Pose.translation_only([0.05, 0.0, 0.0])))
    flag, rms = L.detect_change(ur5_clean.true_model, sim.observe(moved, moved.home), 3.0)
    assert flag and rms > 3.0


def test_new_feature_is_flagged_even_with_low_residual(ur5_clean):
    grown = sim.apply_perturbation(ur5_clean, sim.AttachFeatures.random(1))
    flag, rms = L.detect_change(ur5_clean.true_model, sim.observe(grown, grown.home), 3.0)
    assert flag and rms < 1e-9


def test_default_threshold_formula():
    assert L.default_threshold(0.5) == 3.0


def test_default_threshold_rarely_fires_on_unperturbed_noise(ur5, learned_ur5):
    th = L.default_threshold(learned_ur5.train_rms_px)
    data = sim.collect_uniform(ur5, 1000, seed=77)
    flags = sum(L.detect_change(learned_ur5.model, data.sample(t), th)[0] for t in range(data.T))
    assert flags / data.T < 0.01


def test_model_handle_swaps_atomically(learned_ur5, ur5):
    handle = L.ModelHandle(learned_ur5.model)
    seen = []

    def reader():
        for _ in range(200):
            m = handle.get()
            seen.append(m is learned_ur5.model or m is ur5.true_model)

    th = threading.Thread(target=reader)
    th.start()
    handle.swap(ur5.true_model)
    th.join()
    assert all(seen) and handle.version == 1 and handle.get() is ur5.true_model
