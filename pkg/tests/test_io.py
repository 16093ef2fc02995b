import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from genservo import io
from genservo import simulator as sim
from genservo.data import Dataset
from genservo.errors import ConfigInvalid, DimensionMismatch
from genservo.model import pack


def same_dataset(a: Dataset, b: Dataset):
    assert np.array_equal(a.pixels, b.pixels, equal_nan=True)
    for x, y in ((a.joints, b.joints), (a.actions, b.actions)):
        assert (x is None) == (y is None)
        if x is not None:
            assert np.array_equal(x, y, equal_nan=True)


def test_model_file_round_trip_is_bitwise(tmp_path, ur5):
    path = tmp_path / "m.json"
    io.write_model(ur5.true_model, path, ground_truth=True)
    assert np.array_equal(pack(io.read_model(path)), pack(ur5.true_model))
    assert json.loads(path.read_text())["ground_truth"] is True


@given(st.integers(0, 10_000))
def test_dataset_round_trip_is_bitwise(seed):
    import tempfile
    from pathlib import Path

    w = sim.make_world("ur5_sim")
    data = sim.collect_random(w, 4, seed=seed)
    px = data.pixels.copy()
    px[1, 0, :5] = np.nan  # some detections missing
    joints = data.joints.copy()
    joints[2] = np.nan  # one missing reading
    data = Dataset(px, joints, data.actions)
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "d.jsonl"
        io.write_dataset(data, path)
        same_dataset(io.read_dataset(path), data)


def test_action_only_dataset_round_trip(tmp_path, ur5):
    data = sim.collect_random(ur5, 6, seed=1).without_joints()
    io.write_dataset(data, tmp_path / "a.jsonl")
    same_dataset(io.read_dataset(tmp_path / "a.jsonl"), data)


def test_dataset_file_has_one_line_per_sample(tmp_path, ur5):
    io.write_dataset(sim.collect_random(ur5, 7, seed=0), tmp_path / "d.jsonl")
    lines = (tmp_path / "d.jsonl").read_text().splitlines()
    assert len(lines) == 7
    rec = json.loads(lines[0])
    assert {"t", "joints", "actions", "detections"} <= set(rec)
    assert {"cam", "feat", "u", "v"} == set(rec["detections"][0])


def test_empty_dataset_file(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    with pytest.raises(DimensionMismatch):
        io.read_dataset(tmp_path / "e.jsonl")


def test_corrupt_dataset_line(tmp_path):
    (tmp_path / "c.jsonl").write_text("{not json\n")
    with pytest.raises(ConfigInvalid):
        io.read_dataset(tmp_path / "c.jsonl")


def test_world_config_round_trip(tmp_path):
    cfg = sim.preset_config("baxter_like")
    io.write_world_config(cfg, tmp_path / "w.json")
    w = io.read_world(tmp_path / "w.json")
    assert np.array_equal(pack(w.true_model), pack(sim.make_world("baxter_like").true_model))


def test_world_must_exist(tmp_path):
    with pytest.raises(ConfigInvalid):
        io.read_world(tmp_path / "missing.json")


def test_model_file_of_wrong_kind(tmp_path):
    (tmp_path / "x.json").write_text(json.dumps({"format": "something-else"}))
    with pytest.raises(ConfigInvalid):
        io.read_model(tmp_path / "x.json")


def test_report_sidecar_name():
    assert io.report_path("out/model.json").name == "model.report.json"


def test_rows_keep_full_float_precision(tmp_path):
    x = 0.1 + 0.2
    io.write_rows(tmp_path / "r.csv", ["a"], [[x]])
    assert float((tmp_path / "r.csv").read_text().splitlines()[1]) == x
