"""File formats: model JSON, dataset JSON lines, world configs, fit reports.

Floats are written by ``json`` with Python's shortest round-trip repr, so
``read(write(x)) == x`` bit for bit.  NaN never appears in a file: missing
joints are ``null`` and undetected features are simply absent.
"""

from __future__ import annotations

import json
import math
import os
from pathlib import Path
from typing import Iterable, List

import numpy as np

from .data import Dataset
from .errors import ConfigInvalid, DimensionMismatch
from .model import ModelParams, from_dict, to_dict


def _dump(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, allow_nan=False) + "\n")


def _load(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"{path}: not valid JSON ({exc})") from exc


# ---------------------------------------------------------------------------
# models


def write_model(model: ModelParams, path, ground_truth: bool = False) -> None:
    _dump(to_dict(model, ground_truth=ground_truth), path)


def read_model(path) -> ModelParams:
    d = _load(path)
    if d.get("format", "genservo-model") != "genservo-model":
        raise ConfigInvalid(f"{path}: not a model file")
    try:
        return from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigInvalid(f"{path}: malformed model file ({exc})") from exc


def report_path(model_path) -> Path:
    """Sidecar next to a model file: ``model.json`` -> ``model.report.json``."""
    p = Path(model_path)
    return p.with_name(p.stem + ".report.json")


def write_report(path, **fields) -> None:
    _dump(_plain(fields), path)


def read_report(path) -> dict:
    return _load(path)


def _plain(obj):
    # numpy scalars/arrays and dataclass-like reports into JSON-native values
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return _plain(obj.item())
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if hasattr(obj, "to_dict"):
        return _plain(obj.to_dict())
    return obj


# ---------------------------------------------------------------------------
# datasets


def dataset_records(dataset: Dataset) -> List[dict]:
    """One JSON-ready record per timestep.

    ``actions`` on record ``t`` is the command executed between ``t`` and
    ``t + 1`` (absent on the last record).
    """
    out = []
    vis = dataset.visible
    for t in range(dataset.T):
        rec = {"t": t, "cameras": dataset.c, "features": dataset.m}
        if dataset.joints is None or np.isnan(dataset.joints[t]).any():
            rec["joints"] = None
        else:
            rec["joints"] = dataset.joints[t].tolist()
        if dataset.actions is not None and t < dataset.T - 1:
            rec["actions"] = dataset.actions[t].tolist()
        cams, feats = np.nonzero(vis[t])
        rec["detections"] = [
            {"cam": int(i), "feat": int(k), "u": float(dataset.pixels[t, i, k, 0]), "v": float(dataset.pixels[t, i, k, 1])}
            for i, k in zip(cams, feats)
        ]
        out.append(rec)
    return out


def write_dataset(dataset: Dataset, path) -> None:
    with open(path, "w") as fh:
        for rec in dataset_records(dataset):
            fh.write(json.dumps(rec, allow_nan=False) + "\n")


def dataset_from_records(records: Iterable[dict]) -> Dataset:
    records = list(records)
    if not records:
        raise DimensionMismatch("dataset file has no records")
    try:
        c = max(int(r.get("cameras", 0)) for r in records)
        m = max(int(r.get("features", 0)) for r in records)
        for r in records:
            for det in r["detections"]:
                c, m = max(c, det["cam"] + 1), max(m, det["feat"] + 1)
        T = len(records)
        pixels = np.full((T, c, m, 2), np.nan)
        for t, r in enumerate(records):
            for det in r["detections"]:
                pixels[t, det["cam"], det["feat"]] = (det["u"], det["v"])
        have_joints = [r.get("joints") is not None for r in records]
        joints = None
        if any(have_joints):
            n = len(next(r["joints"] for r in records if r.get("joints") is not None))
            joints = np.array([r["joints"] if r.get("joints") is not None else [np.nan] * n for r in records], dtype=float)
        actions = None
        if T > 1 and all("actions" in r for r in records[:-1]):
            actions = np.array([r["actions"] for r in records[:-1]], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigInvalid(f"malformed dataset record: {exc}") from exc
    return Dataset(pixels, joints, actions)


def read_dataset(path) -> Dataset:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ConfigInvalid(f"{path}:{lineno}: {exc}") from exc
    return dataset_from_records(records)


# ---------------------------------------------------------------------------
# worlds


def write_world_config(config: dict, path) -> None:
    _dump(config, path)


def read_world(path_or_name, **overrides):
    """A world from a preset name or a JSON config file."""
    from .simulator import PRESET_NAMES, make_world

    if str(path_or_name) in PRESET_NAMES:
        return make_world(str(path_or_name), **overrides)
    if not os.path.exists(path_or_name):
        raise ConfigInvalid(f"{path_or_name}: neither a preset ({', '.join(PRESET_NAMES)}) nor a config file")
    cfg = _load(path_or_name)
    if not isinstance(cfg, dict):
        raise ConfigInvalid(f"{path_or_name}: a world config must be a JSON object")
    return make_world(cfg, **overrides)


def write_fit_log(reports, path) -> None:
    """Objective history of each stage as JSON lines."""
    with open(path, "w") as fh:
        for rep in reports:
            fh.write(json.dumps(_plain(rep.to_dict(with_history=True))) + "\n")


def read_json(path):
    return _load(path)


def write_json(obj, path) -> None:
    _dump(_plain(obj), path)


def write_rows(path, header, rows) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def jsonable(obj):
    return _plain(obj)


__all__ = [
    "write_model",
    "read_model",
    "report_path",
    "write_report",
    "read_report",
    "dataset_records",
    "write_dataset",
    "read_dataset",
    "dataset_from_records",
    "write_world_config",
    "read_world",
    "write_fit_log",
    "read_json",
    "write_json",
    "write_rows",
    "jsonable",
]
