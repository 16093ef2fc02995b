"""Experiment drivers shared by the command line and the acceptance tests.

Each driver is deterministic given its seeds: training data, held-out sets,
perturbations and servo targets all draw from generators seeded here.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import simulator as sim
from .data import Dataset
from .errors import ConfigInvalid
from .geometry import Pose
from .inference import ServoTarget, SimRobot, servo_loop
from .learning import (
    HELDOUT_SIZE,
    VARIANTS,
    LearnConfig,
    WorldHints,
    default_threshold,
    detect_change,
    groups_except,
    learn_pipeline,
    online_update,
    rms_px,
)
from .model import ModelParams, predict_image

HELDOUT_SEED_OFFSET = 10_000
WORKERS_ENV = "GENSERVO_WORKERS"


def heldout_set(world, seed: int, size: int = HELDOUT_SIZE) -> Dataset:
    return sim.collect_uniform(world, size, seed=HELDOUT_SEED_OFFSET + seed)


def feature_rms(model: ModelParams, dataset: Dataset, rows) -> float:
    """Held-out RMS restricted to the feature indices ``rows``."""
    rows = list(rows)
    pred = predict_image(model, dataset.joints)
    uv = pred.uv[:, :, rows]
    obs = dataset.pixels[:, :, rows]
    ok = pred.in_front[:, :, rows] & ~np.isnan(obs[..., 0])
    if not ok.any():
        return float("nan")
    d = uv[ok] - obs[ok]
    return float(np.sqrt(np.mean(np.sum(d * d, axis=-1))))


# ---------------------------------------------------------------------------
# learning accuracy table


@dataclass(frozen=True)
class ExperimentConfig:
    world: str = "ur5_sim"
    sizes: tuple = (50, 75, 100)
    seeds: tuple = tuple(range(10))
    variant: str = "dvs"
    out_dir: str = "."
    pixel_sigma: Optional[float] = None

    def __post_init__(self):
        if not self.sizes:
            raise ConfigInvalid("at least one dataset size is needed")
        if not self.seeds:
            raise ConfigInvalid("at least one seed is needed")
        if any(int(s) < 1 for s in self.sizes):
            raise ConfigInvalid("dataset sizes must be positive")
        if self.variant not in VARIANTS:
            raise ConfigInvalid(f"unknown variant {self.variant!r}")


def _world(name_or_path, pixel_sigma=None):
    from .io import read_world

    overrides = {} if pixel_sigma is None else {"noise": {"pixel_sigma": float(pixel_sigma)}}
    return read_world(name_or_path, **overrides)


def run_cell(world: str, size: int, variant: str, seed: int, pixel_sigma: Optional[float] = None) -> dict:
    """Train one variant on ``size`` random-walk samples and score it on the held-out set."""
    w = _world(world, pixel_sigma)
    data = sim.collect_random(w, size, seed=seed)
    held = heldout_set(w, seed)
    start = time.perf_counter()
    result = learn_pipeline(data, WorldHints.from_world(w), LearnConfig.for_variant(variant, seed=seed))
    elapsed = time.perf_counter() - start
    return {
        "world": world,
        "size": int(size),
        "variant": variant,
        "seed": int(seed),
        "heldout_rms_px": rms_px(result.model, held),
        "train_rms_px": result.train_rms_px,
        "seconds": elapsed,
    }


def _run_cell_args(args):
    return run_cell(*args)


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def run_table(
    worlds: Sequence[str],
    sizes: Sequence[int],
    variants: Sequence[str],
    seeds: Sequence[int],
    pixel_sigma: Optional[float] = None,
    workers: Optional[int] = None,
) -> List[dict]:
    """Every (world, size, variant, seed) cell; rows come back sorted by that key."""
    jobs = [(w, int(n), v, int(s), pixel_sigma) for w in worlds for n in sizes for v in variants for s in seeds]
    workers = default_workers() if workers is None else workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell_args, jobs))
    else:
        rows = [run_cell(*job) for job in jobs]
    return sorted(rows, key=lambda r: (r["world"], r["size"], VARIANTS.index(r["variant"]), r["seed"]))


def summarize(rows: List[dict]) -> Dict[tuple, dict]:
    """Median held-out RMS and mean runtime per (world, size, variant)."""
    groups: Dict[tuple, list] = {}
    for r in rows:
        groups.setdefault((r["world"], r["size"], r["variant"]), []).append(r)
    out = {}
    for key, rs in groups.items():
        errs = [r["heldout_rms_px"] for r in rs]
        out[key] = {
            "median_px": float(np.median(errs)),
            "max_px": float(np.max(errs)),
            "seeds": len(rs),
            "mean_seconds": float(np.mean([r["seconds"] for r in rs])),
            "total_seconds": float(np.sum([r["seconds"] for r in rs])),
        }
    return out


def table_markdown(rows: List[dict]) -> str:
    """Median held-out RMS (px) with one row per (world, size) and one column per variant."""
    summary = summarize(rows)
    variants = [v for v in VARIANTS if any(k[2] == v for k in summary)]
    keys = sorted({(k[0], k[1]) for k in summary})
    lines = [
        "| world | samples | " + " | ".join(variants) + " |",
        "|---|---|" + "---|" * len(variants),
    ]
    for world, size in keys:
        cells = []
        for v in variants:
            s = summary.get((world, size, v))
            cells.append("" if s is None else f"{s['median_px']:.3f}")
        lines.append(f"| {world} | {size} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# adaptation


UPDATE_MODES = ("on-change", "always")
PERTURBATIONS = ("none", "move-camera", "attach-features", "jitter-links", "add-camera")


def make_perturbation(kind: str, world, seed: int = 0, magnitude: Optional[float] = None):
    """Perturbation of the given kind; ``None`` for ``"none"``."""
    rng = np.random.default_rng(seed)
    if kind == "none":
        return None
    if kind == "move-camera":
        d = rng.normal(size=3)
        d *= (0.05 if magnitude is None else magnitude) / np.linalg.norm(d)
        return sim.MoveCamera(0, Pose(np.eye(3), d))
    if kind == "attach-features":
        return sim.AttachFeatures.random(int(4 if magnitude is None else magnitude), seed=seed)
    if kind == "jitter-links":
        return sim.JitterLinks(0.02 if magnitude is None else magnitude, seed=seed)
    if kind == "add-camera":
        from .geometry import look_at, params_from_pose
        from .model import CameraParams, forward_kinematics

        target = forward_kinematics(world.true_model.kinematics, world.home).translation
        eye = target + np.array([0.0, 0.0, 1.5]) + rng.normal(0.0, 0.1, size=3)
        pose = look_at(eye, target, up=(1.0, 0.0, 0.0))
        return sim.AddCamera(CameraParams(world.true_model.cameras[0].intrinsics.copy(), params_from_pose(pose)))
    raise ConfigInvalid(f"unknown perturbation {kind!r}; choose from {', '.join(PERTURBATIONS)}")


def default_relearn(kind: str, model: ModelParams) -> List[str]:
    if kind == "move-camera":
        return ["camera:0:extrinsics"]
    if kind == "attach-features":
        return ["new-features"]
    if kind == "jitter-links":
        return ["kinematics"]
    if kind == "add-camera":
        return [f"camera:{model.c}"]
    return ["kinematics", "features", "cameras"]


@dataclass
class AdaptCurve:
    rows: List[dict] = field(default_factory=list)  # samples_seen, heldout_rms_px, flagged, sample_rms_px

    @property
    def detections(self) -> int:
        return int(sum(r["flagged"] for r in self.rows))

    def rms_at(self, samples_seen: int) -> float:
        for r in self.rows:
            if r["samples_seen"] == samples_seen:
                return r["heldout_rms_px"]
        raise KeyError(samples_seen)

    def to_rows(self):
        header = ["samples_seen", "heldout_rms_px", "flagged", "sample_rms_px"]
        return header, [[r[h] for h in header] for r in self.rows]


def adapt_curve(
    model: ModelParams,
    world,
    kind: str,
    relearn: Optional[Sequence[str]] = None,
    samples: int = 25,
    seed: int = 0,
    threshold_px: Optional[float] = None,
    train_rms_px: Optional[float] = None,
    magnitude: Optional[float] = None,
    cfg: Optional[LearnConfig] = None,
    update: str = "on-change",
) -> AdaptCurve:
    """Perturb the world, stream samples one at a time, and relearn.

    After each sample, change detection compares it with the current model.
    With ``update="on-change"`` the model is relearned with
    :func:`online_update` from the first flagged sample on, using every
    sample since then; with ``update="always"`` it is relearned after every
    sample regardless of the flag.  Returns the
    held-out RMS after each sample (on new features only for
    ``attach-features``).
    """
    perturbation = make_perturbation(kind, world, seed, magnitude)
    changed = world if perturbation is None else sim.apply_perturbation(world, perturbation)
    relearn = list(default_relearn(kind, model) if relearn is None else relearn)
    new_rows = list(range(model.m, changed.m))
    if "new-features" in relearn:
        relearn = [g for g in relearn if g != "new-features"] + [f"feature:{k}" for k in new_rows]
    # groups the model does not know yet (new features, new cameras) start free
    frozen = groups_except(model, relearn)
    held = heldout_set(changed, seed)
    stream = sim.collect_random(changed, samples, seed=seed + 1)
    if threshold_px is None:
        base = rms_px(model, heldout_set(world, seed)) if train_rms_px is None else train_rms_px
        threshold_px = default_threshold(base)
    if update not in UPDATE_MODES:
        raise ConfigInvalid(f"unknown update mode {update!r}; choose from {', '.join(UPDATE_MODES)}")
    cfg = cfg or LearnConfig()

    def score(current):
        if new_rows:
            return feature_rms(current, held, new_rows) if current.m == changed.m else float("nan")
        if current.c < changed.c:
            return float("nan")
        return rms_px(current, held)

    curve = AdaptCurve()
    curve.rows.append({"samples_seen": 0, "heldout_rms_px": score(model), "flagged": False, "sample_rms_px": float("nan")})
    current = model
    triggered_at = None
    for k in range(samples):
        flagged, sample_rms = detect_change(current, stream.sample(k), threshold_px)
        if (flagged or update == "always") and triggered_at is None:
            triggered_at = k
        if triggered_at is not None:
            seen = stream.subset(np.arange(triggered_at, k + 1))
            current = online_update(current, seen, frozen, cfg).model
        curve.rows.append(
            {"samples_seen": k + 1, "heldout_rms_px": score(current), "flagged": bool(flagged), "sample_rms_px": sample_rms}
        )
    return curve


# ---------------------------------------------------------------------------
# servoing


@dataclass
class ServoSummary:
    final_rms_px: List[float]
    final_true_rms_px: List[float]
    steps: List[int]
    traces: list

    @property
    def mean_final_px(self) -> float:
        return float(np.mean(self.final_rms_px))

    @property
    def mean_final_true_px(self) -> float:
        return float(np.mean(self.final_true_rms_px))


def reachable_targets(world, count: int, seed: int = 0) -> List[tuple]:
    """``(target, start_joints)`` pairs: targets rendered noiselessly at random joints."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        goal = sim.random_joints(world, rng)
        start = sim.random_joints(world, rng)
        out.append((ServoTarget(sim.render(world, goal)), start))
    return out


def run_servo(
    model: ModelParams,
    world,
    targets: int = 50,
    gain: float = 0.7,
    max_steps: int = 50,
    seed: int = 0,
    clamp: Optional[float] = 0.2,
    use_encoders: bool = True,
    stop_px: float = 0.0,
) -> ServoSummary:
    finals, trues, steps, traces = [], [], [], []
    for k, (target, start) in enumerate(reachable_targets(world, targets, seed)):
        robot = SimRobot(world, start, seed=seed * 1000 + k)
        trace = servo_loop(
            model,
            robot,
            target,
            gain=gain,
            max_steps=max_steps,
            stop_px=stop_px,
            clamp=clamp,
            limits=world.joint_limits,
            use_encoders=use_encoders,
        )
        finals.append(trace.final_rms_px)
        trues.append(trace.final_true_rms_px)
        steps.append(trace.steps)
        traces.append(trace)
    return ServoSummary(finals, trues, steps, traces)


# ---------------------------------------------------------------------------
# timing


BENCH_OPS = ("forward-fk", "forward-full", "gradient-full", "infer-pose", "infer-joints")


def bench(model: ModelParams, ops: Sequence[str] = BENCH_OPS, reps: int = 1000, seed: int = 0, infer_reps=None) -> dict:
    """Mean wall time (seconds) per call of each operation.

    ``infer_reps`` (default ``reps``) sets the repetitions of the two
    inference operations separately, as they are orders of magnitude slower.
    """
    from .inference import infer_joints_from_image, infer_pose_from_image
    from .model import forward_kinematics

    unknown = set(ops) - set(BENCH_OPS)
    if unknown:
        raise ConfigInvalid(f"unknown benchmark ops: {', '.join(sorted(unknown))}")
    rng = np.random.default_rng(seed)
    n = model.n
    joints = rng.normal(0.0, 0.3, size=(reps, n))
    pixels = predict_image(model, joints).masked()
    # queries look like real detections: half a pixel of noise
    pixels = pixels + rng.normal(0.0, 0.5, size=pixels.shape)
    out = {}

    def timed(fn, count):
        start = time.perf_counter()
        for i in range(count):
            fn(i)
        return (time.perf_counter() - start) / count

    if "forward-fk" in ops:
        out["forward-fk"] = timed(lambda i: forward_kinematics(model.kinematics, joints[i]), reps)
    if "forward-full" in ops:
        out["forward-full"] = timed(lambda i: predict_image(model, joints[i]), reps)
    if "gradient-full" in ops:
        from .learning import _full_problem

        def grad(i):
            data = Dataset(pixels[i][None], joints[i][None])
            problem = _full_problem(model, data, frozenset())
            problem.value_and_gradient(problem.initial_vector())

        out["gradient-full"] = timed(grad, reps)
    k = reps if infer_reps is None else infer_reps
    if "infer-pose" in ops:
        poses = [forward_kinematics(model.kinematics, joints[i]) for i in range(k)]
        out["infer-pose"] = timed(
            lambda i: infer_pose_from_image(
                model, pixels[i], initial=Pose(poses[i].rotation, poses[i].translation + 0.05), seed=i
            ),
            k,
        )
    if "infer-joints" in ops:
        out["infer-joints"] = timed(
            lambda i: infer_joints_from_image(model, pixels[i], joints[i] + 0.05, seed=i),
            k,
        )
    return out
