"""Inverting the learned model, and servoing with it.

Every inverse problem here is solved the same way as learning: minimize a
pixel or pose discrepancy with L-BFGS, starting from the current estimate
and, when that start ends badly, from a few random restarts.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Protocol

import numpy as np

from . import dual as ad
from .data import Observation
from .errors import AmbiguousPose, IKNotConverged, InferenceNotConverged, InsufficientDetections
from .geometry import Pose, orthonormalize, pose_distance, random_rotation, rotvec_to_matrix
from .model import DEPTH_EPSILON, ModelParams, fk_rt, forward_kinematics, pose_from_params, render_points, world_points
from .optim import GRADIENT_TOL, LINE_SEARCH_FAILURE, OptimizerOptions, minimize

MIN_DETECTIONS = 4
DEFAULT_GAIN = 0.7
DEFAULT_CLAMP = 0.2
IK_TOLERANCE = 1e-6
EXACT_PX = 1e-9
SETTLE_RAD = 1e-5


@dataclass(frozen=True, eq=False)
class ServoTarget:
    """Desired pixel coordinates ``(c, m, 2)``; NaN marks features without a target."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=float)
        if px.ndim != 3 or px.shape[-1] != 2:
            raise ValueError(f"target pixels must be (c, m, 2), got {px.shape}")
        px = np.where(np.isnan(px).any(axis=-1, keepdims=True), np.nan, px)
        object.__setattr__(self, "pixels", px)
        if self.count < MIN_DETECTIONS:
            raise InsufficientDetections(f"a target needs {MIN_DETECTIONS} feature coordinates, got {self.count}")

    @property
    def count(self) -> int:
        return int(np.sum(~np.isnan(self.pixels[..., 0])))


def image_rms(predicted, observed) -> float:
    """RMS pixel distance over entries present in both arrays (0 if none)."""
    predicted = np.asarray(predicted, dtype=float)
    observed = np.asarray(observed, dtype=float)
    ok = ~np.isnan(predicted[..., 0]) & ~np.isnan(observed[..., 0])
    if not ok.any():
        return 0.0
    d = predicted[ok] - observed[ok]
    return float(np.sqrt(np.mean(np.sum(d * d, axis=-1))))


def _count(pixels) -> int:
    return int(np.sum(~np.isnan(np.asarray(pixels)[..., 0])))


def _camera_arrays(model: ModelParams):
    intr = model.intrinsics_array()
    er, et = model.extrinsics_arrays()
    return intr, er, et


# ---------------------------------------------------------------------------
# pose from image


class _PoseImageFit:
    """Pixel residuals of one image as a function of the end-effector pose.

    The pose is ``(R0 exp(delta), t0 + shift)`` around a start ``(R0, t0)``.
    """

    def __init__(self, model: ModelParams, pixels, start: Pose):
        self.start = start
        self.features = model.features
        self.cams = _camera_arrays(model)
        self.target = np.asarray(pixels, dtype=float)
        self.present = ~np.isnan(self.target[..., 0])
        _, _, self.required = self.residuals(np.zeros(6))

    def pose(self, x) -> Pose:
        return Pose(orthonormalize(self.start.rotation @ rotvec_to_matrix(x[:3])), self.start.translation + x[3:])

    def residuals(self, x):
        dual = isinstance(x, ad.Dual)
        r = self.start.rotation @ rotvec_to_matrix(x[0:3])
        uv, z = render_points(*self.cams, world_points(r, x[3:6] + self.start.translation, self.features))
        use = self.present & (ad.value_of(z) > DEPTH_EPSILON)
        diff = uv - np.nan_to_num(self.target)
        if dual:
            return diff.value[use].ravel(), diff.grad[use].reshape(-1, diff.grad.shape[-1]), int(use.sum())
        return diff[use].ravel(), None, int(use.sum())

    def value_and_gradient(self, x):
        r, J, count = self.residuals(ad.Dual.variable(np.asarray(x, dtype=float)))
        if count < self.required:
            return np.inf, np.zeros(6)
        return float(r @ r), 2.0 * (r @ J)

    def gauss_newton(self, x):
        _, J, _ = self.residuals(ad.Dual.variable(np.asarray(x, dtype=float)))
        return 2.0 * J.T @ J


def infer_pose_from_image(
    model: ModelParams,
    detections,
    initial: Optional[Pose] = None,
    starts: int = 5,
    seed=0,
    opts: Optional[OptimizerOptions] = None,
) -> Pose:
    """End-effector pose whose rendered features best match ``detections`` ``(c, m, 2)``.

    Starts from ``initial`` (default: the pose at zero joints) and from
    ``starts - 1`` random rotations about the same position; the lowest
    residual wins.  Raises :class:`AmbiguousPose` when two starts reach the
    same residual at clearly different poses.
    """
    detections = np.asarray(detections, dtype=float)
    present = _count(detections)
    if present < MIN_DETECTIONS:
        raise InsufficientDetections(f"need {MIN_DETECTIONS} detected features, got {present}")
    if initial is None:
        initial = forward_kinematics(model.kinematics, np.zeros(model.n))
    opts = opts or OptimizerOptions(max_iterations=200, gradient_tolerance=1e-6)
    rng = np.random.default_rng(seed)
    candidates = [initial] + [Pose(random_rotation(rng), initial.translation) for _ in range(max(0, starts - 1))]
    results = []
    for start in candidates:
        fit = _PoseImageFit(model, detections, start)
        if fit.required < present:
            continue  # part of the target would sit behind a camera from this start
        x, report = minimize(
            fit.value_and_gradient, np.zeros(6), opts, with_gradient=True, precond=fit.gauss_newton, precond_every=1
        )
        results.append((report.final_objective, fit.pose(x)))
    if not results:
        raise InsufficientDetections("no start places every detected feature in front of its camera")
    results.sort(key=lambda r: r[0])
    best_f, best = results[0]
    tie = 1e-9 * max(1.0, best_f) + 1e-12
    for f, pose in results[1:]:
        if f - best_f <= tie and pose_distance(pose, best) > 1e-3:
            raise AmbiguousPose(f"two poses explain the detections equally well (residual {best_f:.3g})")
    return best


# ---------------------------------------------------------------------------
# joints from pose


def _limits_projector(limits):
    if limits is None:
        return None
    lim = np.asarray(limits, dtype=float)
    return lambda j: np.clip(j, lim[:, 0], lim[:, 1])


def _start_joints(rng, j_init, limits, spread=0.5):
    if limits is not None:
        lim = np.asarray(limits, dtype=float)
        return rng.uniform(lim[:, 0], lim[:, 1])
    return np.asarray(j_init, dtype=float) + rng.uniform(-spread, spread, size=len(j_init))


def infer_joints_from_pose(
    model: ModelParams,
    target_pose: Pose,
    j_init,
    limits=None,
    restarts: int = 8,
    tolerance: float = IK_TOLERANCE,
    seed=0,
    opts: Optional[OptimizerOptions] = None,
) -> np.ndarray:
    """Inverse kinematics by minimizing the squared pose distance to ``target_pose``.

    Starts at ``j_init``; if the distance stays above ``tolerance``, tries
    up to ``restarts`` random starts.  Raises :class:`IKNotConverged`
    (carrying the best joints) when none gets within tolerance.
    """
    kin = model.kinematics
    base = pose_from_params(kin.base)
    tr, tt = target_pose.rotation, target_pose.translation
    opts = opts or OptimizerOptions(max_iterations=300, gradient_tolerance=1e-12)
    project = _limits_projector(limits)

    def residuals(j):
        r, t = fk_rt(base.rotation, base.translation, kin.links, j)
        return ad.concatenate([ad.reshape(r - tr, (9,)), t - tt], axis=0)

    def fg(j):
        res = residuals(ad.Dual.variable(j))
        return float(np.sum(res.value**2)), 2.0 * res.value @ res.grad

    def gn(j):
        J = residuals(ad.Dual.variable(j)).grad
        return 2.0 * J.T @ J

    rng = np.random.default_rng(seed)
    best_j, best_d = None, np.inf
    start = np.asarray(j_init, dtype=float)
    for attempt in range(restarts + 1):
        if attempt:
            start = _start_joints(rng, j_init, limits)
        j, _ = minimize(fg, start, opts, with_gradient=True, precond=gn, precond_every=1, project=project)
        dist = float(np.sqrt(max(fg(j)[0], 0.0)))
        if dist < best_d:
            best_j, best_d = j, dist
        if best_d <= tolerance:
            return best_j
    raise IKNotConverged(f"pose distance {best_d:.3g} above tolerance {tolerance:.3g}", best_j, best_d)


# ---------------------------------------------------------------------------
# joints from image


@dataclass
class JointEstimate:
    joints: np.ndarray
    residual_px: float  # RMS over target coordinates
    converged: bool
    iterations: int


class _JointImageFit:
    """Pixel residuals of one image as a function of the joints alone."""

    def __init__(self, model: ModelParams, pixels, start):
        base = pose_from_params(model.kinematics.base)
        self.base = (base.rotation, base.translation)
        self.links = model.kinematics.links
        self.features = model.features
        self.cams = _camera_arrays(model)
        self.target = np.asarray(pixels, dtype=float)
        self.present = ~np.isnan(self.target[..., 0])
        _, z = self._render(np.asarray(start, dtype=float))
        # a start with target features behind a camera cannot count them later either
        self.required = int(np.sum(self.present & (z > DEPTH_EPSILON)))

    def _render(self, joints):
        r, t = fk_rt(self.base[0], self.base[1], self.links, joints)
        uv, z = render_points(*self.cams, world_points(r, t, self.features))
        return uv, ad.value_of(z)

    def residuals(self, joints):
        """``(residual vector, Jacobian or None, count in front)``."""
        dual = isinstance(joints, ad.Dual)
        uv, z = self._render(joints)
        use = self.present & (z > DEPTH_EPSILON)
        diff = uv - np.nan_to_num(self.target)
        if dual:
            return diff.value[use].ravel(), diff.grad[use].reshape(-1, diff.grad.shape[-1]), int(use.sum())
        return diff[use].ravel(), None, int(use.sum())

    def value_and_gradient(self, joints):
        r, J, count = self.residuals(ad.Dual.variable(np.asarray(joints, dtype=float)))
        if count < self.required:
            return np.inf, np.zeros(len(joints))
        return float(r @ r), 2.0 * (r @ J)

    def gauss_newton(self, joints):
        _, J, _ = self.residuals(ad.Dual.variable(np.asarray(joints, dtype=float)))
        return 2.0 * J.T @ J


def _solve_joints(model, pixels, start, project, opts):
    start = np.asarray(start, dtype=float)
    if project is not None:
        start = project(start)
    fit = _JointImageFit(model, pixels, start)
    x, report = minimize(fit.value_and_gradient, start, opts, with_gradient=True, precond=fit.gauss_newton, precond_every=1, project=project)
    r, _, count = fit.residuals(x)
    full = count == _count(pixels)
    rms = float(np.sqrt(r @ r / count)) if count and full else np.inf
    settled = report.termination_reason in (GRADIENT_TOL, LINE_SEARCH_FAILURE)
    return JointEstimate(x, rms, settled and full, report.iterations)


def infer_joints_from_image(
    model: ModelParams,
    target,
    j_init,
    limits=None,
    restarts: int = 4,
    exact_px: float = EXACT_PX,
    seed=0,
    opts: Optional[OptimizerOptions] = None,
    return_estimate: bool = False,
):
    """Joints whose predicted image best matches ``target``.

    The pixel loss is minimized directly over the joints from ``j_init``
    and from ``restarts`` random starts; the lowest residual wins.  Restarts
    are skipped once a start matches the target to ``exact_px``.  An infeasible
    target is not an error: the best fit is returned and its residual is
    available through ``return_estimate``.  Raises
    :class:`InferenceNotConverged` only if no start reaches a stationary
    point with every target feature in front of its camera.
    """
    pixels = target.pixels if isinstance(target, ServoTarget) else np.asarray(target, dtype=float)
    if _count(pixels) < MIN_DETECTIONS:
        raise InsufficientDetections(f"need {MIN_DETECTIONS} target coordinates, got {_count(pixels)}")
    opts = opts or OptimizerOptions(max_iterations=200, gradient_tolerance=1e-6)
    project = _limits_projector(limits)
    rng = np.random.default_rng(seed)
    best = _solve_joints(model, pixels, np.asarray(j_init, dtype=float), project, opts)
    for _ in range(restarts):
        if best.residual_px <= exact_px:
            break  # nothing left to improve
        est = _solve_joints(model, pixels, _start_joints(rng, j_init, limits), project, opts)
        # a restart must win clearly; on ties the start nearest j_init is kept
        if est.residual_px < best.residual_px - 1e-6 * (1.0 + best.residual_px):
            best = est
    if not np.isfinite(best.residual_px) or not best.converged:
        raise InferenceNotConverged(
            f"no start converged (best residual {best.residual_px:.3g} px)", best.joints, best.residual_px
        )
    return best if return_estimate else best.joints


# ---------------------------------------------------------------------------
# servoing


def servo_step(
    model: ModelParams,
    detections,
    target: ServoTarget,
    gain: float = DEFAULT_GAIN,
    joints=None,
    clamp: Optional[float] = DEFAULT_CLAMP,
    limits=None,
    joint_guess=None,
    seed=0,
):
    """Joint displacement ``gain * (j_target - j_current)``, clamped per joint.

    ``j_target`` is inferred from the target image.  ``j_current`` is the
    encoder reading ``joints`` when given; otherwise it is inferred from
    ``detections`` (pure-image mode, started at ``joint_guess``).  Returns
    ``(delta, j_target, j_current)``.
    """
    if not 0.0 < gain <= 1.0:
        raise ValueError("gain must lie in (0, 1]")
    if joints is None:
        guess = np.zeros(model.n) if joint_guess is None else np.asarray(joint_guess, dtype=float)
        current = infer_joints_from_image(model, detections, guess, limits=limits, seed=seed)
    else:
        current = np.asarray(joints, dtype=float)
    goal = infer_joints_from_image(model, target, current, limits=limits, seed=seed)
    delta = gain * (goal - current)
    if clamp is not None:
        delta = np.clip(delta, -clamp, clamp)
    return delta, goal, current


class Robot(Protocol):
    def read_joints(self) -> np.ndarray: ...

    def observe(self) -> Observation: ...

    def move(self, delta) -> None: ...


class SimRobot:
    """Simulated arm: executes displacements (clipped to limits, optional noise) and renders detections."""

    def __init__(self, world, joints, seed=0, actuation_noise: Optional[float] = None):
        from . import simulator

        self._sim = simulator
        self.world = world
        self.joints = simulator.clip(world, np.asarray(joints, dtype=float))
        self.rng = np.random.default_rng(seed)
        self.actuation_noise = world.controller_noise_sigma if actuation_noise is None else actuation_noise

    def read_joints(self) -> np.ndarray:
        return self.joints.copy()

    def observe(self) -> Observation:
        return self._sim.observe(self.world, self.joints, self.rng)

    def true_image(self) -> np.ndarray:
        return self._sim.render(self.world, self.joints)

    def move(self, delta) -> None:
        j = self.joints + np.asarray(delta, dtype=float)
        if self.actuation_noise > 0:
            j = j + self.rng.normal(0.0, self.actuation_noise, size=j.shape)
        self.joints = self._sim.clip(self.world, j)


@dataclass
class ServoTrace:
    """Per step: the command sent, the pixel RMS to the target afterwards, the inferred target joints."""

    initial_rms_px: float
    commands: List[np.ndarray] = field(default_factory=list)
    rms_px: List[float] = field(default_factory=list)
    inferred_joints: List[np.ndarray] = field(default_factory=list)
    true_rms_px: List[float] = field(default_factory=list)
    failed_steps: List[int] = field(default_factory=list)  # steps where inference raised

    @property
    def steps(self) -> int:
        return len(self.commands)

    @property
    def final_rms_px(self) -> float:
        return self.rms_px[-1] if self.rms_px else self.initial_rms_px

    @property
    def final_true_rms_px(self) -> Optional[float]:
        return self.true_rms_px[-1] if self.true_rms_px else None

    def to_rows(self):
        n = len(self.commands[0]) if self.commands else 0
        header = ["step", "rms_px"] + [f"command_{q}" for q in range(n)]
        rows = [[0, self.initial_rms_px] + [0.0] * n]
        for k, (cmd, rms) in enumerate(zip(self.commands, self.rms_px), start=1):
            rows.append([k, rms] + [float(v) for v in cmd])
        return header, rows

    def to_csv(self, path) -> None:
        header, rows = self.to_rows()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in rows:
                writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def servo_loop(
    model: ModelParams,
    robot,
    target: ServoTarget,
    gain: float = DEFAULT_GAIN,
    max_steps: int = 50,
    stop_px: float = 0.0,
    clamp: Optional[float] = DEFAULT_CLAMP,
    limits=None,
    use_encoders: bool = True,
    settle_rad: float = SETTLE_RAD,
    model_source: Optional[Callable[[], ModelParams]] = None,
) -> ServoTrace:
    """Servo until the observed RMS error drops below ``stop_px``, the
    command settles (every joint moves less than ``settle_rad``), or
    ``max_steps`` pass.

    ``model_source`` (e.g. ``ModelHandle.get``) supplies a fresh model
    snapshot each step, so online updates take effect mid-run.
    Non-convergence is recorded in the trace, never raised.
    """
    obs = robot.observe()
    trace = ServoTrace(image_rms(obs.pixels, target.pixels))
    guess = robot.read_joints() if use_encoders else np.zeros(model.n)
    for step in range(max_steps):
        if trace.final_rms_px < stop_px:
            break
        current_model = model_source() if model_source is not None else model
        try:
            delta, goal, current = servo_step(
                current_model,
                obs.pixels,
                target,
                gain,
                joints=robot.read_joints() if use_encoders else None,
                clamp=clamp,
                limits=limits,
                joint_guess=guess,
                seed=step,
            )
        except (InferenceNotConverged, InsufficientDetections) as exc:
            # hold still and record the failure; the trace is the report
            delta = np.zeros(model.n)
            goal = getattr(exc, "best", None)
            current = guess
            trace.failed_steps.append(step + 1)
        robot.move(delta)
        guess = current + delta
        obs = robot.observe()
        trace.commands.append(np.asarray(delta, dtype=float))
        trace.rms_px.append(image_rms(obs.pixels, target.pixels))
        trace.inferred_joints.append(None if goal is None else np.asarray(goal, dtype=float))
        if hasattr(robot, "true_image"):
            trace.true_rms_px.append(image_rms(robot.true_image(), target.pixels))
        settled = np.max(np.abs(delta), initial=0.0) < settle_rad
        if settled and (not trace.failed_steps or trace.failed_steps[-1] != step + 1):
            break
    return trace
