"""Ground-truth robot/camera world used to generate data and check results.

Three presets ship with the package (``ur5_sim``, ``xarm_sim`` and
``baxter_like``): plausible DH tables for 6- and 7-DoF arms, twelve features
on a small block at the tool, and two cameras about 1.5 m from the workspace
at +-30 degrees.  They are not manufacturer datasheets.

Randomness is always explicit: every function that draws noise takes a
``numpy.random.Generator`` or a seed.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from .data import Dataset, Observation
from .errors import ConfigInvalid, IndexOutOfRange, JointLimitViolation
from .geometry import Pose, PoseParams, compose, look_at, params_from_pose
from .model import CameraParams, KinematicParams, ModelParams, forward_kinematics, predict_image

PI = np.pi


@dataclass(frozen=True, eq=False)
class WorldTruth:
    true_model: ModelParams
    joint_limits: np.ndarray  # (n, 2)
    pixel_noise_sigma: float = 0.5
    controller_noise_sigma: float = 0.0
    image_bounds: tuple = (640, 480)
    rng_seed: int = 0
    name: str = "custom"
    nominal_links: Optional[np.ndarray] = None
    factory_intrinsics: Optional[np.ndarray] = None
    step_scale: float = 0.15
    config: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        lim = np.asarray(self.joint_limits, dtype=float).reshape(-1, 2)
        if len(lim) != self.true_model.n:
            raise ConfigInvalid(f"{len(lim)} joint limits for a {self.true_model.n}-joint arm")
        if not np.all(lim[:, 0] < lim[:, 1]):
            raise ConfigInvalid("joint limits need lo < hi")
        if self.pixel_noise_sigma < 0 or self.controller_noise_sigma < 0:
            raise ConfigInvalid("noise levels must be non-negative")
        object.__setattr__(self, "joint_limits", lim)
        if self.nominal_links is not None:
            object.__setattr__(self, "nominal_links", np.asarray(self.nominal_links, dtype=float).reshape(-1, 4))
        if self.factory_intrinsics is not None:
            object.__setattr__(self, "factory_intrinsics", np.asarray(self.factory_intrinsics, dtype=float))

    @property
    def n(self) -> int:
        return self.true_model.n

    @property
    def m(self) -> int:
        return self.true_model.m

    @property
    def c(self) -> int:
        return self.true_model.c

    @property
    def home(self) -> np.ndarray:
        return self.joint_limits.mean(axis=1)

    def replace(self, **changes) -> "WorldTruth":
        return replace(self, **changes)

    def factory_guess(self) -> np.ndarray:
        """Initial intrinsics ``(fx, fy, cx, cy)`` as a datasheet would give them."""
        if self.factory_intrinsics is not None:
            return self.factory_intrinsics.copy()
        w, h = self.image_bounds
        return np.array([w, w, w / 2.0, h / 2.0], dtype=float)


# ---------------------------------------------------------------------------
# perturbations


@dataclass(frozen=True, eq=False)
class MoveCamera:
    index: int
    delta: Pose  # motion of the camera, expressed in the world frame


@dataclass(frozen=True, eq=False)
class AddCamera:
    camera: CameraParams


@dataclass(frozen=True, eq=False)
class AttachFeatures:
    coords: np.ndarray  # (k, 3) new rows in the end-effector frame

    @classmethod
    def random(cls, k: int, seed=0, center=(0.0, 0.0, 0.06), spread=0.05) -> "AttachFeatures":
        rng = np.random.default_rng(seed)
        return cls(np.asarray(center) + rng.uniform(-spread, spread, size=(k, 3)))


@dataclass(frozen=True, eq=False)
class JitterLinks:
    sigma: float  # relative
    seed: int = 0


Perturbation = Union[MoveCamera, AddCamera, AttachFeatures, JitterLinks]


def apply_perturbation(world: WorldTruth, p: Perturbation) -> WorldTruth:
    """Return a modified copy of ``world``; the input is left untouched."""
    tm = world.true_model
    if isinstance(p, MoveCamera):
        if not 0 <= p.index < tm.c:
            raise IndexOutOfRange(f"camera index {p.index} out of range for {tm.c} cameras")
        cams = list(tm.cameras)
        old = cams[p.index]
        new_pose = compose(old.pose, p.delta.inverse())
        cams[p.index] = CameraParams(old.intrinsics.copy(), params_from_pose(new_pose))
        return world.replace(true_model=tm.with_(cameras=tuple(cams)))
    if isinstance(p, AddCamera):
        return world.replace(true_model=tm.with_(cameras=tm.cameras + (p.camera,)))
    if isinstance(p, AttachFeatures):
        coords = np.asarray(p.coords, dtype=float).reshape(-1, 3)
        return world.replace(true_model=tm.with_(features=np.vstack([tm.features, coords])))
    if isinstance(p, JitterLinks):
        rng = np.random.default_rng(p.seed)
        links = tm.kinematics.links.copy()
        links[:, 1:3] *= 1.0 + rng.normal(0.0, p.sigma, size=(tm.n, 2))
        kin = KinematicParams(tm.kinematics.base, links)
        return world.replace(true_model=tm.with_(kinematics=kin))
    raise TypeError(f"unknown perturbation {p!r}")


# ---------------------------------------------------------------------------
# sensing and data collection


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def render(world: WorldTruth, joints) -> np.ndarray:
    """Noiseless detections ``(..., c, m, 2)`` with NaN outside the image or behind a camera."""
    pred = predict_image(world.true_model, joints)
    w, h = world.image_bounds
    uv = pred.uv
    vis = pred.in_front & (uv[..., 0] >= 0) & (uv[..., 0] < w) & (uv[..., 1] >= 0) & (uv[..., 1] < h)
    return np.where(vis[..., None], uv, np.nan)


def check_limits(world: WorldTruth, joints, tol: float = 1e-9):
    j = np.asarray(joints, dtype=float)
    lo, hi = world.joint_limits[:, 0], world.joint_limits[:, 1]
    if np.any(j < lo - tol) or np.any(j > hi + tol):
        raise JointLimitViolation(f"joints {j} outside limits")


def observe(world: WorldTruth, joints, rng=None) -> Observation:
    """Detections for one joint vector with iid Gaussian pixel noise."""
    joints = np.asarray(joints, dtype=float)
    check_limits(world, joints)
    rng = _as_rng(world.rng_seed if rng is None else rng)
    px = render(world, joints)
    if world.pixel_noise_sigma > 0:
        px = px + rng.normal(0.0, world.pixel_noise_sigma, size=px.shape)
    return Observation(joints.copy(), px)


def clip(world: WorldTruth, joints) -> np.ndarray:
    return np.clip(joints, world.joint_limits[:, 0], world.joint_limits[:, 1])


def random_joints(world: WorldTruth, rng, size=None) -> np.ndarray:
    rng = _as_rng(rng)
    lo, hi = world.joint_limits[:, 0], world.joint_limits[:, 1]
    shape = (world.n,) if size is None else (size, world.n)
    return rng.uniform(lo, hi, size=shape)


def collect_random(world: WorldTruth, T: int, step_scale: Optional[float] = None, seed=None, start=None) -> Dataset:
    """Random walk in joint space.

    Each command is uniform in ``[-step_scale, step_scale]^n`` and clipped so
    the target stays inside the limits; the executed motion adds controller
    noise.  Records executed joints, commanded displacements and detections.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    step = world.step_scale if step_scale is None else float(step_scale)
    rng = _as_rng(world.rng_seed if seed is None else seed)
    j = random_joints(world, rng) if start is None else np.asarray(start, dtype=float).copy()
    joints, pixels, actions = [], [], []
    for t in range(T):
        obs = observe(world, j, rng)
        joints.append(obs.joints)
        pixels.append(obs.pixels)
        if t == T - 1:
            break
        a = clip(world, j + rng.uniform(-step, step, size=world.n)) - j
        actions.append(a)
        if world.controller_noise_sigma > 0:
            j = clip(world, j + a + rng.normal(0.0, world.controller_noise_sigma, size=world.n))
        else:
            j = j + a
    actions = np.array(actions).reshape(T - 1, world.n)
    return Dataset(np.array(pixels), np.array(joints), actions)


def collect_uniform(world: WorldTruth, T: int, seed=None) -> Dataset:
    """Independent joint vectors drawn uniformly inside the limits (held-out sets)."""
    rng = _as_rng(world.rng_seed if seed is None else seed)
    joints = random_joints(world, rng, size=T)
    pixels = np.array([observe(world, j, rng).pixels for j in joints])
    return Dataset(pixels, joints, None)


# ---------------------------------------------------------------------------
# world configs


def _tool_features() -> np.ndarray:
    # three 6 cm square markers on the faces of a block below the flange
    s = 0.03
    sq = np.array([[-s, -s], [s, -s], [s, s], [-s, s]])
    bottom = np.column_stack([sq, np.full(4, 0.10)])
    side_x = np.column_stack([np.full(4, 0.045), sq[:, 0], sq[:, 1] + 0.06])
    side_y = np.column_stack([sq[:, 0], np.full(4, -0.045), sq[:, 1] + 0.06])
    return np.vstack([bottom, side_x, side_y])


_PRESETS = {
    "ur5_sim": {
        "links": [
            [0.0, 0.089159, 0.0, PI / 2],
            [0.0, 0.0, -0.425, 0.0],
            [0.0, 0.0, -0.39225, 0.0],
            [0.0, 0.10915, 0.0, PI / 2],
            [0.0, 0.09465, 0.0, -PI / 2],
            [0.0, 0.0823, 0.0, 0.0],
        ],
        "home": [0.0, -1.2, 1.5, -1.9, -1.57, 0.0],
        "range": [0.5, 0.35, 0.45, 0.6, 0.6, 0.9],
        "base_z": 0.0,
    },
    "xarm_sim": {
        "links": [
            [0.0, 0.267, 0.0, -PI / 2],
            [-1.3849179, 0.0, 0.28948866, 0.0],
            [1.3849179, 0.0, 0.0775, -PI / 2],
            [0.0, 0.3425, 0.0, PI / 2],
            [0.0, 0.0, 0.076, -PI / 2],
            [0.0, 0.097, 0.0, 0.0],
        ],
        "home": [0.0, -0.3, -0.6, 0.0, 0.9, 0.0],
        "range": [0.5, 0.3, 0.35, 0.6, 0.5, 0.9],
        "base_z": 0.0,
    },
    "baxter_like": {
        "links": [
            [0.0, 0.27035, 0.069, -PI / 2],
            [PI / 2, 0.0, 0.0, PI / 2],
            [0.0, 0.36435, 0.069, -PI / 2],
            [0.0, 0.0, 0.0, PI / 2],
            [0.0, 0.37429, 0.010, -PI / 2],
            [0.0, 0.0, 0.0, PI / 2],
            [0.0, 0.229525, 0.0, 0.0],
        ],
        "home": [0.0, -0.3, 0.0, 1.2, 0.0, 0.6, 0.0],
        "range": [0.4, 0.3, 0.4, 0.35, 0.5, 0.4, 0.8],
        "base_z": 0.4,
    },
}

PRESET_NAMES = tuple(_PRESETS)


def _nominal(links: np.ndarray) -> np.ndarray:
    # datasheet values: the truth rounded to the millimetre / hundredth of a radian
    nom = links.copy()
    nom[:, 1:3] = np.round(nom[:, 1:3] * 1000.0) / 1000.0
    nom[:, 0] = np.round(nom[:, 0] * 100.0) / 100.0
    return nom


def preset_config(name: str, **overrides) -> dict:
    """Full world config (plain JSON-compatible dict) for a named preset."""
    if name not in _PRESETS:
        raise ConfigInvalid(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
    spec = _PRESETS[name]
    links = np.array(spec["links"], dtype=float)
    home = np.array(spec["home"], dtype=float)
    rng_half = np.array(spec["range"], dtype=float)
    base = Pose(np.eye(3), [0.0, 0.0, spec["base_z"]])
    kin = KinematicParams(params_from_pose(base), links)
    ee = forward_kinematics(kin, home)
    target = ee.apply(np.array([0.0, 0.0, 0.06]))
    out = target[:2] - base.translation[:2]
    out /= np.linalg.norm(out)
    cams = []
    intrinsics = [[615.0, 612.0, 323.5, 238.0], [628.0, 625.0, 316.0, 243.5]]
    for k, az in enumerate((PI / 6, -PI / 6)):
        c, s = np.cos(az), np.sin(az)
        horiz = np.array([c * out[0] - s * out[1], s * out[0] + c * out[1]])
        eye = target + np.array([1.4 * horiz[0], 1.4 * horiz[1], 0.55])
        pose = look_at(eye, target)
        fx, fy, cx, cy = intrinsics[k]
        cams.append(
            {
                "fx": fx,
                "fy": fy,
                "cx": cx,
                "cy": cy,
                "extrinsics": {
                    "translation": pose.translation.tolist(),
                    "rotation": params_from_pose(pose).rotation.tolist(),
                },
            }
        )
    cfg = {
        "name": name,
        "links": [dict(zip(("omega", "d", "a", "alpha"), map(float, r))) for r in links],
        "nominal_links": [dict(zip(("omega", "d", "a", "alpha"), map(float, r))) for r in _nominal(links)],
        "base": {"translation": base.translation.tolist(), "rotation": [0.0, 0.0, 0.0]},
        "joint_limits": np.column_stack([home - rng_half, home + rng_half]).tolist(),
        "features": _tool_features().tolist(),
        "cameras": cams,
        "factory_intrinsics": [640.0, 640.0, 320.0, 240.0],
        "noise": {"pixel_sigma": 0.5, "controller_sigma": 0.0},
        "image_bounds": [640, 480],
        "step_scale": 0.15,
        "seed": 0,
    }
    return _merge(cfg, overrides)


def _merge(cfg: dict, overrides: dict) -> dict:
    cfg = copy.deepcopy(cfg)
    for key, val in overrides.items():
        if isinstance(val, dict) and isinstance(cfg.get(key), dict):
            cfg[key] = _merge(cfg[key], val)
        else:
            cfg[key] = val
    return cfg


def _links_from(entries) -> np.ndarray:
    try:
        return np.array([[e["omega"], e["d"], e["a"], e["alpha"]] if isinstance(e, dict) else e for e in entries], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigInvalid(f"bad link table: {exc}") from exc


CONFIG_KEYS = frozenset(
    ("name", "links", "nominal_links", "base", "joint_limits", "features", "cameras",
     "factory_intrinsics", "noise", "image_bounds", "step_scale", "seed")
)


def make_world(config: Union[str, dict], **overrides) -> WorldTruth:
    """Build a :class:`WorldTruth` from a preset name or a config dict.

    ``overrides`` replace config entries (nested dicts are merged), e.g.
    ``make_world("ur5_sim", noise={"pixel_sigma": 0.0})``.
    """
    unknown = set(overrides) - CONFIG_KEYS
    if not isinstance(config, str):
        unknown |= set(config) - CONFIG_KEYS
    if unknown:
        raise ConfigInvalid(f"unknown config keys: {', '.join(sorted(unknown))}")
    if isinstance(config, str):
        cfg = preset_config(config, **overrides)
    else:
        cfg = _merge(config, overrides)
    try:
        links = _links_from(cfg["links"])
        base = PoseParams(cfg.get("base", {}).get("translation", [0, 0, 0]), cfg.get("base", {}).get("rotation", [0, 0, 0]))
        cams = tuple(
            CameraParams(
                [cam["fx"], cam["fy"], cam["cx"], cam["cy"]],
                PoseParams(cam["extrinsics"]["translation"], cam["extrinsics"]["rotation"]),
            )
            for cam in cfg["cameras"]
        )
        model = ModelParams(KinematicParams(base, links), cfg["features"], cams)
        noise = cfg.get("noise", {})
        nominal = _links_from(cfg["nominal_links"]) if cfg.get("nominal_links") else None
        world = WorldTruth(
            true_model=model,
            joint_limits=cfg["joint_limits"],
            pixel_noise_sigma=float(noise.get("pixel_sigma", 0.5)),
            controller_noise_sigma=float(noise.get("controller_sigma", 0.0)),
            image_bounds=tuple(int(v) for v in cfg.get("image_bounds", (640, 480))),
            rng_seed=int(cfg.get("seed", 0)),
            name=str(cfg.get("name", "custom")),
            nominal_links=nominal,
            factory_intrinsics=cfg.get("factory_intrinsics"),
            step_scale=float(cfg.get("step_scale", 0.15)),
            config=cfg,
        )
    except ConfigInvalid:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigInvalid(f"invalid world config: {exc}") from exc
    return world


def single_camera(world: WorldTruth, index: int = 0) -> WorldTruth:
    """Copy of ``world`` observed by one of its cameras only."""
    if not 0 <= index < world.c:
        raise IndexOutOfRange(f"camera index {index} out of range")
    tm = world.true_model
    return world.replace(true_model=tm.with_(cameras=(tm.cameras[index],)))
