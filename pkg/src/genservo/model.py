"""Generative model from joint angles to feature pixel coordinates.

Three stages are chained: Denavit-Hartenberg forward kinematics gives the
end-effector pose, the rigid feature structure places each feature in the
world, and pinhole cameras project the features to pixels.

Array layout used throughout: joints ``(..., n)``, links ``(n, 4)`` with
columns ``(omega, d, a, alpha)``, features ``(m, 3)`` in the end-effector
frame, intrinsics ``(c, 4)`` as ``(fx, fy, cx, cy)``, and camera-from-world
extrinsics.  Pixel predictions are ``(..., c, m, 2)``.

The ``*_rt`` and ``render_*`` functions are written against
:mod:`genservo.dual` so every parameter (and the joints) can be
differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import dual as ad
from .errors import DimensionMismatch
from .geometry import Pose, PoseParams, compose, params_from_pose, pose_from_params

DEPTH_EPSILON = 1e-6
FORMAT_VERSION = 1


class DHLink(NamedTuple):
    omega: float
    d: float
    a: float
    alpha: float


@dataclass(frozen=True, eq=False)
class KinematicParams:
    base: PoseParams
    links: np.ndarray  # (n, 4): omega, d, a, alpha

    def __post_init__(self):
        links = np.array(self.links, dtype=float).reshape(-1, 4)
        if len(links) < 1:
            raise DimensionMismatch("a kinematic chain needs at least one link")
        object.__setattr__(self, "links", links)

    @property
    def n(self) -> int:
        return len(self.links)

    def link(self, i: int) -> DHLink:
        return DHLink(*self.links[i])


@dataclass(frozen=True, eq=False)
class CameraParams:
    intrinsics: np.ndarray  # fx, fy, cx, cy
    extrinsics: PoseParams  # camera-from-world

    def __post_init__(self):
        intr = np.array(self.intrinsics, dtype=float).reshape(4)
        if not (intr[0] > 0 and intr[1] > 0):
            raise ValueError(f"focal lengths must be positive, got {intr[:2]}")
        object.__setattr__(self, "intrinsics", intr)

    @property
    def pose(self) -> Pose:
        return pose_from_params(self.extrinsics)


@dataclass(frozen=True, eq=False)
class ModelParams:
    kinematics: KinematicParams
    features: np.ndarray  # (m, 3)
    cameras: tuple = field(default_factory=tuple)

    def __post_init__(self):
        f = np.array(self.features, dtype=float).reshape(-1, 3)
        if len(f) < 1:
            raise DimensionMismatch("need at least one feature")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "cameras", tuple(self.cameras))

    @property
    def n(self) -> int:
        return self.kinematics.n

    @property
    def m(self) -> int:
        return len(self.features)

    @property
    def c(self) -> int:
        return len(self.cameras)

    @property
    def parameter_count(self) -> int:
        return parameter_count(self.n, self.m, self.c)

    def intrinsics_array(self) -> np.ndarray:
        return np.array([cam.intrinsics for cam in self.cameras])

    def extrinsics_arrays(self):
        poses = [cam.pose for cam in self.cameras]
        return np.array([p.rotation for p in poses]), np.array([p.translation for p in poses])

    def with_(self, **changes) -> "ModelParams":
        return ModelParams(
            kinematics=changes.get("kinematics", self.kinematics),
            features=changes.get("features", self.features),
            cameras=changes.get("cameras", self.cameras),
        )


@dataclass(frozen=True, eq=False)
class PixelPrediction:
    uv: np.ndarray  # (..., c, m, 2)
    in_front: np.ndarray  # (..., c, m)

    def masked(self) -> np.ndarray:
        """Pixel coordinates with NaN wherever the point is not in front of the camera."""
        return np.where(self.in_front[..., None], self.uv, np.nan)


# ---------------------------------------------------------------------------
# differentiable core


def _mv(r, v):
    return (r @ ad.reshape(v, v.shape + (1,)))[..., 0]


# Rz(theta) = cos(theta) _CS + sin(theta) _SN + _EZ, and likewise for Rx;
# building rotations as weighted constant matrices avoids stacking scalars
_CS_Z = np.diag([1.0, 1.0, 0.0])
_SN_Z = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
_E_Z = np.diag([0.0, 0.0, 1.0])
_CS_X = np.diag([0.0, 1.0, 1.0])
_SN_X = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
_E_X = np.diag([1.0, 0.0, 0.0])
_UNIT = np.eye(3)


def _weighted(c, s, cs, sn, e):
    shape = np.shape(ad.value_of(c))
    if ad.is_dual(c):
        c, s = ad.reshape(c, shape + (1, 1)), ad.reshape(s, shape + (1, 1))
    else:
        c, s = np.reshape(c, shape + (1, 1)), np.reshape(s, shape + (1, 1))
    return c * cs + s * sn + e


def _scaled(x, v):
    shape = np.shape(ad.value_of(x))
    x = ad.reshape(x, shape + (1,)) if ad.is_dual(x) else np.reshape(x, shape + (1,))
    return x * v


def dh_rt(links, joints):
    """Per-link DH transforms ``Rz(q + omega) Tz(d) Tx(a) Rx(alpha)``.

    Returns a list of ``(R, t)`` pairs, one per link, each batched over the
    leading joint dimensions.
    """
    out = []
    for i in range(links.shape[0]):
        theta = joints[..., i] + links[i, 0]
        d, a, alpha = links[i, 1], links[i, 2], links[i, 3]
        ct, st = ad.cos(theta), ad.sin(theta)
        rz = _weighted(ct, st, _CS_Z, _SN_Z, _E_Z)
        rx = _weighted(ad.cos(alpha), ad.sin(alpha), _CS_X, _SN_X, _E_X)
        r = rz @ rx
        t = _scaled(a * ct, _UNIT[0]) + _scaled(a * st, _UNIT[1]) + _scaled(d, _UNIT[2])
        if np.shape(ad.value_of(t)) != np.shape(ad.value_of(theta)) + (3,):
            t = t + _scaled(0.0 * theta, _UNIT[2])
        out.append((r, t))
    return out


def fk_rt(base_r, base_t, links, joints):
    """End-effector rotation and translation: base composed with every link in order."""
    r, t = base_r, base_t
    for ri, ti in dh_rt(links, joints):
        t = _mv(r, ti) + t
        r = r @ ri
    return r, t


def world_points(r, t, features):
    """Features mapped through poses ``(..., 3, 3), (..., 3)`` -> ``(..., m, 3)``."""
    return features @ ad.swapaxes(r, -1, -2) + ad.reshape(t, t.shape[:-1] + (1, 3))


def render_points(intrinsics, ext_r, ext_t, points):
    """Project world points ``(..., m, 3)`` into every camera.

    Returns ``(uv, depth)`` with shapes ``(..., c, m, 2)`` and ``(..., c, m)``.
    Points at non-positive depth get a placeholder depth of one so the
    output stays finite; callers mask them via ``depth``.
    """
    pts = ad.reshape(points, points.shape[:-2] + (1,) + points.shape[-2:])
    cam = pts @ ad.swapaxes(ext_r, -1, -2) + ad.reshape(ext_t, ext_t.shape[:-1] + (1, 3))
    z = cam[..., 2]
    zval = ad.value_of(z)
    safe_z = ad.where(zval > DEPTH_EPSILON, z, 1.0)
    fx = ad.reshape(intrinsics[..., 0], intrinsics.shape[:-1] + (1,))
    fy = ad.reshape(intrinsics[..., 1], intrinsics.shape[:-1] + (1,))
    cx = ad.reshape(intrinsics[..., 2], intrinsics.shape[:-1] + (1,))
    cy = ad.reshape(intrinsics[..., 3], intrinsics.shape[:-1] + (1,))
    inv_z = 1.0 / safe_z
    u = fx * cam[..., 0] * inv_z + cx
    v = fy * cam[..., 1] * inv_z + cy
    return ad.stack([u, v], axis=-1), z


def render_from_pose(r, t, features, intrinsics, ext_r, ext_t):
    return render_points(intrinsics, ext_r, ext_t, world_points(r, t, features))


def render_from_joints(base_r, base_t, links, features, intrinsics, ext_r, ext_t, joints):
    r, t = fk_rt(base_r, base_t, links, joints)
    return render_from_pose(r, t, features, intrinsics, ext_r, ext_t)


# ---------------------------------------------------------------------------
# plain-number API


def dh_link_transform(link, joint_angle: float) -> Pose:
    (r, t), = dh_rt(np.asarray(link, dtype=float).reshape(1, 4), np.array([joint_angle], dtype=float))
    return Pose(r, t)


def _check_joints(kin: KinematicParams, joints) -> np.ndarray:
    joints = np.asarray(joints, dtype=float)
    if joints.shape[-1:] != (kin.n,):
        raise DimensionMismatch(f"expected {kin.n} joint values, got shape {joints.shape}")
    return joints


def forward_kinematics(kin: KinematicParams, joints) -> Pose:
    joints = _check_joints(kin, joints)
    if joints.ndim != 1:
        raise DimensionMismatch("forward_kinematics takes one joint vector; use forward_kinematics_batch")
    base = pose_from_params(kin.base)
    r, t = fk_rt(base.rotation, base.translation, kin.links, joints)
    return Pose(r, t)


def forward_kinematics_batch(kin: KinematicParams, joints):
    """Rotations ``(T, 3, 3)`` and translations ``(T, 3)`` for a ``(T, n)`` joint array."""
    joints = _check_joints(kin, joints)
    base = pose_from_params(kin.base)
    return fk_rt(base.rotation, base.translation, kin.links, joints)


def feature_world_coords(features, pose: Pose) -> np.ndarray:
    return world_points(pose.rotation, pose.translation, np.asarray(features, dtype=float))


def project(cam: CameraParams, points) -> PixelPrediction:
    pose = cam.pose
    uv, z = render_points(
        cam.intrinsics[None], pose.rotation[None], pose.translation[None], np.asarray(points, dtype=float)
    )
    return PixelPrediction(uv[..., 0, :, :], z[..., 0, :] > DEPTH_EPSILON)


def _camera_arrays(cameras: Sequence[CameraParams]):
    intr = np.array([c.intrinsics for c in cameras])
    poses = [c.pose for c in cameras]
    return intr, np.array([p.rotation for p in poses]), np.array([p.translation for p in poses])


def predict_image_from_pose(features, cameras: Sequence[CameraParams], pose: Pose) -> PixelPrediction:
    intr, er, et = _camera_arrays(cameras)
    uv, z = render_from_pose(pose.rotation, pose.translation, np.asarray(features, dtype=float), intr, er, et)
    return PixelPrediction(uv, z > DEPTH_EPSILON)


def predict_image(params: ModelParams, joints) -> PixelPrediction:
    """Pixels for one joint vector ``(n,)`` or a batch ``(T, n)``."""
    joints = _check_joints(params.kinematics, joints)
    base = pose_from_params(params.kinematics.base)
    intr, er, et = _camera_arrays(params.cameras)
    uv, z = render_from_joints(
        base.rotation, base.translation, params.kinematics.links, params.features, intr, er, et, joints
    )
    return PixelPrediction(uv, z > DEPTH_EPSILON)


# ---------------------------------------------------------------------------
# packing


def parameter_count(n: int, m: int, c: int) -> int:
    return 6 + 4 * n + 3 * m + 10 * c


def pack(params: ModelParams) -> np.ndarray:
    """Flatten in the order: base (translation, rotation), links row-major,
    features row-major, then per camera ``fx, fy, cx, cy`` followed by the
    extrinsic translation and rotation."""
    parts = [params.kinematics.base.vector(), params.kinematics.links.ravel(), params.features.ravel()]
    for cam in params.cameras:
        parts.append(cam.intrinsics)
        parts.append(cam.extrinsics.vector())
    return np.concatenate(parts)


def unpack(vector, n: int, m: int, c: int) -> ModelParams:
    v = np.asarray(vector, dtype=float).ravel()
    if v.size != parameter_count(n, m, c):
        raise DimensionMismatch(f"expected {parameter_count(n, m, c)} values for (n={n}, m={m}, c={c}), got {v.size}")
    base = PoseParams.from_vector(v[:6])
    i = 6
    links = v[i : i + 4 * n].reshape(n, 4)
    i += 4 * n
    features = v[i : i + 3 * m].reshape(m, 3)
    i += 3 * m
    cams = []
    for _ in range(c):
        cams.append(CameraParams(v[i : i + 4], PoseParams.from_vector(v[i + 4 : i + 10])))
        i += 10
    return ModelParams(KinematicParams(base, links), features, tuple(cams))


# ---------------------------------------------------------------------------
# gauge transformations


def scale_gauge(params: ModelParams, s: float) -> ModelParams:
    """Multiply every length-valued parameter by ``s``; predictions are unchanged."""
    kin = params.kinematics
    links = kin.links.copy()
    links[:, 1:3] *= s
    base = PoseParams(kin.base.translation * s, kin.base.rotation)
    cams = tuple(
        CameraParams(cam.intrinsics, PoseParams(cam.extrinsics.translation * s, cam.extrinsics.rotation))
        for cam in params.cameras
    )
    return ModelParams(KinematicParams(base, links), params.features * s, cams)


def frame_gauge(params: ModelParams, g: Pose) -> ModelParams:
    """Move the world frame: base ``b -> G b`` and extrinsics ``E -> E G^-1``."""
    kin = params.kinematics
    base = params_from_pose(compose(g, pose_from_params(kin.base)))
    ginv = g.inverse()
    cams = tuple(
        CameraParams(cam.intrinsics, params_from_pose(compose(cam.pose, ginv))) for cam in params.cameras
    )
    return ModelParams(KinematicParams(base, kin.links), params.features, cams)


# ---------------------------------------------------------------------------
# model file


def to_dict(params: ModelParams, ground_truth: bool = False) -> dict:
    kin = params.kinematics
    return {
        "format": "genservo-model",
        "version": FORMAT_VERSION,
        "n": params.n,
        "m": params.m,
        "c": params.c,
        "ground_truth": bool(ground_truth),
        "base": {"translation": kin.base.translation.tolist(), "rotation": kin.base.rotation.tolist()},
        "links": [dict(zip(DHLink._fields, map(float, row))) for row in kin.links],
        "features": params.features.tolist(),
        "cameras": [
            {
                "fx": float(cam.intrinsics[0]),
                "fy": float(cam.intrinsics[1]),
                "cx": float(cam.intrinsics[2]),
                "cy": float(cam.intrinsics[3]),
                "extrinsics": {
                    "translation": cam.extrinsics.translation.tolist(),
                    "rotation": cam.extrinsics.rotation.tolist(),
                },
            }
            for cam in params.cameras
        ],
    }


def from_dict(d: dict) -> ModelParams:
    if d.get("version", FORMAT_VERSION) > FORMAT_VERSION:
        raise ValueError(f"unsupported model file version {d['version']}")
    base = PoseParams(d["base"]["translation"], d["base"]["rotation"])
    links = [[lk[k] for k in DHLink._fields] for lk in d["links"]]
    cams = tuple(
        CameraParams(
            [cam["fx"], cam["fy"], cam["cx"], cam["cy"]],
            PoseParams(cam["extrinsics"]["translation"], cam["extrinsics"]["rotation"]),
        )
        for cam in d["cameras"]
    )
    params = ModelParams(KinematicParams(base, links), d["features"], cams)
    for key, val in (("n", params.n), ("m", params.m), ("c", params.c)):
        if key in d and d[key] != val:
            raise DimensionMismatch(f"model file declares {key}={d[key]} but contains {val}")
    return params
