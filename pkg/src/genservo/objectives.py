"""Sparse-aware pixel and pose objectives for the learning stages.

Every pixel residual ``(t, i, k)`` depends on the global kinematic
parameters, on feature ``k`` only, on camera ``i`` only and on the
timestep-``t`` pose or joints only.  Variables of one group therefore share a
small block of derivative slots: a residual sees exactly one member of each
group, so forward-mode propagation with ``slots = globals + 3 + 4 + 6 + 6 + n``
partials yields the full gradient after summing over the right axes.  This
keeps the cost of an exact gradient independent of ``T``, ``m`` and ``c``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse

from . import dual as ad
from .errors import NonFiniteObjective
from .geometry import rotvec_to_matrix
from .model import DEPTH_EPSILON, fk_rt, render_points, world_points

# focal lengths are kept above this floor so a runaway fit stays a valid camera
MIN_FOCAL_PX = 1.0


def _global_seed(value, start, nslots):
    value = np.asarray(value, dtype=float)
    size = value.size
    grad = np.zeros((size, nslots))
    grad[np.arange(size), start + np.arange(size)] = 1.0
    return ad.Dual(value, grad.reshape(value.shape + (nslots,)))


def _local_seed(value, start, nslots, free=None):
    # the last axis of ``value`` maps onto slots ``start + q``; rows not in
    # ``free`` (boolean over the leading axis) carry no partials
    value = np.asarray(value, dtype=float)
    k = value.shape[-1]
    grad = np.zeros(value.shape + (nslots,))
    grad[..., np.arange(k), start + np.arange(k)] = 1.0
    if free is not None:
        grad[~np.asarray(free, dtype=bool)] = 0.0
    return ad.Dual(value, grad)


def pixel_loss(predicted_uv, in_front, observed):
    """Sum of squared pixel errors over present, in-front entries, and their count."""
    observed = np.asarray(observed, dtype=float)
    mask = ~np.isnan(observed[..., 0]) & np.asarray(in_front, dtype=bool)
    diff = np.where(mask[..., None], np.asarray(predicted_uv) - np.nan_to_num(observed), 0.0)
    return float(np.sum(diff * diff)), int(mask.sum())


@dataclass
class Evaluation:
    value: float
    gradient: np.ndarray
    hessian_diag: np.ndarray
    count: int


@dataclass
class PixelProblem:
    """Pixel reprojection objective over a chosen set of free variables.

    Either ``poses`` (``(R0, t)`` per timestep; the truncated model) or
    ``kinematics`` together with ``joints`` drives the end-effector.
    Rotations are parameterized as ``R0 @ exp(delta)`` around the stored
    values, so every free variable block starts at zero rotation offset.
    """

    observed: np.ndarray  # (T, c, m, 2)
    features: np.ndarray  # (m, 3)
    intrinsics: np.ndarray  # (c, 4)
    ext_rotation: np.ndarray  # (c, 3, 3) camera-from-world
    ext_translation: np.ndarray  # (c, 3)
    pose_rotation: Optional[np.ndarray] = None  # (T, 3, 3)
    pose_translation: Optional[np.ndarray] = None  # (T, 3)
    base_rotation: Optional[np.ndarray] = None
    base_translation: Optional[np.ndarray] = None
    links: Optional[np.ndarray] = None
    joints: Optional[np.ndarray] = None  # (T, n)
    free_kinematics: bool = False
    free_features: Optional[np.ndarray] = None  # (m,) bool
    free_intrinsics: Optional[np.ndarray] = None  # (c,) bool
    free_extrinsics: Optional[np.ndarray] = None  # (c,) bool
    free_poses: bool = False
    free_joints: bool = False
    joint_penalty: float = 0.0
    actions: Optional[np.ndarray] = None  # (T-1, n), used with free_joints
    joint_anchor: Optional[np.ndarray] = None  # (n,), known first joints, used with free_joints
    keep_in_front: bool = True
    min_focal: float = MIN_FOCAL_PX
    layout: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.observed = np.asarray(self.observed, dtype=float)
        T, c, m, _ = self.observed.shape
        self.T, self.c, self.m = T, c, m
        self.by_pose = self.pose_rotation is not None
        if self.by_pose == (self.links is not None):
            raise ValueError("give either per-timestep poses or kinematics with joints")
        self.n = 0 if self.links is None else self.links.shape[0]
        none = lambda k: np.zeros(k, dtype=bool)
        self.free_features = none(m) if self.free_features is None else np.asarray(self.free_features, dtype=bool)
        self.free_intrinsics = none(c) if self.free_intrinsics is None else np.asarray(self.free_intrinsics, dtype=bool)
        self.free_extrinsics = none(c) if self.free_extrinsics is None else np.asarray(self.free_extrinsics, dtype=bool)
        if self.by_pose:
            self.free_kinematics = False
            self.free_joints = False
        else:
            self.free_poses = False
        self._build_layout()
        # detections in front of their camera at the start must stay there:
        # masking would otherwise make "everything behind the camera" a
        # zero-loss solution
        self.required_count = self.residuals(self.initial_vector())[1] if self.keep_in_front else 0

    # -- layout ------------------------------------------------------------

    def _build_layout(self):
        n = self.n
        # vector offsets
        vec = {}
        i = 0
        nkin = 6 + 4 * n if self.free_kinematics else 0
        vec["kin"] = (i, i + nkin)
        i += nkin
        nf = 3 * int(self.free_features.sum())
        vec["features"] = (i, i + nf)
        i += nf
        ni = 4 * int(self.free_intrinsics.sum())
        vec["intrinsics"] = (i, i + ni)
        i += ni
        ne = 6 * int(self.free_extrinsics.sum())
        vec["extrinsics"] = (i, i + ne)
        i += ne
        npose = 6 * self.T if self.free_poses else 0
        vec["poses"] = (i, i + npose)
        i += npose
        nj = n * self.T if self.free_joints else 0
        vec["joints"] = (i, i + nj)
        i += nj
        self.size = i
        # derivative slots
        slots = {}
        s = 0
        for name, width, on in (
            ("kin", 6 + 4 * n, self.free_kinematics),
            ("features", 3, self.free_features.any()),
            ("intrinsics", 4, self.free_intrinsics.any()),
            ("extrinsics", 6, self.free_extrinsics.any()),
            ("poses", 6, self.free_poses),
            ("joints", n, self.free_joints),
        ):
            slots[name] = (s, s + width) if on else None
            if on:
                s += width
        self.nslots = s
        self.layout = {"vector": vec, "slots": slots}

    def _block(self, x, name):
        a, b = self.layout["vector"][name]
        return x[a:b]

    def projector(self):
        """Box projection keeping free focal lengths at or above ``min_focal`` (None if none are free)."""
        a, b = self.layout["vector"]["intrinsics"]
        if a == b:
            return None
        idx = a + (4 * np.arange((b - a) // 4)[:, None] + np.array([0, 1])).ravel()
        floor = self.min_focal

        def project(x):
            x = np.array(x, dtype=float)
            x[idx] = np.maximum(x[idx], floor)
            return x

        return project

    # -- variables ---------------------------------------------------------

    def initial_vector(self) -> np.ndarray:
        x = np.zeros(self.size)
        if self.free_kinematics:
            a, _ = self.layout["vector"]["kin"]
            x[a + 3 : a + 6] = self.base_translation
            x[a + 6 : a + 6 + 4 * self.n] = self.links.ravel()
        a, b = self.layout["vector"]["features"]
        x[a:b] = self.features[self.free_features].ravel()
        a, b = self.layout["vector"]["intrinsics"]
        x[a:b] = self.intrinsics[self.free_intrinsics].ravel()
        a, b = self.layout["vector"]["extrinsics"]
        e = np.zeros((int(self.free_extrinsics.sum()), 6))
        e[:, 3:] = self.ext_translation[self.free_extrinsics]
        x[a:b] = e.ravel()
        if self.free_poses:
            a, b = self.layout["vector"]["poses"]
            p = np.zeros((self.T, 6))
            p[:, 3:] = self.pose_translation
            x[a:b] = p.ravel()
        if self.free_joints:
            a, b = self.layout["vector"]["joints"]
            x[a:b] = self.joints.ravel()
        return x

    def values(self, x):
        """Plain-array parameter values at ``x``."""
        out = {}
        if self.free_kinematics:
            k = self._block(x, "kin")
            out["base_rotation"] = self.base_rotation @ rotvec_to_matrix(k[0:3])
            out["base_translation"] = k[3:6].copy()
            out["links"] = k[6:].reshape(self.n, 4).copy()
        elif not self.by_pose:
            out["base_rotation"] = self.base_rotation
            out["base_translation"] = self.base_translation
            out["links"] = self.links
        f = self.features.copy()
        f[self.free_features] = self._block(x, "features").reshape(-1, 3)
        out["features"] = f
        intr = self.intrinsics.copy()
        intr[self.free_intrinsics] = self._block(x, "intrinsics").reshape(-1, 4)
        out["intrinsics"] = intr
        er, et = self.ext_rotation.copy(), self.ext_translation.copy()
        e = self._block(x, "extrinsics").reshape(-1, 6)
        idx = np.flatnonzero(self.free_extrinsics)
        if len(idx):
            er[idx] = self.ext_rotation[idx] @ rotvec_to_matrix(e[:, :3])
            et[idx] = e[:, 3:]
        out["ext_rotation"], out["ext_translation"] = er, et
        if self.by_pose:
            if self.free_poses:
                p = self._block(x, "poses").reshape(self.T, 6)
                out["pose_rotation"] = self.pose_rotation @ rotvec_to_matrix(p[:, :3])
                out["pose_translation"] = p[:, 3:].copy()
            else:
                out["pose_rotation"], out["pose_translation"] = self.pose_rotation, self.pose_translation
        else:
            out["joints"] = self._block(x, "joints").reshape(self.T, self.n).copy() if self.free_joints else self.joints
        return out

    def _dual_inputs(self, x):
        P = self.nslots
        sl = self.layout["slots"]
        v = {}
        if self.by_pose:
            if self.free_poses:
                p = self._block(x, "poses").reshape(self.T, 6)
                s0 = sl["poses"][0]
                dr = _local_seed(p[:, :3], s0, P)
                v["pose_rotation"] = self.pose_rotation @ rotvec_to_matrix(dr)
                v["pose_translation"] = _local_seed(p[:, 3:], s0 + 3, P)
            else:
                v["pose_rotation"], v["pose_translation"] = self.pose_rotation, self.pose_translation
        else:
            if self.free_kinematics:
                k = self._block(x, "kin")
                s0 = sl["kin"][0]
                v["base_rotation"] = self.base_rotation @ rotvec_to_matrix(_global_seed(k[0:3], s0, P))
                v["base_translation"] = _global_seed(k[3:6], s0 + 3, P)
                v["links"] = _global_seed(k[6:].reshape(self.n, 4), s0 + 6, P)
            else:
                v["base_rotation"], v["base_translation"], v["links"] = (
                    self.base_rotation,
                    self.base_translation,
                    self.links,
                )
            if self.free_joints:
                j = self._block(x, "joints").reshape(self.T, self.n)
                v["joints"] = _local_seed(j, sl["joints"][0], P)
            else:
                v["joints"] = self.joints
        if self.free_features.any():
            f = self.features.copy()
            f[self.free_features] = self._block(x, "features").reshape(-1, 3)
            v["features"] = _local_seed(f, sl["features"][0], P, self.free_features)
        else:
            v["features"] = self.features
        if self.free_intrinsics.any():
            intr = self.intrinsics.copy()
            intr[self.free_intrinsics] = self._block(x, "intrinsics").reshape(-1, 4)
            v["intrinsics"] = _local_seed(intr, sl["intrinsics"][0], P, self.free_intrinsics)
        else:
            v["intrinsics"] = self.intrinsics
        if self.free_extrinsics.any():
            e = np.zeros((self.c, 6))
            e[:, 3:] = self.ext_translation
            e[self.free_extrinsics] = self._block(x, "extrinsics").reshape(-1, 6)
            s0 = sl["extrinsics"][0]
            dr = _local_seed(e[:, :3], s0, P, self.free_extrinsics)
            v["ext_rotation"] = self.ext_rotation @ rotvec_to_matrix(dr)
            v["ext_translation"] = _local_seed(e[:, 3:], s0 + 3, P, self.free_extrinsics)
        else:
            v["ext_rotation"], v["ext_translation"] = self.ext_rotation, self.ext_translation
        return v

    # -- objective ---------------------------------------------------------

    def residuals(self, x):
        """Masked pixel residuals ``(T, c, m, 2)`` as a dual (or ndarray with no free variables)."""
        v = self._dual_inputs(x)
        if self.by_pose:
            r, t = v["pose_rotation"], v["pose_translation"]
        else:
            r, t = fk_rt(v["base_rotation"], v["base_translation"], v["links"], v["joints"])
        pts = world_points(r, t, v["features"])
        uv, z = render_points(v["intrinsics"], v["ext_rotation"], v["ext_translation"], pts)
        mask = ~np.isnan(self.observed[..., 0]) & (ad.value_of(z) > DEPTH_EPSILON)
        res = ad.where(mask[..., None], uv - np.nan_to_num(self.observed), 0.0)
        return res, int(mask.sum())

    def evaluate(self, x, need_gradient: bool = True) -> Evaluation:
        x = np.asarray(x, dtype=float)
        res, count = self.residuals(x)
        grad = np.zeros(self.size)
        diag = np.zeros(self.size)
        if count < self.required_count:
            return Evaluation(np.inf, np.full(self.size, np.nan), diag, count)
        rv = ad.value_of(res)
        value = float(np.sum(rv * rv))
        if need_gradient and self.size and ad.is_dual(res):
            jr = rv[..., None] * res.grad  # (T, c, m, 2, P)
            jj = res.grad * res.grad
            self._decompress(jr, grad)
            self._decompress(jj, diag)
            grad *= 2.0
            diag *= 2.0
        if self.free_joints and self.joint_penalty > 0:
            pv, pg, pd = self._penalty(x)
            value += pv
            a, b = self.layout["vector"]["joints"]
            grad[a:b] += pg
            diag[a:b] += pd
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            raise NonFiniteObjective(f"pixel objective is not finite ({value})")
        return Evaluation(value, grad, diag, count)

    def _decompress(self, arr, out):
        sl = self.layout["slots"]
        vec = self.layout["vector"]
        if sl["kin"] is not None:
            a, b = sl["kin"]
            u, w = vec["kin"]
            out[u:w] = arr[..., a:b].sum(axis=(0, 1, 2, 3))
        if sl["features"] is not None:
            a, b = sl["features"]
            u, w = vec["features"]
            per = arr[..., a:b].sum(axis=(0, 1, 3))  # (m, 3)
            out[u:w] = per[self.free_features].ravel()
        if sl["intrinsics"] is not None:
            a, b = sl["intrinsics"]
            u, w = vec["intrinsics"]
            per = arr[..., a:b].sum(axis=(0, 2, 3))  # (c, 4)
            out[u:w] = per[self.free_intrinsics].ravel()
        if sl["extrinsics"] is not None:
            a, b = sl["extrinsics"]
            u, w = vec["extrinsics"]
            per = arr[..., a:b].sum(axis=(0, 2, 3))  # (c, 6)
            out[u:w] = per[self.free_extrinsics].ravel()
        if sl["poses"] is not None:
            a, b = sl["poses"]
            u, w = vec["poses"]
            out[u:w] = arr[..., a:b].sum(axis=(1, 2, 3)).ravel()
        if sl["joints"] is not None:
            a, b = sl["joints"]
            u, w = vec["joints"]
            out[u:w] = arr[..., a:b].sum(axis=(1, 2, 3)).ravel()

    def _penalty(self, x):
        # lam * sum_t ||(j_{t+1} - j_t) - a_t||^2; residuals couple neighbouring
        # timesteps, so this small block uses full seeding
        j = ad.Dual.variable(self._block(x, "joints"))
        j = j.reshape((self.T, self.n))
        e = (j[1:] - j[:-1]) - self.actions
        if self.joint_anchor is not None:
            # without an anchor a constant shift of every joint (undone by the
            # DH offsets) costs nothing, and the trajectory drifts along it
            e = ad.concatenate([j[:1] - self.joint_anchor, e])
        val = e.value
        lam = self.joint_penalty
        value = lam * float(np.sum(val * val))
        grad = 2.0 * lam * np.einsum("tq,tqp->p", val, e.grad)
        diag = 2.0 * lam * np.einsum("tqp,tqp->p", e.grad, e.grad)
        return value, grad, diag

    def value_and_gradient(self, x):
        ev = self.evaluate(x)
        return ev.value, ev.gradient

    def jacobian(self, x) -> sparse.csr_matrix:
        """Sparse Jacobian of the flattened pixel residuals, rebuilt from the shared slots."""
        res, _ = self.residuals(np.asarray(x, dtype=float))
        R = int(np.prod(self.observed.shape))
        if not ad.is_dual(res) or self.size == 0:
            return sparse.csr_matrix((R, self.size))
        G = res.grad.reshape(self.T, self.c, self.m, 2, self.nslots)
        sl, vec = self.layout["slots"], self.layout["vector"]
        rows_all = np.arange(R).reshape(self.T, self.c, self.m, 2)
        rows, cols, vals = [], [], []

        def add(slot, colmap):
            # colmap: (T, c, m, width) column indices, -1 where not free
            a, b = slot
            width = b - a
            cm = np.broadcast_to(colmap[:, :, :, None, :], (self.T, self.c, self.m, 2, width))
            rr = np.broadcast_to(rows_all[..., None], cm.shape)
            keep = cm >= 0
            rows.append(rr[keep])
            cols.append(cm[keep])
            vals.append(G[..., a:b][keep])

        def ranks(mask, width, start):
            out = np.full((len(mask), width), -1)
            idx = np.flatnonzero(mask)
            out[idx] = start + width * np.arange(len(idx))[:, None] + np.arange(width)
            return out

        T, c, m = self.T, self.c, self.m
        if sl["kin"] is not None:
            w = sl["kin"][1] - sl["kin"][0]
            add(sl["kin"], np.broadcast_to(vec["kin"][0] + np.arange(w), (T, c, m, w)))
        if sl["features"] is not None:
            fm = ranks(self.free_features, 3, vec["features"][0])
            add(sl["features"], np.broadcast_to(fm[None, None], (T, c, m, 3)))
        if sl["intrinsics"] is not None:
            im = ranks(self.free_intrinsics, 4, vec["intrinsics"][0])
            add(sl["intrinsics"], np.broadcast_to(im[None, :, None], (T, c, m, 4)))
        if sl["extrinsics"] is not None:
            em = ranks(self.free_extrinsics, 6, vec["extrinsics"][0])
            add(sl["extrinsics"], np.broadcast_to(em[None, :, None], (T, c, m, 6)))
        if sl["poses"] is not None:
            pm = ranks(np.ones(T, dtype=bool), 6, vec["poses"][0])
            add(sl["poses"], np.broadcast_to(pm[:, None, None], (T, c, m, 6)))
        if sl["joints"] is not None:
            jm = ranks(np.ones(T, dtype=bool), self.n, vec["joints"][0])
            add(sl["joints"], np.broadcast_to(jm[:, None, None], (T, c, m, self.n)))
        return sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(R, self.size)
        )

    def gauss_newton(self, x) -> np.ndarray:
        """Dense Gauss-Newton approximation ``2 J^T J`` of the Hessian (penalty included)."""
        J = self.jacobian(x)
        H = 2.0 * (J.T @ J).toarray()
        if self.free_joints and self.joint_penalty > 0:
            T, n = self.T, self.n
            D = sparse.eye(T * n, k=n) - sparse.eye(T * n)
            D = D.tocsr()[: (T - 1) * n]
            if self.joint_anchor is not None:
                D = sparse.vstack([sparse.eye(n, T * n), D])
            a, b = self.layout["vector"]["joints"]
            H[a:b, a:b] += 2.0 * self.joint_penalty * (D.T @ D).toarray()
        return H


@dataclass
class PoseProblem:
    """Squared Frobenius distance between ``FK(j_t) @ H`` and target poses.

    ``H`` is a fixed tool transform relating the flange to the frame in which
    the targets were expressed.  All variables are global, so plain seeding
    over the ``6 + 4n + 6`` parameters is already compact.
    """

    joints: np.ndarray  # (T, n)
    target_rotation: np.ndarray  # (T, 3, 3)
    target_translation: np.ndarray  # (T, 3)
    base_rotation: np.ndarray
    base_translation: np.ndarray
    links: np.ndarray
    tool_rotation: np.ndarray
    tool_translation: np.ndarray

    @property
    def n(self):
        return self.links.shape[0]

    @property
    def size(self):
        return 12 + 4 * self.n

    def initial_vector(self) -> np.ndarray:
        n = self.n
        x = np.zeros(self.size)
        x[3:6] = self.base_translation
        x[6 : 6 + 4 * n] = self.links.ravel()
        x[9 + 4 * n : 12 + 4 * n] = self.tool_translation
        return x

    def unpack(self, x):
        n = self.n
        return dict(
            base_rotation=self.base_rotation @ rotvec_to_matrix(x[0:3]),
            base_translation=x[3:6],
            links=x[6 : 6 + 4 * n].reshape(n, 4),
            tool_rotation=self.tool_rotation @ rotvec_to_matrix(x[6 + 4 * n : 9 + 4 * n]),
            tool_translation=x[9 + 4 * n : 12 + 4 * n],
        )

    def objective(self, x):
        """Plain objective, differentiable with any seeding."""
        v = self.unpack(x)
        r, t = fk_rt(v["base_rotation"], v["base_translation"], v["links"], self.joints)
        rr = r @ v["tool_rotation"]
        tt = (r @ ad.reshape(v["tool_translation"], (3, 1)))[..., 0] + t
        dr = rr - self.target_rotation
        dt = tt - self.target_translation
        return (dr * dr).sum() + (dt * dt).sum()

    def _residuals(self, x):
        v = self.unpack(x)
        r, t = fk_rt(v["base_rotation"], v["base_translation"], v["links"], self.joints)
        rr = r @ v["tool_rotation"]
        tt = (r @ ad.reshape(v["tool_translation"], (3, 1)))[..., 0] + t
        return ad.concatenate([ad.reshape(rr - self.target_rotation, (-1, 9)), tt - self.target_translation], axis=1)

    def evaluate(self, x):
        res = self._residuals(ad.Dual.variable(x))
        rv = res.value
        return float(np.sum(rv * rv)), 2.0 * np.einsum("ij,ijp->p", rv, res.grad)

    def gauss_newton(self, x) -> np.ndarray:
        res = self._residuals(ad.Dual.variable(x))
        J = res.grad.reshape(-1, self.size)
        return 2.0 * J.T @ J

    def residual_norms(self, x) -> np.ndarray:
        v = self.unpack(np.asarray(x, dtype=float))
        r, t = fk_rt(v["base_rotation"], v["base_translation"], v["links"], self.joints)
        rr = r @ v["tool_rotation"]
        tt = r @ v["tool_translation"] + t
        return np.sqrt(
            np.sum((rr - self.target_rotation) ** 2, axis=(1, 2)) + np.sum((tt - self.target_translation) ** 2, axis=1)
        )
