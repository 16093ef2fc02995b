"""Rigid-body transforms.

Poses are stored as a rotation matrix plus a translation vector.  The
axis-angle chart (:func:`rotvec_to_matrix`) is written against the dual-number
operations so it can sit inside differentiated objectives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from . import dual as ad
from .errors import DegenerateConfiguration

_SERIES_CUTOFF = 1e-4


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def translation_only(cls, t) -> "Pose":
        return cls(np.eye(3), t)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        """Map an ``(..., 3)`` array of points through the pose."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return bool(
            np.all(np.isfinite(r))
            and np.all(np.isfinite(self.translation))
            and np.allclose(r.T @ r, np.eye(3), atol=tol, rtol=0)
            and abs(np.linalg.det(r) - 1.0) <= tol
        )

    def __repr__(self):
        return f"Pose(rotvec={matrix_to_rotvec(self.rotation)!r}, translation={self.translation!r})"


@dataclass(frozen=True, eq=False)
class PoseParams:
    translation: np.ndarray
    rotation: np.ndarray  # axis-angle, radians * unit axis

    def __post_init__(self):
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3))

    @classmethod
    def zero(cls) -> "PoseParams":
        return cls(np.zeros(3), np.zeros(3))

    def vector(self) -> np.ndarray:
        return np.concatenate([self.translation, self.rotation])

    @classmethod
    def from_vector(cls, v) -> "PoseParams":
        v = np.asarray(v, dtype=float)
        return cls(v[:3], v[3:6])


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def orthonormalize(r) -> np.ndarray:
    """Closest rotation matrix in the Frobenius sense (polar projection)."""
    u, _, vt = np.linalg.svd(np.asarray(r, dtype=float))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def _sinc_coeff(s):
    # sin(sqrt(s)) / sqrt(s)
    s = np.asarray(s, dtype=float)
    small = s < _SERIES_CUTOFF
    th = np.sqrt(np.where(small, 1.0, s))
    return np.where(small, 1.0 - s / 6.0 + s * s / 120.0, np.sin(th) / th)


def _sinc_coeff_deriv(s):
    s = np.asarray(s, dtype=float)
    small = s < _SERIES_CUTOFF
    ss = np.where(small, 1.0, s)
    th = np.sqrt(ss)
    exact = (np.cos(th) - np.sin(th) / th) / (2.0 * ss)
    return np.where(small, -1.0 / 6.0 + s / 60.0 - s * s / 1680.0, exact)


def _cosc_coeff(s):
    # (1 - cos(sqrt(s))) / s
    s = np.asarray(s, dtype=float)
    small = s < _SERIES_CUTOFF
    ss = np.where(small, 1.0, s)
    return np.where(small, 0.5 - s / 24.0 + s * s / 720.0, (1.0 - np.cos(np.sqrt(ss))) / ss)


def _cosc_coeff_deriv(s):
    s = np.asarray(s, dtype=float)
    small = s < _SERIES_CUTOFF
    ss = np.where(small, 1.0, s)
    exact = (0.5 * _sinc_coeff(ss) - _cosc_coeff(ss)) / ss
    return np.where(small, -1.0 / 24.0 + s / 360.0 - s * s / 13440.0, exact)


def skew(w):
    """``(..., 3) -> (..., 3, 3)`` cross-product matrices."""
    x, y, z = w[..., 0], w[..., 1], w[..., 2]
    zero = 0.0 * x
    rows = [
        ad.stack([zero, -z, y], axis=-1),
        ad.stack([z, zero, -x], axis=-1),
        ad.stack([-y, x, zero], axis=-1),
    ]
    return ad.stack(rows, axis=-2)


def rotvec_to_matrix(w):
    """Rodrigues formula; accepts ndarrays or duals of shape ``(..., 3)``.

    The coefficients are evaluated as functions of the squared angle so the
    derivative stays finite at the zero rotation.
    """
    s = (w * w).sum(axis=-1)
    a = ad.unary(s, _sinc_coeff, _sinc_coeff_deriv)
    b = ad.unary(s, _cosc_coeff, _cosc_coeff_deriv)
    k = skew(w)
    kk = k @ k
    if ad.is_dual(a):
        a = a.reshape(a.shape + (1, 1))
        b = b.reshape(b.shape + (1, 1))
    else:
        a = a[..., None, None]
        b = b[..., None, None]
    return np.eye(3) + a * k + b * kk


def matrix_to_rotvec(r) -> np.ndarray:
    return Rotation.from_matrix(orthonormalize(r)).as_rotvec()


def pose_from_params(q: PoseParams) -> Pose:
    return Pose(rotvec_to_matrix(q.rotation), q.translation.copy())


def params_from_pose(p: Pose) -> PoseParams:
    return PoseParams(p.translation.copy(), matrix_to_rotvec(p.rotation))


def pose_distance(a: Pose, g: Pose) -> float:
    """Frobenius norm of the difference of the two homogeneous matrices."""
    return float(
        np.sqrt(np.sum((a.rotation - g.rotation) ** 2) + np.sum((a.translation - g.translation) ** 2))
    )


def arun_align(p, q) -> Pose:
    """Least-squares rigid transform ``T`` with ``q_i ~ T p_i``.

    Centroid difference gives the translation, the SVD of the cross-covariance
    gives the rotation (with the reflection case corrected).
    """
    p = np.asarray(p, dtype=float).reshape(-1, 3)
    q = np.asarray(q, dtype=float).reshape(-1, 3)
    if p.shape != q.shape:
        raise ValueError(f"point sets differ in shape: {p.shape} vs {q.shape}")
    if len(p) < 3:
        raise DegenerateConfiguration(f"need at least 3 points, got {len(p)}")
    cp, cq = p.mean(axis=0), q.mean(axis=0)
    pc, qc = p - cp, q - cq
    sv = np.linalg.svd(pc, compute_uv=False)
    if sv[0] == 0.0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateConfiguration("points are collinear")
    u, _, vt = np.linalg.svd(pc.T @ qc)
    v = vt.T
    d = np.sign(np.linalg.det(v @ u.T))
    r = v @ np.diag([1.0, 1.0, d]) @ u.T
    return Pose(r, cq - r @ cp)


def similarity_align(p, q):
    """Umeyama similarity: returns ``(scale, Pose)`` with ``q ~ scale * R p + t``."""
    p = np.asarray(p, dtype=float).reshape(-1, 3)
    q = np.asarray(q, dtype=float).reshape(-1, 3)
    cp, cq = p.mean(axis=0), q.mean(axis=0)
    pc, qc = p - cp, q - cq
    u, sv, vt = np.linalg.svd(qc.T @ pc / len(p))
    d = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[2] = -1.0
    r = u @ np.diag(d) @ vt
    var_p = np.sum(pc**2) / len(p)
    scale = float(np.sum(sv * d) / var_p) if var_p > 0 else 1.0
    return scale, Pose(r, cq - scale * r @ cp)


def mean_pose(poses) -> Pose:
    """Chordal mean: average matrices, project the rotation back onto SO(3)."""
    poses = list(poses)
    r = orthonormalize(sum(p.rotation for p in poses) / len(poses))
    t = sum(p.translation for p in poses) / len(poses)
    return Pose(r, t)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    return Rotation.random(random_state=rng).as_matrix()


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-from-world pose for a camera at ``eye`` whose optical axis (+z) points at ``target``."""
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=float))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    r = np.stack([x, y, z])  # rows are camera axes in world coordinates
    return Pose(r, -r @ eye)
