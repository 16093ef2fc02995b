"""Initial estimates of camera poses, end-effector poses and feature structure.

With two or more cameras, pairwise baselines come from the linear eight-point
essential matrix, features seen by several cameras are triangulated, and the
end-effector motion between timesteps is recovered by rigid alignment of the
triangulated points.  With a single camera, an incremental structure from
motion treats the moving end-effector as the scene and the camera as fixed.

All poses returned here live in a frame anchored at camera 0 with the first
baseline of unit length.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.optimize import least_squares

from . import dual as ad
from .data import Dataset
from .errors import (
    DegenerateConfiguration,
    DegenerateMotion,
    DegenerateRays,
    InsufficientCorrespondences,
    NoChainableTimesteps,
    SeedPairNotFound,
)
from .geometry import Pose, arun_align, orthonormalize, rotvec_to_matrix, similarity_align

MIN_CORRESPONDENCES = 8
MIN_SHARED_FOR_CHAIN = 3
RAY_ANGLE_MIN = 1e-4
SEED_CANDIDATES = 5


@dataclass
class InitEstimate:
    camera_poses: List[Optional[Pose]]  # world-from-camera; None for cameras not covered
    ee_poses: List[Optional[Pose]]
    structure: np.ndarray  # (m, 3), NaN rows for features never triangulated
    uncovered: List[int] = field(default_factory=list)
    seed_pair: Optional[tuple] = None

    @property
    def chained(self) -> np.ndarray:
        return np.array([p is not None for p in self.ee_poses])


def normalize_pixels(pixels, intrinsics) -> np.ndarray:
    """Pixel ``(..., 2)`` to normalized image coordinates."""
    fx, fy, cx, cy = np.asarray(intrinsics, dtype=float)
    px = np.asarray(pixels, dtype=float)
    return np.stack([(px[..., 0] - cx) / fx, (px[..., 1] - cy) / fy], axis=-1)


def _homog(x):
    return np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)


def essential_eight_point(x1, x2) -> np.ndarray:
    """Linear estimate of ``E`` with ``x2^T E x1 = 0`` from normalized coordinates."""
    x1, x2 = np.asarray(x1, dtype=float), np.asarray(x2, dtype=float)
    if len(x1) < MIN_CORRESPONDENCES:
        raise InsufficientCorrespondences(f"need {MIN_CORRESPONDENCES} correspondences, got {len(x1)}")
    # isotropic conditioning
    def cond(x):
        c = x.mean(axis=0)
        s = np.sqrt(2.0) / max(np.mean(np.linalg.norm(x - c, axis=1)), 1e-300)
        return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])

    t1, t2 = cond(x1), cond(x2)
    h1 = _homog(x1) @ t1.T
    h2 = _homog(x2) @ t2.T
    a = np.einsum("ni,nj->nij", h2, h1).reshape(len(x1), 9)
    _, sv, vt = np.linalg.svd(a)
    if len(sv) < 9 or sv[-2] <= 1e-8 * sv[0]:
        raise DegenerateMotion("correspondences do not constrain the essential matrix (no parallax or degenerate layout)")
    e = t2.T @ vt[-1].reshape(3, 3) @ t1
    u, s, vt = np.linalg.svd(e)
    return u @ np.diag([1.0, 1.0, 0.0]) @ vt


def decompose_essential(e):
    """The four ``(R, t)`` candidates, ``t`` of unit length."""
    u, _, vt = np.linalg.svd(e)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = u[:, 2]
    out = []
    for r in (u @ w @ vt, u @ w.T @ vt):
        for sign in (1.0, -1.0):
            out.append((r, sign * t))
    return out


def _triangulate_two(r, t, x1, x2):
    # cameras [I|0] and [R|t]; returns points in the first camera frame
    p1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    p2 = np.hstack([r, t[:, None]])
    a = np.stack(
        [
            x1[:, 0, None] * p1[2] - p1[0],
            x1[:, 1, None] * p1[2] - p1[1],
            x2[:, 0, None] * p2[2] - p2[0],
            x2[:, 1, None] * p2[2] - p2[1],
        ],
        axis=1,
    )
    _, _, vt = np.linalg.svd(a)
    h = vt[:, -1]
    return h[:, :3] / h[:, 3:4]


def estimate_baseline(pixels_a, pixels_b, intrinsics_a, intrinsics_b) -> Pose:
    """Relative pose mapping camera-A coordinates into camera-B coordinates.

    ``pixels_a[i]`` and ``pixels_b[i]`` are the same 3D point seen in the two
    cameras.  Of the four decompositions, the one placing the most
    triangulated points in front of both cameras wins.  The translation has
    unit length.
    """
    x1 = normalize_pixels(pixels_a, intrinsics_a)
    x2 = normalize_pixels(pixels_b, intrinsics_b)
    e = essential_eight_point(x1, x2)
    best, best_count = None, -1
    for r, t in decompose_essential(e):
        pts = _triangulate_two(r, t, x1, x2)
        z1 = pts[:, 2]
        z2 = (pts @ r.T + t)[:, 2]
        count = int(np.sum((z1 > 0) & (z2 > 0)))
        if count > best_count:
            best, best_count = (r, t), count
    return Pose(orthonormalize(best[0]), best[1] / np.linalg.norm(best[1]))


def triangulate(camera_poses, intrinsics, pixels) -> np.ndarray:
    """Linear (DLT) triangulation of one point.

    ``camera_poses`` are camera-from-world poses, ``pixels`` one ``(u, v)`` per
    camera.  Raises :class:`DegenerateRays` if the viewing rays are nearly
    parallel.
    """
    pts = triangulate_many(
        [p for p in camera_poses], np.asarray(intrinsics, dtype=float), np.asarray(pixels, dtype=float)[:, None, :]
    )
    if np.isnan(pts[0]).any():
        raise DegenerateRays("viewing rays are (nearly) parallel")
    return pts[0]


def triangulate_many(camera_poses, intrinsics, pixels, min_angle: float = RAY_ANGLE_MIN) -> np.ndarray:
    """Triangulate ``N`` points from ``(k, N, 2)`` pixels (NaN = unseen).

    Points seen by fewer than two cameras, or whose rays are nearly
    parallel, come back as NaN.
    """
    pixels = np.asarray(pixels, dtype=float)
    k, N = pixels.shape[:2]
    rows = np.zeros((N, 2 * k, 4))
    dirs = np.full((k, N, 3), np.nan)
    seen = ~np.isnan(pixels[..., 0])
    for i, pose in enumerate(camera_poses):
        x = normalize_pixels(np.nan_to_num(pixels[i]), intrinsics[i])
        p = np.hstack([pose.rotation, pose.translation[:, None]])
        r0 = x[:, 0, None] * p[2] - p[0]
        r1 = x[:, 1, None] * p[2] - p[1]
        mask = seen[i][:, None]
        # unit-norm rows keep cameras comparably weighted
        r0 = r0 / np.linalg.norm(r0, axis=1, keepdims=True)
        r1 = r1 / np.linalg.norm(r1, axis=1, keepdims=True)
        rows[:, 2 * i] = np.where(mask, r0, 0.0)
        rows[:, 2 * i + 1] = np.where(mask, r1, 0.0)
        d = _homog(x) @ pose.rotation  # ray direction in world: R^T x
        dirs[i] = np.where(mask, d / np.linalg.norm(d, axis=1, keepdims=True), np.nan)
    _, _, vt = np.linalg.svd(rows)
    h = vt[:, -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        pts = h[:, :3] / h[:, 3:4]
    # widest angle between any two observing rays
    max_angle = np.zeros(N)
    for i in range(k):
        for j in range(i + 1, k):
            cosang = np.clip(np.sum(dirs[i] * dirs[j], axis=1), -1.0, 1.0)
            ang = np.arccos(cosang)
            max_angle = np.fmax(max_angle, np.where(np.isnan(ang), 0.0, ang))
    bad = (seen.sum(axis=0) < 2) | (max_angle < min_angle) | ~np.all(np.isfinite(pts), axis=1)
    pts[bad] = np.nan
    return pts


def chain_ee_poses(points) -> List[Optional[Pose]]:
    """Relative end-effector poses from per-timestep triangulated features.

    ``points`` is ``(T, m, 3)`` with NaN for features not triangulated.  The
    first usable timestep is the identity; others are linked greedily, most
    shared features first, to an already chained timestep via rigid
    alignment.  Timesteps that cannot be linked stay ``None``.
    """
    points = np.asarray(points, dtype=float)
    T = points.shape[0]
    ok = ~np.isnan(points[..., 0])
    usable = np.flatnonzero(ok.sum(axis=1) >= MIN_SHARED_FOR_CHAIN)
    if len(usable) == 0:
        raise NoChainableTimesteps("no timestep has three triangulated features")
    poses: List[Optional[Pose]] = [None] * T
    anchor = int(usable[0])
    poses[anchor] = Pose.identity()
    chained = [anchor]
    pending = set(int(t) for t in usable[1:])
    shared = ok.astype(int) @ ok.T.astype(int)  # (T, T) counts of common features
    while pending:
        cand = sorted(pending)
        best_s, best_t, best_count = None, None, MIN_SHARED_FOR_CHAIN - 1
        for s in cand:
            counts = shared[s, chained]
            j = int(np.argmax(counts))
            if counts[j] > best_count:
                best_s, best_t, best_count = s, chained[j], int(counts[j])
        if best_s is None:
            break
        common = ok[best_s] & ok[best_t]
        try:
            rel = arun_align(points[best_t, common], points[best_s, common])
        except DegenerateConfiguration:
            pending.discard(best_s)
            continue
        p = rel @ poses[best_t]
        poses[best_s] = Pose(orthonormalize(p.rotation), p.translation)
        chained.append(best_s)
        pending.discard(best_s)
    return poses


def _structure_from(points, poses, m) -> np.ndarray:
    acc = np.zeros((m, 3))
    cnt = np.zeros(m)
    for t, pose in enumerate(poses):
        if pose is None:
            continue
        ok = ~np.isnan(points[t, :, 0])
        if not ok.any():
            continue
        acc[ok] += pose.inverse().apply(points[t, ok])
        cnt[ok] += 1
    out = np.full((m, 3), np.nan)
    has = cnt > 0
    out[has] = acc[has] / cnt[has, None]
    return out


def _factory_array(factory_intrinsics, c) -> np.ndarray:
    k = np.asarray(factory_intrinsics, dtype=float)
    if k.ndim == 1:
        k = np.tile(k, (c, 1))
    return k


def _pair_correspondences(pixels, i, j):
    both = ~np.isnan(pixels[:, i, :, 0]) & ~np.isnan(pixels[:, j, :, 0])
    return pixels[:, i][both], pixels[:, j][both], both


def initialize_by_triangulation(dataset: Dataset, factory_intrinsics) -> InitEstimate:
    """Camera baselines by the eight-point method, then triangulation and pose chaining."""
    c = dataset.c
    if c < 2:
        return initialize_by_sfm(dataset, factory_intrinsics)
    K = _factory_array(factory_intrinsics, c)
    px = dataset.pixels
    cam_from_world: List[Optional[Pose]] = [None] * c
    cam_from_world[0] = Pose.identity()
    covered = [0]
    first_pair = True
    while True:
        best = None
        for j in range(c):
            if j in covered:
                continue
            for i in covered:
                n_corr = int(np.sum(~np.isnan(px[:, i, :, 0]) & ~np.isnan(px[:, j, :, 0])))
                if n_corr >= MIN_CORRESPONDENCES and (best is None or n_corr > best[2]):
                    best = (i, j, n_corr)
        if best is None:
            break
        i, j, _ = best
        pa, pb, both = _pair_correspondences(px, i, j)
        try:
            rel = estimate_baseline(pa, pb, K[i], K[j])  # cam_j from cam_i
        except (DegenerateMotion, InsufficientCorrespondences):
            if first_pair:
                raise
            covered.append(j)  # give up on this camera but do not retry forever
            cam_from_world[j] = None
            continue
        if not first_pair:
            rel = Pose(rel.rotation, rel.translation * _relative_scale(px, K, cam_from_world, covered, i, j, rel))
        cam_from_world[j] = rel @ cam_from_world[i]
        covered.append(j)
        first_pair = False
    uncovered = [j for j in range(c) if cam_from_world[j] is None]
    if len(uncovered) == c - 1:
        raise InsufficientCorrespondences("no camera pair shares enough correspondences")
    active = [j for j in range(c) if cam_from_world[j] is not None]
    pts = triangulate_many(
        [cam_from_world[j] for j in active], K[active], px[:, active].transpose(1, 0, 2, 3).reshape(len(active), -1, 2)
    ).reshape(dataset.T, dataset.m, 3)
    ee = chain_ee_poses(pts)
    structure = _structure_from(pts, ee, dataset.m)
    return InitEstimate(
        camera_poses=[None if p is None else p.inverse() for p in cam_from_world],
        ee_poses=ee,
        structure=structure,
        uncovered=uncovered,
    )


def _relative_scale(px, K, cam_from_world, covered, i, j, rel) -> float:
    # match depths (in camera i) of points triangulated by the existing cameras
    # against the same points triangulated from the new unit-length pair
    if len(covered) < 2:
        return 1.0
    T, c, m, _ = px.shape
    existing = triangulate_many(
        [cam_from_world[k] for k in covered], K[covered], px[:, covered].transpose(1, 0, 2, 3).reshape(len(covered), -1, 2)
    )
    pair = triangulate_many(
        [Pose.identity(), rel], K[[i, j]], px[:, [i, j]].transpose(1, 0, 2, 3).reshape(2, -1, 2)
    )
    ok = ~np.isnan(existing[:, 0]) & ~np.isnan(pair[:, 0])
    if not ok.any():
        return 1.0
    depth_existing = cam_from_world[i].apply(existing[ok])[:, 2]
    depth_pair = pair[ok, 2]
    return float(np.median(depth_existing / depth_pair))


# ---------------------------------------------------------------------------
# single camera


def register_pose(points, pixels, intrinsics, initial: Optional[Pose] = None) -> Pose:
    """Camera-from-object pose from 2D-3D correspondences (DLT, then refinement)."""
    points = np.asarray(points, dtype=float)
    x = normalize_pixels(pixels, intrinsics)
    if initial is None:
        if len(points) < 6:
            raise DegenerateConfiguration("need six correspondences for a linear pose estimate")
        X = _homog(points)
        zeros = np.zeros_like(X)
        a = np.concatenate(
            [
                np.hstack([X, zeros, -x[:, :1] * X]),
                np.hstack([zeros, X, -x[:, 1:] * X]),
            ]
        )
        _, _, vt = np.linalg.svd(a)
        p = vt[-1].reshape(3, 4)
        scale = np.cbrt(np.linalg.det(p[:, :3]))
        if scale == 0:
            raise DegenerateConfiguration("degenerate pose estimate")
        p = p / scale
        initial = Pose(orthonormalize(p[:, :3]), p[:, 3])
    return refine_pose(points, x, initial)


def refine_pose(points, normalized, initial: Pose, iterations: int = 200) -> Pose:
    """Minimize normalized reprojection error over one pose (Levenberg-Marquardt)."""
    r0, t0 = initial.rotation, initial.translation
    points = np.asarray(points, dtype=float)

    def residuals(v):
        r = r0 @ rotvec_to_matrix(v[0:3])
        cam = points @ ad.swapaxes(r, -1, -2) + (v[3:6] + t0)
        z = cam[:, 2]
        z = ad.where(ad.value_of(z) > 1e-9, z, 1.0)
        return (ad.stack([cam[:, 0] / z, cam[:, 1] / z], axis=-1) - normalized).reshape((-1,))

    def fun(v):
        return ad.value_of(residuals(v))

    def jac(v):
        return residuals(ad.Dual.variable(v)).grad

    if 2 * len(points) < 6:
        raise DegenerateConfiguration("need three correspondences to refine a pose")
    sol = least_squares(fun, np.zeros(6), jac=jac, method="lm", max_nfev=iterations, xtol=1e-15, ftol=1e-15)
    v = sol.x
    return Pose(orthonormalize(r0 @ rotvec_to_matrix(v[:3])), t0 + v[3:])


def seed_pairs(pixels, intrinsics, count: int = 1, min_shared=MIN_CORRESPONDENCES, min_parallax=1e-3):
    """The ``count`` best timestep pairs by shared features, then median parallax."""
    vis = ~np.isnan(pixels[..., 0])
    T = len(pixels)
    x = normalize_pixels(np.nan_to_num(pixels), intrinsics)
    ranked = []
    for a in range(T):
        for b in range(a + 1, T):
            both = vis[a] & vis[b]
            n = int(both.sum())
            if n < min_shared:
                continue
            par = float(np.median(np.linalg.norm(x[a, both] - x[b, both], axis=1)))
            if par < min_parallax:
                continue
            ranked.append(((n, par), (a, b)))
    if not ranked:
        raise SeedPairNotFound("no pair of timesteps with enough shared features and parallax")
    ranked.sort(key=lambda item: item[0], reverse=True)
    return [pair for _, pair in ranked[:count]]


def reprojection_rms(estimate: "InitEstimate", pixels, intrinsics) -> float:
    """RMS pixel error of a single-camera estimate over its registered timesteps."""
    fx, fy, cx, cy = np.asarray(intrinsics, dtype=float)
    errs = []
    for t, pose in enumerate(estimate.ee_poses):
        if pose is None:
            continue
        cam = pose.apply(estimate.structure)
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.column_stack([fx * cam[:, 0] / cam[:, 2] + cx, fy * cam[:, 1] / cam[:, 2] + cy])
        e = uv - pixels[t]
        errs.append(e[np.isfinite(e).all(axis=1)])
    e = np.concatenate(errs) if errs else np.zeros((0, 2))
    return float(np.sqrt(np.mean(e * e))) if len(e) else np.inf


def initialize_by_sfm(dataset: Dataset, factory_intrinsics, seed_pair=None, candidates: int = SEED_CANDIDATES) -> InitEstimate:
    """Incremental structure from motion for a single fixed camera.

    The end-effector is the moving scene.  Seed pairs are ranked by shared
    features, then median parallax; further timesteps are registered against
    the current structure, and every feature is re-triangulated from all
    registered views.  The linear seed is sensitive to noise on small
    markers, so the best ``candidates`` pairs are each grown into a full
    estimate and the one with the lowest reprojection error is kept.
    """
    K = _factory_array(factory_intrinsics, dataset.c)[0]
    px = dataset.pixels[:, 0]  # (T, m, 2)
    pairs = [tuple(seed_pair)] if seed_pair is not None else seed_pairs(px, K, max(1, candidates))
    best, best_rms, failure = None, np.inf, None
    for pair in pairs:
        try:
            est = _grow_from_pair(px, K, pair)
        except SeedPairNotFound as exc:
            failure = exc
            continue
        rms = reprojection_rms(est, px, K)
        if best is None or rms < best_rms:
            best, best_rms = est, rms
        if best_rms < 1e-9:
            break
    if best is None:
        raise failure
    return best


def _grow_from_pair(px, K, pair) -> InitEstimate:
    T, m = px.shape[:2]
    vis = ~np.isnan(px[..., 0])
    a, b = pair
    both = vis[a] & vis[b]
    if both.sum() < MIN_CORRESPONDENCES:
        raise SeedPairNotFound(f"seed pair {(a, b)} shares only {int(both.sum())} features")
    try:
        rel = estimate_baseline(px[a, both], px[b, both], K, K)
    except DegenerateMotion as exc:
        raise SeedPairNotFound(str(exc)) from exc
    # object poses in the camera frame; the structure frame is the object at timestep a
    obj: List[Optional[Pose]] = [None] * T
    obj[a] = Pose.identity()
    obj[b] = rel
    structure = np.full((m, 3), np.nan)
    structure[both] = _triangulate_two(rel.rotation, rel.translation, normalize_pixels(px[a, both], K), normalize_pixels(px[b, both], K))
    order = sorted(
        (t for t in range(T) if obj[t] is None),
        key=lambda t: (-int(np.sum(vis[t] & ~np.isnan(structure[:, 0]))), abs(t - a)),
    )
    for t in order:
        known = vis[t] & ~np.isnan(structure[:, 0])
        if known.sum() < 6:
            continue
        try:
            obj[t] = register_pose(structure[known], px[t, known], K, initial=_nearest_pose(obj, t))
        except DegenerateConfiguration:
            continue
        structure = _retriangulate_object(px, K, obj, m)
    return InitEstimate(
        camera_poses=[Pose.identity()],
        ee_poses=obj,
        structure=structure,
        uncovered=[],
        seed_pair=(a, b),
    )


def _nearest_pose(poses, t) -> Optional[Pose]:
    idx = [s for s, p in enumerate(poses) if p is not None]
    if not idx:
        return None
    s = min(idx, key=lambda s: abs(s - t))
    return poses[s]


def _retriangulate_object(px, K, obj, m) -> np.ndarray:
    # each registered timestep acts as a virtual camera with extrinsics = object pose
    reg = [t for t, p in enumerate(obj) if p is not None]
    pts = triangulate_many([obj[t] for t in reg], np.tile(K, (len(reg), 1)), px[reg], min_angle=0.0)
    return pts.reshape(m, 3)


def resection_camera(world_points, pixels, intrinsics) -> Pose:
    """Camera-from-world pose of a camera left out of the baseline chain."""
    return register_pose(world_points, pixels, intrinsics)


def fill_missing_poses(poses: List[Optional[Pose]]) -> List[Pose]:
    """Replace absent poses by the nearest present one (ties go to the earlier timestep)."""
    out = []
    for t, p in enumerate(poses):
        out.append(p if p is not None else _nearest_pose(poses, t))
    return out


def similarity_to(reference, points):
    """Align ``points`` onto ``reference`` by a similarity; returns the aligned points."""
    s, pose = similarity_align(points, reference)
    return s * (np.asarray(points) @ pose.rotation.T) + pose.translation
