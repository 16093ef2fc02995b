"""Independent reference computations used as test oracles.

Nothing here imports the code under test beyond plain data types: finite
differences, a straight-line DH/pinhole implementation, and a relative error
measure.
"""

import numpy as np


def central_difference(f, x, rel_step=1e-6):
    """Central differences with step ``rel_step * max(1, |x_i|)``."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        h = rel_step * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def relative_error(a, b, floor=1.0):
    """Componentwise ``|a - b| / max(|b|, floor)``, maximized."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), floor), initial=0.0))


def rot_z(t):
    c, s = np.cos(t), np.sin(t)
    m = np.eye(4)
    m[:2, :2] = [[c, -s], [s, c]]
    return m


def rot_x(t):
    c, s = np.cos(t), np.sin(t)
    m = np.eye(4)
    m[1:3, 1:3] = [[c, -s], [s, c]]
    return m


def trans(x, y, z):
    m = np.eye(4)
    m[:3, 3] = [x, y, z]
    return m


def rodrigues(w):
    th = np.linalg.norm(w)
    if th == 0:
        return np.eye(3)
    k = np.asarray(w) / th
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(th) * K + (1 - np.cos(th)) * K @ K


def homogeneous(rotvec, t):
    m = np.eye(4)
    m[:3, :3] = rodrigues(rotvec)
    m[:3, 3] = t
    return m


def dh_matrix(omega, d, a, alpha, q):
    """Classic DH link: Rz(q + omega) Tz(d) Tx(a) Rx(alpha)."""
    return rot_z(q + omega) @ trans(0, 0, d) @ trans(a, 0, 0) @ rot_x(alpha)


def fk_matrix(base_rotvec, base_t, links, joints):
    m = homogeneous(base_rotvec, base_t)
    for (omega, d, a, alpha), q in zip(links, joints):
        m = m @ dh_matrix(omega, d, a, alpha, q)
    return m


def pixels(fx, fy, cx, cy, cam_from_world, points_world):
    """Pinhole projection of ``(m, 3)`` world points; returns ``(m, 2)`` and depths."""
    ph = np.column_stack([points_world, np.ones(len(points_world))])
    pc = (cam_from_world @ ph.T).T[:, :3]
    return np.column_stack([fx * pc[:, 0] / pc[:, 2] + cx, fy * pc[:, 1] / pc[:, 2] + cy]), pc[:, 2]


def render_model(base_rotvec, base_t, links, features, cameras, joints):
    """Straight-line rendering: cameras are ``(fx, fy, cx, cy, rotvec, t)`` tuples."""
    ee = fk_matrix(base_rotvec, base_t, links, joints)
    fh = np.column_stack([features, np.ones(len(features))])
    world = (ee @ fh.T).T[:, :3]
    out, depth = [], []
    for fx, fy, cx, cy, rv, t in cameras:
        uv, z = pixels(fx, fy, cx, cy, homogeneous(rv, t), world)
        out.append(uv)
        depth.append(z)
    return np.array(out), np.array(depth)
