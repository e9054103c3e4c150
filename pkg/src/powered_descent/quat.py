"""Quaternion helpers.

Convention: scalar-first q = [w, x, y, z], unit quaternions represent the
passive rotation body <- inertial, i.e. v_B = dcm(q) @ v_I.  With the Hamilton
product used here the composition rule is dcm(a * b) = dcm(b) @ dcm(a).
"""

import numpy as np

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("cannot normalize zero quaternion")
    return q / n


def conjugate(q):
    q = np.asarray(q, dtype=float)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def dcm(q):
    """Direction cosine matrix body <- inertial for scalar-first q.

    Uses the homogeneous quadratic form; exact for unit quaternions and
    smooth (polynomial) for non-unit ones, which keeps linearizations
    consistent with finite differences.
    """
    w, x, y, z = q
    ww = w * w - x * x - y * y - z * z
    return np.array([
        [ww + 2 * x * x, 2 * (x * y + w * z), 2 * (x * z - w * y)],
        [2 * (x * y - w * z), ww + 2 * y * y, 2 * (y * z + w * x)],
        [2 * (x * z + w * y), 2 * (y * z - w * x), ww + 2 * z * z],
    ])


def dcm_batch(q):
    """dcm for q of shape (..., 4), returns (..., 3, 3)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    ww = w * w - x * x - y * y - z * z
    rows = [
        [ww + 2 * x * x, 2 * (x * y + w * z), 2 * (x * z - w * y)],
        [2 * (x * y - w * z), ww + 2 * y * y, 2 * (y * z + w * x)],
        [2 * (x * z + w * y), 2 * (y * z - w * x), ww + 2 * z * z],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def omega_matrix(w):
    """Skew-symmetric 4x4 matrix such that qdot = 0.5 * omega_matrix(w_B) @ q."""
    wx, wy, wz = w
    return np.array([
        [0.0, -wx, -wy, -wz],
        [wx, 0.0, wz, -wy],
        [wy, -wz, 0.0, wx],
        [wz, wy, -wx, 0.0],
    ])


def omega_matrix_batch(w):
    """omega_matrix for w of shape (..., 3), returns (..., 4, 4)."""
    wx, wy, wz = w[..., 0], w[..., 1], w[..., 2]
    z = np.zeros_like(wx)
    rows = [
        [z, -wx, -wy, -wz],
        [wx, z, wz, -wy],
        [wy, -wz, z, wx],
        [wz, wy, -wx, z],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def slerp(qa, qb, t):
    """Spherical interpolation between unit quaternions, t in [0, 1]."""
    qa = normalize(qa)
    qb = normalize(qb)
    d = float(np.dot(qa, qb))
    if d < 0.0:
        qb = -qb
        d = -d
    if d > 1.0 - 1e-12:
        return normalize(qa + t * (qb - qa))
    theta = np.arccos(np.clip(d, -1.0, 1.0))
    return (np.sin((1 - t) * theta) * qa + np.sin(t * theta) * qb) / np.sin(theta)


def rotate_about_up(q, phi):
    """Attitude after rotating the whole scene (inertial and body frames)
    by phi about the shared up axis e1: q' = p * q * conj(p)."""
    p = from_axis_angle([1.0, 0.0, 0.0], phi)
    return multiply(p, multiply(q, conjugate(p)))
