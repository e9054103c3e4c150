"""Continuous-time 6-DoF dynamics and their exact Jacobians.

State derivative (time in normalized units):

    mdot = -alpha * ||T_B|| - beta
    rdot = v_I
    vdot = (1/m) * C_IB @ (T_B + A_B) + g_I
    qdot = 0.5 * Omega(w_B) @ q
    wdot = J^-1 (r_T x T_B + r_cp x A_B - w x J w)

with the aerodynamic force A_B = -0.5 * drag_coeff * ||v|| * (C_BI @ v)
expressed in the body frame.  Since the drag is isotropic the inertial-frame
force reduces to -0.5 * drag_coeff * ||v|| * v.

All core functions are batched: states (..., 14), controls (..., 3).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import quat
from .problem import (I_M, NU, NX, S_Q, S_R, S_V, S_W, ControlInput,
                      NonPositiveMass, ProblemConstants, VehicleState)

THRUST_NORM_FLOOR = 1e-9


@dataclass(frozen=True)
class DynamicsJacobians:
    A: np.ndarray  # 14 x 14
    B: np.ndarray  # 14 x 3
    f: np.ndarray  # 14


def _skew(a):
    """Skew matrices for a of shape (..., 3) -> (..., 3, 3)."""
    z = np.zeros_like(a[..., 0])
    rows = [
        [z, -a[..., 2], a[..., 1]],
        [a[..., 2], z, -a[..., 0]],
        [-a[..., 1], a[..., 0], z],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def f_batch(X: np.ndarray, U: np.ndarray, c: ProblemConstants) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    m = X[..., I_M]
    if np.any(m <= 0.0):
        raise NonPositiveMass("state has non-positive mass")
    v = X[..., S_V]
    q = X[..., S_Q]
    w = X[..., S_W]

    C = quat.dcm_batch(q)  # body <- inertial
    vnorm = np.linalg.norm(v, axis=-1)
    cd = 0.5 * c.drag_coeff
    A_B = -cd * vnorm[..., None] * np.einsum("...ij,...j->...i", C, v)
    Tnorm = np.linalg.norm(U, axis=-1)

    out = np.empty_like(X)
    out[..., I_M] = -c.alpha_mdot * Tnorm - c.beta_mdot
    out[..., S_R] = v
    # C^T (T + A_B) / m + g; C^T A_B = -cd ||v|| v exactly
    out[..., S_V] = (np.einsum("...ji,...j->...i", C, U) - cd * vnorm[..., None] * v) \
        / m[..., None] + c.g_I
    Om = quat.omega_matrix_batch(w)
    out[..., S_Q] = 0.5 * np.einsum("...ij,...j->...i", Om, q)
    Jw = np.einsum("ij,...j->...i", c.J_B, w)
    torque = (np.cross(np.broadcast_to(c.r_T_B, U.shape), U)
              + np.cross(np.broadcast_to(c.r_cp_B, U.shape), A_B)
              - np.cross(w, Jw))
    Jinv = np.linalg.inv(c.J_B)
    out[..., S_W] = np.einsum("ij,...j->...i", Jinv, torque)
    return out


def _drot_apply_dq(q, a, transpose: bool):
    """Jacobian of (C(q)^T a) w.r.t. q if transpose, else of (C(q) a).

    Uses C(q)^T a = (w^2 - xi.xi) a + 2 (xi.a) xi + 2 w (xi x a) and the
    conjugate form for C(q) a.  Shapes: q (..., 4), a (..., 3) -> (..., 3, 4).
    """
    w = q[..., 0]
    xi = q[..., 1:4]
    sgn = 1.0 if transpose else -1.0
    cross = np.cross(xi, a)
    col_w = 2.0 * w[..., None] * a + sgn * 2.0 * cross  # (..., 3)
    eye = np.broadcast_to(np.eye(3), a.shape + (3,))
    xi_dot_a = np.einsum("...i,...i->...", xi, a)
    cols_xi = (-2.0 * np.einsum("...i,...j->...ij", a, xi)
               + 2.0 * np.einsum("...i,...j->...ij", xi, a)
               + 2.0 * xi_dot_a[..., None, None] * eye
               - sgn * 2.0 * w[..., None, None] * _skew(a))
    return np.concatenate([col_w[..., None], cols_xi], axis=-1)


def jacobians_batch(X: np.ndarray, U: np.ndarray,
                    c: ProblemConstants) -> tuple[np.ndarray, np.ndarray]:
    """Exact partials of f_batch: A (..., 14, 14) and B (..., 14, 3)."""
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    m = X[..., I_M]
    if np.any(m <= 0.0):
        raise NonPositiveMass("state has non-positive mass")
    Tnorm = np.linalg.norm(U, axis=-1)
    if np.any(Tnorm < THRUST_NORM_FLOOR):
        raise ValueError("thrust norm below floor; gradient of ||T|| undefined")

    v = X[..., S_V]
    q = X[..., S_Q]
    w = X[..., S_W]
    C = quat.dcm_batch(q)
    vnorm = np.linalg.norm(v, axis=-1)
    cd = 0.5 * c.drag_coeff
    Jinv = np.linalg.inv(c.J_B)

    batch = X.shape[:-1]
    A = np.zeros(batch + (NX, NX))
    B = np.zeros(batch + (NX, NU))

    # mass row
    B[..., I_M, :] = -c.alpha_mdot * U / Tnorm[..., None]

    # position rows: rdot = v
    A[..., S_R, S_V] = np.broadcast_to(np.eye(3), batch + (3, 3))

    # velocity rows
    CT_T = np.einsum("...ji,...j->...i", C, U)
    drag_I = -cd * vnorm[..., None] * v
    A[..., S_V, I_M] = -(CT_T + drag_I) / (m[..., None] ** 2)
    safe_vn = np.where(vnorm > 0.0, vnorm, 1.0)
    dvv = -(cd / m[..., None, None]) * (
        vnorm[..., None, None] * np.broadcast_to(np.eye(3), batch + (3, 3))
        + np.einsum("...i,...j->...ij", v, v) / safe_vn[..., None, None])
    A[..., S_V, S_V] = np.where(vnorm[..., None, None] > 0.0, dvv, 0.0)
    A[..., S_V, S_Q] = _drot_apply_dq(q, U, transpose=True) / m[..., None, None]
    B[..., S_V, :] = np.swapaxes(C, -1, -2) / m[..., None, None]

    # quaternion rows
    A[..., S_Q, S_Q] = 0.5 * quat.omega_matrix_batch(w)
    q0, q1, q2, q3 = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    Xi = np.stack([
        np.stack([-q1, -q2, -q3], axis=-1),
        np.stack([q0, -q3, q2], axis=-1),
        np.stack([q3, q0, -q1], axis=-1),
        np.stack([-q2, q1, q0], axis=-1),
    ], axis=-2)
    A[..., S_Q, S_W] = 0.5 * Xi

    # angular velocity rows
    Jw = np.einsum("ij,...j->...i", c.J_B, w)
    dtau_dw = -np.einsum("...ik,kj->...ij", _skew(w), c.J_B) + _skew(Jw)
    A[..., S_W, S_W] = np.einsum("ij,...jk->...ik", Jinv, dtau_dw)
    rcp_skew = _skew(np.broadcast_to(c.r_cp_B, batch + (3,)))
    if np.any(c.r_cp_B != 0.0):
        Cv = np.einsum("...ij,...j->...i", C, v)
        dAB_dv = -cd * (np.einsum("...i,...j->...ij", Cv, v) / safe_vn[..., None, None]
                        + vnorm[..., None, None] * C)
        dAB_dv = np.where(vnorm[..., None, None] > 0.0, dAB_dv, 0.0)
        dAB_dq = -cd * vnorm[..., None, None] * _drot_apply_dq(q, v, transpose=False)
        A[..., S_W, S_V] = np.einsum("ij,...jk,...kl->...il", Jinv, rcp_skew, dAB_dv)
        A[..., S_W, S_Q] = np.einsum("ij,...jk,...kl->...il", Jinv, rcp_skew, dAB_dq)
    rT_skew = _skew(np.broadcast_to(c.r_T_B, batch + (3,)))
    B[..., S_W, :] = np.einsum("ij,...jk->...ik", Jinv, rT_skew)

    return A, B


def derivative(state: VehicleState, ctrl: ControlInput,
               consts: ProblemConstants) -> np.ndarray:
    """State derivative [mdot; rdot; vdot; qdot; wdot] as a flat 14-vector."""
    return f_batch(state.as_vector()[None, :], ctrl.as_vector()[None, :], consts)[0]


def jacobians(state: VehicleState, ctrl: ControlInput,
              consts: ProblemConstants) -> DynamicsJacobians:
    x = state.as_vector()[None, :]
    u = ctrl.as_vector()[None, :]
    A, B = jacobians_batch(x, u, consts)
    return DynamicsJacobians(A=A[0], B=B[0], f=f_batch(x, u, consts)[0])
