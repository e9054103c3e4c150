"""First-order-hold discretization of the time-dilated dynamics.

The normalized horizon tau in [0, 1] is split into N-1 equal segments; the
physical time is t = sigma * tau.  For each segment the state-transition
data of the linearized, time-dilated dynamics is produced:

    x_{i+1} ~ A_d x_i + B_minus u_i + B_plus u_{i+1} + S_d sigma + w_d + E v_i

which is exact along the reference (the propagated endpoint equals the
affine combination evaluated at the reference).  Integration uses a fixed
step RK4 with RK4_SUBSTEPS substeps per segment, batched over segments.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dynamics import f_batch, jacobians_batch
from .problem import NU, NX, ProblemConstants

RK4_SUBSTEPS = 15


class IntegrationFailure(RuntimeError):
    pass


@dataclass
class Trajectory:
    """Discretized trajectory: states (N, 14), controls (N, 3), sigma = t_f."""

    states: np.ndarray
    controls: np.ndarray
    sigma: float

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.controls = np.asarray(self.controls, dtype=float)
        if self.states.ndim != 2 or self.states.shape[1] != NX:
            raise ValueError("states must be (N, 14)")
        if self.controls.shape != (self.states.shape[0], NU):
            raise ValueError("controls must be (N, 3)")
        if self.sigma <= 0.0:
            raise ValueError("sigma must be positive")

    @property
    def n_nodes(self) -> int:
        return self.states.shape[0]

    @property
    def t_f(self) -> float:
        return self.sigma

    def copy(self) -> "Trajectory":
        return Trajectory(self.states.copy(), self.controls.copy(), self.sigma)

    def to_json_dict(self) -> dict:
        return {
            "sigma": self.sigma,
            "states": self.states.tolist(),
            "controls": self.controls.tolist(),
        }

    @staticmethod
    def from_json_dict(doc: dict) -> "Trajectory":
        return Trajectory(np.array(doc["states"]), np.array(doc["controls"]),
                          float(doc["sigma"]))

    def to_csv(self) -> str:
        cols = (["m"] + [f"r_{a}" for a in "uen"] + [f"v_{a}" for a in "uen"]
                + [f"q_{a}" for a in "wxyz"] + [f"w_{a}" for a in "xyz"]
                + [f"T_{a}" for a in "xyz"])
        lines = ["node,t," + ",".join(cols)]
        n = self.n_nodes
        for i in range(n):
            t = self.sigma * i / (n - 1)
            vals = np.concatenate([self.states[i], self.controls[i]])
            lines.append(f"{i},{t:.9g}," + ",".join(f"{v:.9g}" for v in vals))
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class LinearizedSegment:
    A_d: np.ndarray       # 14 x 14
    B_minus: np.ndarray   # 14 x 3
    B_plus: np.ndarray    # 14 x 3
    S_d: np.ndarray       # 14
    w_d: np.ndarray       # 14
    E: np.ndarray         # 14 x n_v virtual-control channels

    def endpoint(self, x_i, u_i, u_ip1, sigma) -> np.ndarray:
        return (self.A_d @ x_i + self.B_minus @ u_i + self.B_plus @ u_ip1
                + self.S_d * sigma + self.w_d)


def _check_finite(arr, what: str):
    if not np.all(np.isfinite(arr)):
        raise IntegrationFailure(f"non-finite values in {what}")


def discretize(reference: Trajectory, consts: ProblemConstants,
               substeps: int = RK4_SUBSTEPS) -> list[LinearizedSegment]:
    """Linearized transition data for every segment of the reference."""
    X, U, sigma = reference.states, reference.controls, reference.sigma
    n_seg = reference.n_nodes - 1
    dtau = 1.0 / n_seg
    h = dtau / substeps

    x = X[:-1].copy()                    # (n_seg, 14)
    Phi = np.tile(np.eye(NX), (n_seg, 1, 1))
    Bm = np.zeros((n_seg, NX, NU))
    Bp = np.zeros((n_seg, NX, NU))
    Sd = np.zeros((n_seg, NX))
    wd = np.zeros((n_seg, NX))

    u0, u1 = U[:-1], U[1:]

    def rates(tau_local, x, Phi, Bm, Bp, Sd, wd):
        lam_p = tau_local / dtau
        lam_m = 1.0 - lam_p
        u = lam_m * u0 + lam_p * u1
        f = f_batch(x, u, consts)
        A, B = jacobians_batch(x, u, consts)
        sA = sigma * A
        sB = sigma * B
        Phi_inv = np.linalg.inv(Phi)
        PiB = Phi_inv @ sB
        r = -np.einsum("sij,sj->si", sA, x) - np.einsum("sij,sj->si", sB, u)
        return (
            sigma * f,
            sA @ Phi,
            lam_m * PiB,
            lam_p * PiB,
            np.einsum("sij,sj->si", Phi_inv, f),
            np.einsum("sij,sj->si", Phi_inv, r),
        )

    state = [x, Phi, Bm, Bp, Sd, wd]
    for step in range(substeps):
        t0 = step * h
        k1 = rates(t0, *state)
        k2 = rates(t0 + h / 2, *[s + h / 2 * k for s, k in zip(state, k1)])
        k3 = rates(t0 + h / 2, *[s + h / 2 * k for s, k in zip(state, k2)])
        k4 = rates(t0 + h, *[s + h * k for s, k in zip(state, k3)])
        state = [s + h / 6 * (a + 2 * b + 2 * c + d)
                 for s, a, b, c, d in zip(state, k1, k2, k3, k4)]
    x, Phi, Bm, Bp, Sd, wd = state
    for arr, what in ((x, "states"), (Phi, "transition matrices")):
        _check_finite(arr, what)

    E = np.eye(NX)
    segments = []
    for i in range(n_seg):
        segments.append(LinearizedSegment(
            A_d=Phi[i],
            B_minus=Phi[i] @ Bm[i],
            B_plus=Phi[i] @ Bp[i],
            S_d=Phi[i] @ Sd[i],
            w_d=Phi[i] @ wd[i],
            E=E,
        ))
    return segments


def propagate_segments(traj: Trajectory, consts: ProblemConstants,
                       substeps: int = RK4_SUBSTEPS) -> np.ndarray:
    """Nonlinear FOH propagation of every node to the next; returns (N-1, 14)."""
    X, U, sigma = traj.states, traj.controls, traj.sigma
    n_seg = traj.n_nodes - 1
    dtau = 1.0 / n_seg
    h = dtau / substeps
    u0, u1 = U[:-1], U[1:]
    x = X[:-1].copy()
    for step in range(substeps):
        t0 = step * h

        def f_at(tau_local, xs):
            lam_p = tau_local / dtau
            u = (1.0 - lam_p) * u0 + lam_p * u1
            return sigma * f_batch(xs, u, consts)

        k1 = f_at(t0, x)
        k2 = f_at(t0 + h / 2, x + h / 2 * k1)
        k3 = f_at(t0 + h / 2, x + h / 2 * k2)
        k4 = f_at(t0 + h, x + h * k3)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    _check_finite(x, "propagated states")
    return x


def defect(traj: Trajectory, consts: ProblemConstants,
           substeps: int = RK4_SUBSTEPS) -> np.ndarray:
    """Per-segment L1 norm of x_{i+1} minus its nonlinear FOH propagation."""
    prop = propagate_segments(traj, consts, substeps)
    return np.abs(traj.states[1:] - prop).sum(axis=1)


def propagate_from_initial(x0: np.ndarray, controls: np.ndarray, sigma: float,
                           consts: ProblemConstants,
                           substeps: int = RK4_SUBSTEPS) -> Trajectory:
    """Integrate the full horizon forward from x0 (dynamically feasible)."""
    n = controls.shape[0]
    X = np.zeros((n, NX))
    X[0] = x0
    # a two-node trajectory spans its whole sigma, so each single-segment
    # propagation gets the per-segment duration sigma / (n - 1)
    for i in range(n - 1):
        seg = Trajectory(np.vstack([X[i], X[i]]), controls[i:i + 2],
                         sigma / (n - 1))
        X[i + 1] = propagate_segments(seg, consts, substeps)[0]
    return Trajectory(X, controls.copy(), sigma)
