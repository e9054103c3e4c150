"""Warm-started SCP with predicted tight-constraint sets.

The loop mirrors the full solver but (a) initializes from a predicted
solution instead of the straight-line guess, (b) assembles each subproblem
with only the predicted-tight rows (plus the safety set), and (c) modulates
the trust-region update by the fraction tau_r of prediction bits that
changed between consecutive iterations.  Acceptance and convergence keep
the full-problem exact penalty, so prediction misses cannot produce an
infeasible "converged" answer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from . import quat
from .discretization import Trajectory
from .predictors import (KDTree, PCABasis, TightSet, decode_solution,
                         encode_solution, fit_pca, interp_predict,
                         nn_predict_solution, nn_predict_tight,
                         params_from_instance)
from .problem import (I_M, S_Q, S_R, S_V, S_W, ConstraintCatalog,
                      ProblemInstance)
from .scvx import (PenaltyConfig, ScvxReport, TrustRegion, _run, scvx,
                   tight_bits)
from .transformer import TransformerWeights


class PredictorFailure(RuntimeError):
    pass


class Predictors(Protocol):
    def predict_solution(self, params: np.ndarray) -> np.ndarray: ...

    def predict_tight(self, params: np.ndarray, k: int) -> np.ndarray: ...


def _tight_at(tight_history: list[np.ndarray], k: int) -> np.ndarray:
    """Iteration-k entry of a per-iteration tight-set history (1-based,
    clamped to the last recorded iteration)."""
    return tight_history[min(k, len(tight_history)) - 1]


@dataclass
class TablePredictor:
    """Nearest-neighbor lookup over stored solves (standardized params)."""

    params: np.ndarray           # (n, 16) raw
    tight_history: list[list[np.ndarray]]
    solutions: np.ndarray        # (n, 17N+1)
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self._tree = KDTree((self.params - self.mean) / self.std)

    def _nearest(self, params):
        i, _ = self._tree.query((params - self.mean) / self.std)
        return i

    def predict_solution(self, params):
        return self.solutions[self._nearest(params)].copy()

    def predict_tight(self, params, k):
        return _tight_at(self.tight_history[self._nearest(params)], k)


@dataclass
class InterpPredictor:
    """Inverse-distance interpolation over the k nearest stored solves in a
    10-component PCA reduction of the standardized parameters."""

    params: np.ndarray
    tight_history: list[list[np.ndarray]]
    solutions: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    n_components: int = 10
    k_neighbors: int = 11

    def __post_init__(self):
        std_params = (self.params - self.mean) / self.std
        self._basis = fit_pca(std_params, self.n_components)
        self._proj = self._basis.project(std_params)
        self._final_tight = np.array([h[-1] for h in self.tight_history])

    def _query(self, params, labels_tight):
        std_q = (np.asarray(params, dtype=float) - self.mean) / self.std
        return interp_predict(self._basis, self._proj, labels_tight,
                              self.solutions, std_q, k=self.k_neighbors)

    def predict_solution(self, params):
        _, guess = self._query(params, self._final_tight)
        return guess

    def predict_tight(self, params, k):
        per_k = np.array([_tight_at(h, k) for h in self.tight_history])
        soft, _ = self._query(params, per_k)
        return (soft >= 0.5).astype(np.uint8)


@dataclass
class NNPredictor:
    """Transformer-based prediction of solution and tight sets."""

    solution_weights: TransformerWeights
    constraint_weights: TransformerWeights

    def predict_solution(self, params):
        return nn_predict_solution(self.solution_weights, params)

    def predict_tight(self, params, k):
        return nn_predict_tight(self.constraint_weights, params, k).bits


@dataclass
class OraclePredictor:
    """Replays a previously converged solve of the same instance; the
    upper bound on what any learned predictor can deliver."""

    report: ScvxReport
    inst: ProblemInstance

    def __post_init__(self):
        if not self.report.converged:
            raise PredictorFailure("oracle needs a converged report")
        self._history = [tight_bits(self.report.solution, self.inst)]

    def predict_solution(self, params):
        return encode_solution(self.report.solution)

    def predict_tight(self, params, k):
        return _tight_at(self._history, k)


def repair_guess(traj: Trajectory, inst: ProblemInstance) -> Trajectory:
    """Bend a predicted trajectory so it meets this instance's initial state.

    A guess decoded from a neighboring instance starts at the neighbor's
    initial conditions, and the subproblem's hard boundary rows would then
    demand a single repair step far outside any trust region where the
    linearization is valid.  Instead, blend the initial-state mismatch into
    the whole trajectory with smooth profiles whose derivatives are
    consistent (the position correction's rate is added to velocity, and
    the implied acceleration is supplied through the thrust), so the
    repaired guess satisfies the boundary rows exactly while its dynamics
    defects stay small.
    """
    c = inst.constants
    n = traj.n_nodes
    X = traj.states.copy()
    U = traj.controls.copy()
    T = traj.sigma
    t = np.linspace(0.0, T, n)

    d_r = inst.x0.r_I - X[0, S_R]
    d_v = inst.x0.v_I - X[0, S_V]
    d_w = inst.x0.w_B - X[0, S_W]
    d_m = inst.x0.m - X[0, I_M]

    # s: 1 -> 0 with zero slope at both ends; h: 0 -> 0 with unit initial
    # slope.  Both vanish at t = T, so the terminal rows are untouched.
    s = 0.5 * (1.0 + np.cos(np.pi * t / T))
    s_dot = -0.5 * (np.pi / T) * np.sin(np.pi * t / T)
    s_ddot = -0.5 * (np.pi / T) ** 2 * np.cos(np.pi * t / T)
    h = t * (1.0 - t / T) ** 2
    h_dot = (1.0 - t / T) ** 2 - 2.0 * (t / T) * (1.0 - t / T)
    h_ddot = (6.0 * t / T - 4.0) / T

    X[:, S_R] += np.outer(s, d_r) + np.outer(h, d_v)
    X[:, S_V] += np.outer(s_dot, d_r) + np.outer(h_dot, d_v)
    X[:, S_W] += np.outer(s, d_w)
    m_old = X[:, I_M].copy()
    X[:, I_M] = np.clip(X[:, I_M] + s * d_m, c.m_dry, inst.x0.m)

    # Thrust compensation.  Scale by the mass ratio to preserve the
    # translational acceleration under the blended mass, then supply the
    # blend's implied acceleration along the body thrust axis only: lateral
    # thrust components exert torque through the engine lever arm, which
    # the small inertia amplifies into large attitude defects.
    accel = np.outer(s_ddot, d_r) + np.outer(h_ddot, d_v)
    for i in range(n):
        U[i] *= X[i, I_M] / max(m_old[i], c.m_dry)
        a_body = quat.dcm(X[i, S_Q]) @ accel[i]
        U[i, 0] += X[i, I_M] * a_body[0]
        mag = np.linalg.norm(U[i])
        if mag > 1e-9:
            U[i] *= np.clip(mag, c.T_min, c.T_max) / mag
        else:
            U[i] = np.array([c.T_min, 0.0, 0.0])
    return Trajectory(X, U, T)


def tscvx(inst: ProblemInstance, predictors: Predictors,
          cfg: PenaltyConfig | None = None, tr: TrustRegion | None = None,
          trace_sink=None) -> ScvxReport:
    """Warm-started reduced-subproblem solve; falls back to the cold full
    solver if the predictors cannot produce a usable guess."""
    c = inst.constants
    cat = ConstraintCatalog(c.N)
    params = params_from_instance(inst)
    if cfg is None:
        cfg = PenaltyConfig(lam=c.lam)
    if tr is None:
        tr = TrustRegion(radius=c.eta_reduced_init, alpha=c.beta_sh,
                         beta=c.beta_gr, r_l=c.eta_lb, r_u=c.eta_ub)

    try:
        guess = np.asarray(predictors.predict_solution(params), dtype=float)
        init = repair_guess(decode_solution(guess, inst), inst)
    except Exception:
        return scvx(inst, cfg=cfg, trace_sink=trace_sink)

    def tight_provider(k, ref):
        try:
            bits = np.asarray(predictors.predict_tight(params, k)).ravel()
        except Exception as exc:
            raise PredictorFailure(str(exc)) from exc
        if bits.size != cat.width:
            raise PredictorFailure(
                f"prediction width {bits.size} != catalog {cat.width}")
        return bits

    try:
        return _run(inst, init, cfg, tr, tight_provider=tight_provider,
                    trace_sink=trace_sink)
    except PredictorFailure:
        return scvx(inst, cfg=cfg, trace_sink=trace_sink)
