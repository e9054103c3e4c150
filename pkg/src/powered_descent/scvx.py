"""Trust-region sequential convex programming core.

Each outer iteration linearizes the dynamics about the reference, builds a
conic subproblem in the step variables

    z = (d_1..d_N, w_1..w_N, dsigma, v_1..v_{N-1}, t_1..t_{N-1}, s'_1..s'_N)

with d = state step, w = control step, dsigma = final-time step, v =
unconstrained virtual control on the dynamics (t its L1 epigraph), and s' =
nonnegative virtual buffer on the linearized thrust lower bound.  Convex
path constraints enter as hard cone rows; the exact penalty

    J = cost + lam * sum|defect|_1 + lam * sum max(0, g_noncvx)
             + tau * sum max(0, g_cvx)

is evaluated on the full nonlinear problem to drive acceptance and the
trust-region radius through rho = (actual decrease) / (predicted decrease).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import conic, quat
from .conic import ConeProgram, NonNeg, SOC, SolveStatus, Zero
from .discretization import (LinearizedSegment, Trajectory, defect,
                             discretize, propagate_segments)
from .problem import (CONSTRAINT_KINDS, I_M, NU, NX, S_Q, S_R, S_V, S_W,
                      ConstraintCatalog, ProblemInstance, boundary_conditions,
                      cost, evaluate_catalog)

MAX_CONSECUTIVE_REJECTIONS = 10


class SubproblemFailure(RuntimeError):
    def __init__(self, iteration: int, cause: Exception):
        super().__init__(f"subproblem failed at iteration {iteration}: {cause}")
        self.iteration = iteration
        self.cause = cause


class NotConverged(RuntimeError):
    pass


class InconsistentCatalog(ValueError):
    pass


@dataclass(frozen=True)
class PenaltyConfig:
    """Weights of the exact penalty; the scalar lam covers every class."""

    lam: float = 500.0
    lam_dyn: float | None = None     # dynamics defect rows
    lam_ncvx: float | None = None    # nonconvex inequality rows
    tau_cvx: float | None = None     # convex inequality rows

    def __post_init__(self):
        for name in ("lam_dyn", "lam_ncvx", "tau_cvx"):
            if getattr(self, name) is None:
                object.__setattr__(self, name, self.lam)
        if self.lam_dyn <= 0:
            raise ValueError("dynamics penalty weight must be positive")
        if min(self.lam, self.lam_ncvx, self.tau_cvx) < 0:
            raise ValueError("penalty weights must be nonnegative")


@dataclass
class TrustRegion:
    radius: float = 2.0
    alpha: float = 2.0   # contraction factor
    beta: float = 2.0    # growth factor
    r_l: float = 0.001
    r_u: float = 10.0

    def __post_init__(self):
        if not (self.r_l <= self.radius <= self.r_u):
            raise ValueError("radius outside [r_l, r_u]")
        if self.alpha <= 1.0 or self.beta <= 1.0:
            raise ValueError("alpha and beta must exceed 1")


def update_radius(radius: float, rho: float, rho1: float, rho2: float,
                  tr: TrustRegion, tau_r: float | None = None) -> float:
    """Three-case radius update; tau_r switches to the reduced-problem rule.

    With tau_r the contraction becomes alpha**tau_r and the growth
    beta**(1 - tau_r): a stable predicted tight set (tau_r = 0) suppresses
    shrinking and allows full growth.
    """
    if tau_r is not None and not 0.0 <= tau_r <= 1.0:
        raise ValueError("tau_r must lie in [0, 1]")
    if rho < rho1:
        shrink = tr.alpha if tau_r is None else tr.alpha ** tau_r
        new = radius / shrink
    elif rho < rho2:
        new = radius
    else:
        grow = tr.beta if tau_r is None else tr.beta ** (1.0 - tau_r)
        new = radius * grow
    return min(max(new, tr.r_l), tr.r_u)


def boundary_violation(traj: Trajectory, inst: ProblemInstance) -> float:
    """L1 violation of the initial/terminal equality rows."""
    total = 0.0
    for bc in boundary_conditions(inst):
        total += abs(traj.states[bc.node - 1, bc.state_index] - bc.value)
    return total


def penalty_cost(traj: Trajectory, inst: ProblemInstance,
                 cfg: PenaltyConfig) -> float:
    """Exact penalty J of a trajectory on the full nonlinear problem.

    The equality class covers both the dynamics defects and the boundary
    rows, so an initial guess that misses the boundary conditions (a warm
    start from a neighboring instance) is scored honestly against the
    boundary-feasible iterates that follow.
    """
    c = inst.constants
    res = evaluate_catalog(traj, inst)
    cat = ConstraintCatalog(traj.n_nodes)
    cvx = np.array([row.convex for row in cat.rows])
    hinge = np.maximum(res, 0.0)
    return (cost(traj)
            + cfg.lam_dyn * float(defect(traj, c).sum())
            + cfg.lam_dyn * boundary_violation(traj, inst)
            + cfg.lam_ncvx * float(hinge[~cvx].sum())
            + cfg.tau_cvx * float(hinge[cvx].sum()))


def initial_guess(inst: ProblemInstance) -> Trajectory:
    """Cold-start reference: straight-line kinematics, hover-level thrust."""
    c = inst.constants
    n = c.N
    x0 = inst.x0.as_vector()
    xf = inst.xf.as_vector()
    lam = np.linspace(0.0, 1.0, n)[:, None]
    X = np.zeros((n, NX))
    X[:, I_M] = np.linspace(x0[I_M], c.m_dry, n)
    X[:, S_R] = (1 - lam) * x0[S_R] + lam * xf[S_R]
    X[:, S_V] = (1 - lam) * x0[S_V] + lam * xf[S_V]
    for i in range(n):
        X[i, S_Q] = quat.slerp(x0[S_Q], xf[S_Q], i / (n - 1))
    X[:, S_W] = (1 - lam) * x0[S_W] + lam * xf[S_W]
    U = np.zeros((n, NU))
    for i in range(n):
        C = quat.dcm(X[i, S_Q])
        T = -X[i, I_M] * (C @ c.g_I)
        Tn = np.linalg.norm(T)
        T = T * np.clip(Tn, c.T_min, c.T_max) / Tn
        U[i] = T
    return Trajectory(X, U, c.t_f_max / 2.0)


# -- subproblem assembly ----------------------------------------------------

#: kinds that stay in the subproblem no matter what the prediction says
SAFETY_KINDS = frozenset({"mass-lb"})


@dataclass
class SubproblemMeta:
    """Index bookkeeping for one assembled subproblem."""

    n_nodes: int
    off_d: int
    off_w: int
    off_sig: int
    off_nu: int
    off_t: int
    off_sp: int
    n_vars: int
    ref_cost: float
    # catalog row index -> (lo, hi) cone row range, only for kept rows
    catalog_row_ranges: dict[int, tuple[int, int]]
    kept: np.ndarray  # bool per catalog row

    def split(self, z: np.ndarray):
        n = self.n_nodes
        d = z[self.off_d:self.off_d + NX * n].reshape(n, NX)
        w = z[self.off_w:self.off_w + NU * n].reshape(n, NU)
        dsig = float(z[self.off_sig])
        return d, w, dsig


def assemble_subproblem(ref: Trajectory, segments: list[LinearizedSegment],
                        tight, radius: float, inst: ProblemInstance,
                        cfg: PenaltyConfig) -> tuple[ConeProgram, SubproblemMeta]:
    """Conic subproblem about ref.

    tight is None for the full problem, or a {0,1} vector over the catalog
    selecting which non-safety rows to keep (reduced mode).
    """
    c = inst.constants
    n = ref.n_nodes
    n_seg = n - 1
    cat = ConstraintCatalog(n)
    if tight is not None:
        tight = np.asarray(tight).astype(bool).ravel()
        if tight.size != cat.width:
            raise InconsistentCatalog(
                f"tight-set width {tight.size} != catalog width {cat.width}")

    off_d = 0
    off_w = NX * n
    off_sig = off_w + NU * n
    off_nu = off_sig + 1
    off_t = off_nu + NX * n_seg
    off_sp = off_t + NX * n_seg
    n_vars = off_sp + n

    rows_i: list[int] = []
    cols_i: list[int] = []
    vals: list[float] = []
    h: list[float] = []
    cones: list = []
    row = 0

    def put(col, val):
        rows_i.append(row)
        cols_i.append(col)
        vals.append(float(val))

    def end_row(rhs):
        nonlocal row
        h.append(float(rhs))
        row += 1

    X, U, sig = ref.states, ref.controls, ref.sigma

    # dynamics: d_{i+1} - A d_i - Bm w_i - Bp w_{i+1} - S dsig - v_i
    #           = x_disc(ref) - x_ref_{i+1}
    for i, seg in enumerate(segments):
        rhs = seg.endpoint(X[i], U[i], U[i + 1], sig) - X[i + 1]
        for j in range(NX):
            put(off_d + NX * (i + 1) + j, 1.0)
            for k in range(NX):
                if seg.A_d[j, k] != 0.0:
                    put(off_d + NX * i + k, -seg.A_d[j, k])
            for k in range(NU):
                if seg.B_minus[j, k] != 0.0:
                    put(off_w + NU * i + k, -seg.B_minus[j, k])
                if seg.B_plus[j, k] != 0.0:
                    put(off_w + NU * (i + 1) + k, -seg.B_plus[j, k])
            if seg.S_d[j] != 0.0:
                put(off_sig, -seg.S_d[j])
            put(off_nu + NX * i + j, -1.0)
            end_row(rhs[j])
    cones.append(Zero(NX * n_seg))

    # boundary equalities on the step variables
    bcs = boundary_conditions(inst)
    for bc in bcs:
        put(off_d + NX * (bc.node - 1) + bc.state_index, 1.0)
        end_row(bc.value - X[bc.node - 1, bc.state_index])
    cones.append(Zero(len(bcs)))

    # nonnegative block
    nn_start = row
    for j in range(NX * n_seg):                 # |v| <= t
        put(off_nu + j, 1.0)
        put(off_t + j, -1.0)
        end_row(0.0)
        put(off_nu + j, -1.0)
        put(off_t + j, -1.0)
        end_row(0.0)
    for i in range(n):                          # s' >= 0
        put(off_sp + i, -1.0)
        end_row(0.0)

    catalog_row_ranges: dict[int, tuple[int, int]] = {}
    kept = np.ones(cat.width, dtype=bool)
    if tight is not None:
        for idx, crow in enumerate(cat.rows):
            kept[idx] = tight[idx] or crow.kind in SAFETY_KINDS

    # linear catalog rows (mass-lb, thrust-lb with buffer)
    for i in range(n):
        idx = cat.index("mass-lb", i + 1)
        if kept[idx]:
            put(off_d + NX * i + I_M, -1.0)
            catalog_row_ranges[idx] = (row, row + 1)
            end_row(X[i, I_M] - c.m_dry)
        idx = cat.index("thrust-lb", i + 1)
        if kept[idx]:
            Tn = np.linalg.norm(U[i])
            That = U[i] / Tn if Tn > 1e-9 else np.array([1.0, 0.0, 0.0])
            for k in range(NU):
                put(off_w + NU * i + k, -That[k])
            put(off_sp + i, -1.0)
            catalog_row_ranges[idx] = (row, row + 1)
            end_row(Tn - c.T_min)

    # final-time step box and bounds on sigma itself
    put(off_sig, 1.0); end_row(radius)
    put(off_sig, -1.0); end_row(radius)
    put(off_sig, 1.0); end_row(c.t_f_max - sig)
    put(off_sig, -1.0); end_row(sig - c.sigma_min)
    cones.append(NonNeg(row - nn_start))

    # second-order-cone catalog rows, node-major like the catalog
    tan_gs = np.tan(inst.gamma_gs)
    tilt_bound = (1.0 - np.cos(inst.theta_max)) / 2.0
    cos_dm = np.cos(c.delta_max)
    for i in range(n):
        idx = cat.index("glideslope", i + 1)
        if kept[idx]:
            lo = row
            put(off_d + NX * i + S_R.start, -1.0 / tan_gs)
            end_row(X[i, S_R.start] / tan_gs)
            for k in (1, 2):
                put(off_d + NX * i + S_R.start + k, -1.0)
                end_row(X[i, S_R.start + k])
            cones.append(SOC(3))
            catalog_row_ranges[idx] = (lo, row)
        idx = cat.index("tilt", i + 1)
        if kept[idx]:
            lo = row
            end_row(tilt_bound)
            for k in (2, 3):
                put(off_d + NX * i + S_Q.start + k, -1.0)
                end_row(X[i, S_Q.start + k])
            cones.append(SOC(3))
            catalog_row_ranges[idx] = (lo, row)
        idx = cat.index("omega-max", i + 1)
        if kept[idx]:
            lo = row
            end_row(c.omega_max)
            for k in range(3):
                put(off_d + NX * i + S_W.start + k, -1.0)
                end_row(X[i, S_W.start + k])
            cones.append(SOC(4))
            catalog_row_ranges[idx] = (lo, row)
        idx = cat.index("thrust-ub", i + 1)
        if kept[idx]:
            lo = row
            end_row(c.T_max)
            for k in range(NU):
                put(off_w + NU * i + k, -1.0)
                end_row(U[i, k])
            cones.append(SOC(4))
            catalog_row_ranges[idx] = (lo, row)
        idx = cat.index("gimbal", i + 1)
        if kept[idx]:
            lo = row
            put(off_w + NU * i, -1.0 / cos_dm)
            end_row(U[i, 0] / cos_dm)
            for k in range(NU):
                put(off_w + NU * i + k, -1.0)
                end_row(U[i, k])
            cones.append(SOC(4))
            catalog_row_ranges[idx] = (lo, row)

    # trust region: ||d|| <= r and ||w|| <= r
    end_row(radius)
    for j in range(NX * n):
        put(off_d + j, -1.0)
        end_row(0.0)
    cones.append(SOC(1 + NX * n))
    end_row(radius)
    for j in range(NU * n):
        put(off_w + j, -1.0)
        end_row(0.0)
    cones.append(SOC(1 + NU * n))

    obj = np.zeros(n_vars)
    obj[off_d + NX * (n - 1) + I_M] = -1.0
    obj[off_t:off_t + NX * n_seg] = cfg.lam_dyn
    obj[off_sp:off_sp + n] = cfg.lam_ncvx

    G = sp.coo_matrix((vals, (rows_i, cols_i)), shape=(row, n_vars)).tocsc()
    prog = ConeProgram(obj, G, np.array(h), cones)
    meta = SubproblemMeta(n_nodes=n, off_d=off_d, off_w=off_w, off_sig=off_sig,
                          off_nu=off_nu, off_t=off_t, off_sp=off_sp,
                          n_vars=n_vars, ref_cost=-X[n - 1, I_M],
                          catalog_row_ranges=catalog_row_ranges, kept=kept)
    return prog, meta


# -- outer loop -------------------------------------------------------------

@dataclass
class IterRecord:
    iteration: int
    J: float
    L: float
    dJ: float
    dL: float
    rho: float
    radius: float
    accepted: bool
    defect_max: float
    solver_iters: int
    reduced: bool
    tau_r: float | None
    tight_bits: list[int] | None

    def as_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class ScvxReport:
    status: str  # Converged | MaxIter | Diverged
    solution: Trajectory
    iterates: list[IterRecord]
    binding_count: int = -1

    @property
    def n_iterations(self) -> int:
        return len(self.iterates)

    @property
    def converged(self) -> bool:
        return self.status == "Converged"

    def to_json(self) -> str:
        return json.dumps({
            "status": self.status,
            "iterates": [it.as_dict() for it in self.iterates],
            "binding_count": self.binding_count,
            "solution": self.solution.to_json_dict(),
        })

    @staticmethod
    def from_json(text: str) -> "ScvxReport":
        doc = json.loads(text)
        its = [IterRecord(**d) for d in doc["iterates"]]
        return ScvxReport(doc["status"], Trajectory.from_json_dict(doc["solution"]),
                          its, doc["binding_count"])


def tight_bits(traj: Trajectory, inst: ProblemInstance) -> np.ndarray:
    """Active catalog rows of a trajectory: residual within the activation
    tolerance of zero (or violated)."""
    res = evaluate_catalog(traj, inst)
    return (res >= -inst.constants.activation_tol).astype(np.uint8)


def _run(inst: ProblemInstance, init: Trajectory, cfg: PenaltyConfig,
         tr: TrustRegion, tight_provider=None, trace_sink=None) -> ScvxReport:
    """Shared SCP loop.  tight_provider(k, ref) returns the kept-row
    prediction for iteration k (None keeps the full catalog)."""
    c = inst.constants
    ref = init.copy()
    radius = tr.radius
    J_ref = penalty_cost(ref, inst, cfg)
    records: list[IterRecord] = []
    prev_bits = None
    rejections = 0
    status = "MaxIter"

    for k in range(1, c.iter_max + 1):
        bits = None if tight_provider is None else tight_provider(k, ref)
        tau_r = None
        if bits is not None:
            bits = np.asarray(bits).astype(np.uint8).ravel()
            if prev_bits is not None:
                tau_r = float(np.abs(bits.astype(int)
                                     - prev_bits.astype(int)).sum()) / bits.size
            else:
                tau_r = 0.0
            prev_bits = bits

        segments = discretize(ref, c)
        while True:
            prog, meta = assemble_subproblem(ref, segments, bits, radius,
                                             inst, cfg)
            if trace_sink is not None:
                trace_sink(k, prog)
            try:
                sol = conic.solve(prog, tol=1e-7, maxit=c.solver_maxit)
            except (conic.IllConditioned, conic.NumericalError) as exc:
                raise SubproblemFailure(k, exc) from exc
            if sol.status not in (SolveStatus.PRIMAL_INFEASIBLE,
                                  SolveStatus.DUAL_INFEASIBLE):
                break
            # a too-small trust region can cut off the affine feasible set
            # (e.g. a warm start whose boundary mismatch exceeds the
            # radius); an infeasible probe is not a step, so grow the
            # radius and re-solve within the same iteration
            if radius >= tr.r_u * (1.0 - 1e-12):
                raise SubproblemFailure(
                    k, RuntimeError(f"subproblem {sol.status.value} "
                                    "at maximum radius"))
            radius = min(radius * tr.beta, tr.r_u)

        while True:
            L = float(sol.objective) + meta.ref_cost
            dL = J_ref - L
            # the subproblem minimizes the linearized penalty, so its optimum
            # can only score worse than the reference when the reference
            # itself is cut off (infeasible start whose repair exceeds the
            # trust region); grow and re-solve within the same iteration
            if dL >= -1e-9 * (1.0 + abs(J_ref)) \
                    or radius >= tr.r_u * (1.0 - 1e-12):
                break
            radius = min(radius * tr.beta, tr.r_u)
            prog, meta = assemble_subproblem(ref, segments, bits, radius,
                                             inst, cfg)
            try:
                sol = conic.solve(prog, tol=1e-7, maxit=c.solver_maxit)
            except (conic.IllConditioned, conic.NumericalError) as exc:
                raise SubproblemFailure(k, exc) from exc
            if sol.status in (SolveStatus.PRIMAL_INFEASIBLE,
                              SolveStatus.DUAL_INFEASIBLE):
                raise SubproblemFailure(
                    k, RuntimeError("subproblem infeasible after growth"))

        d, w, dsig = meta.split(sol.z)
        cand = Trajectory(ref.states + d, ref.controls + w, ref.sigma + dsig)
        J_cand = penalty_cost(cand, inst, cfg)
        dJ = J_ref - J_cand
        # the reference is near-feasible for its own subproblem, so the
        # predicted decrease should never be meaningfully negative
        rho = dJ / dL if abs(dL) > 1e-12 else np.inf
        accepted = rho >= c.rho0
        new_radius = update_radius(radius, rho, c.rho1, c.rho2, tr, tau_r)
        if not accepted:
            # a rejection must shrink the region meaningfully or nearly the
            # same subproblem repeats until the rejection cap (tau_r near 0
            # suppresses the tight-set-modulated contraction); guarantee at
            # least the plain contraction factor
            new_radius = max(min(new_radius, radius / tr.alpha), tr.r_l)
        radius = new_radius

        defects = defect(cand, c)
        records.append(IterRecord(
            iteration=k, J=J_cand if accepted else J_ref, L=L, dJ=dJ, dL=dL,
            rho=float(rho), radius=radius, accepted=bool(accepted),
            defect_max=float(defects.max()), solver_iters=sol.iters,
            reduced=bits is not None, tau_r=tau_r,
            tight_bits=tight_bits(cand, inst).tolist()))

        eps_tol = c.eps_abs + c.eps_rel * abs(J_ref)
        if accepted:
            rejections = 0
            ref = cand
            J_ref = J_cand
        else:
            rejections += 1
        # the stop rule is on the magnitude of the actual change, whether or
        # not the step was taken; a rejected step with negligible |dJ| means
        # the reference can no longer be improved
        if abs(dJ) <= eps_tol:
            res = evaluate_catalog(ref, inst)
            ref_defects = defect(ref, c)
            if ref_defects.max() <= c.feas_tol and res.max() <= c.feas_tol:
                status = "Converged"
                break
        if rejections >= MAX_CONSECUTIVE_REJECTIONS:
            status = "Diverged"
            break

    return ScvxReport(status=status, solution=ref, iterates=records)


def scvx(inst: ProblemInstance, init: Trajectory | None = None,
         cfg: PenaltyConfig | None = None, tr: TrustRegion | None = None,
         trace_sink=None) -> ScvxReport:
    """Full-problem SCP solve (cold start unless init is given)."""
    c = inst.constants
    if init is None:
        init = initial_guess(inst)
    if init.n_nodes != c.N:
        raise ValueError(f"initial guess has {init.n_nodes} nodes, expected {c.N}")
    if cfg is None:
        cfg = PenaltyConfig(lam=c.lam)
    if tr is None:
        tr = TrustRegion(radius=c.eta_full_init, alpha=c.beta_sh,
                         beta=c.beta_gr, r_l=c.eta_lb, r_u=c.eta_ub)
    return _run(inst, init, cfg, tr, tight_provider=None, trace_sink=trace_sink)


def binding_diagnostic(report: ScvxReport,
                       inst: ProblemInstance) -> tuple[int, bool]:
    """Count of binding constraints at the solution and whether they are
    numerous enough (>= 3 (N-1)) to pin down the control sequence."""
    if not report.converged:
        raise NotConverged(f"status is {report.status}")
    c = inst.constants
    res = evaluate_catalog(report.solution, inst)
    active = int((np.abs(res) <= c.activation_tol).sum())
    count = active + len(boundary_conditions(inst))
    return count, count >= NU * (c.N - 1)
