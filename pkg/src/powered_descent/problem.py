"""6-DoF powered descent guidance problem definition.

Parameters, state/control types, minimum-fuel cost, boundary conditions and
the ordered catalog of per-node inequality constraints.

Flat state vector layout (14 entries):

    index 0      mass m
    index 1:4    position r_I (up, east, north)
    index 4:7    velocity v_I
    index 7:11   attitude quaternion q_BI (scalar first)
    index 11:14  angular velocity w_B (body frame, rad/U_T)

Angles are stored in radians internally; JSON I/O uses degrees.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import quat

# flat-state slices
I_M = 0
S_R = slice(1, 4)
S_V = slice(4, 7)
S_Q = slice(7, 11)
S_W = slice(11, 14)
NX = 14
NU = 3

QUAT_NORM_TOL = 1e-9

# inequality kinds, fixed row order within each node
CONSTRAINT_KINDS = (
    "mass-lb",
    "glideslope",
    "tilt",
    "omega-max",
    "thrust-lb",
    "thrust-ub",
    "gimbal",
)
KINDS_PER_NODE = len(CONSTRAINT_KINDS)
# every kind is convex in the subproblem variables except the thrust lower bound
NONCONVEX_KINDS = frozenset({"thrust-lb"})


class NonPositiveMass(ValueError):
    pass


@dataclass(frozen=True)
class VehicleState:
    """State of the vehicle at one node."""

    r_I: np.ndarray
    v_I: np.ndarray
    q_BI: np.ndarray
    w_B: np.ndarray
    m: float

    def __post_init__(self):
        object.__setattr__(self, "r_I", np.asarray(self.r_I, dtype=float))
        object.__setattr__(self, "v_I", np.asarray(self.v_I, dtype=float))
        object.__setattr__(self, "q_BI", np.asarray(self.q_BI, dtype=float))
        object.__setattr__(self, "w_B", np.asarray(self.w_B, dtype=float))
        if self.m <= 0.0:
            raise NonPositiveMass(f"mass must be positive, got {self.m}")

    @staticmethod
    def from_vector(x) -> "VehicleState":
        x = np.asarray(x, dtype=float)
        return VehicleState(r_I=x[S_R], v_I=x[S_V], q_BI=x[S_Q], w_B=x[S_W], m=float(x[I_M]))

    def as_vector(self) -> np.ndarray:
        x = np.empty(NX)
        x[I_M] = self.m
        x[S_R] = self.r_I
        x[S_V] = self.v_I
        x[S_Q] = self.q_BI
        x[S_W] = self.w_B
        return x

    def normalized(self) -> "VehicleState":
        q = quat.normalize(self.q_BI)
        assert abs(np.linalg.norm(q) - 1.0) <= QUAT_NORM_TOL
        return VehicleState(self.r_I, self.v_I, q, self.w_B, self.m)


@dataclass(frozen=True)
class ControlInput:
    """Thrust vector in the body frame."""

    T_B: np.ndarray

    def __post_init__(self):
        T = np.asarray(self.T_B, dtype=float)
        if not np.all(np.isfinite(T)):
            raise ValueError("thrust components must be finite")
        object.__setattr__(self, "T_B", T)

    def as_vector(self) -> np.ndarray:
        return self.T_B


@dataclass(frozen=True)
class ProblemConstants:
    """Fixed vehicle / mission / algorithm constants.

    Defaults reproduce the nondimensional Mars-landing setup (units U_L,
    U_T, U_M).  Angles in radians.
    """

    g_I: np.ndarray = field(default_factory=lambda: np.array([-1.0, 0.0, 0.0]))
    atm_density: float = 0.020
    J_B: np.ndarray = field(default_factory=lambda: 0.01 * np.diag([0.1, 1.0, 1.0]))
    P_amb: float = 0.1
    A_noz: float = 0.5
    r_cp_B: np.ndarray = field(default_factory=lambda: np.zeros(3))
    r_T_B: np.ndarray = field(default_factory=lambda: np.array([-0.01, 0.0, 0.0]))
    drag_coeff: float = 0.2  # the product rho * S_A * C_A
    I_sp: float = 30.0
    g0: float = 1.0
    omega_max: float = np.deg2rad(90.0)
    delta_max: float = np.deg2rad(20.0)
    T_min: float = 0.3
    T_max: float = 5.0
    V_alpha: float = 2.0
    m_dry: float = 2.0
    r_f: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v_f: np.ndarray = field(default_factory=lambda: np.array([-0.1, 0.0, 0.0]))
    q_f: np.ndarray = field(default_factory=lambda: quat.IDENTITY.copy())
    w_f: np.ndarray = field(default_factory=lambda: np.zeros(3))
    N: int = 50
    N_sub: int = 49
    iter_max: int = 20
    lam: float = 500.0
    rho0: float = 0.0
    rho1: float = 0.1
    rho2: float = 0.7
    beta_sh: float = 2.0
    beta_gr: float = 2.0
    eta_full_init: float = 2.0
    eta_reduced_init: float = 0.01
    eta_lb: float = 0.001
    eta_ub: float = 10.0
    eps_abs: float = 0.1
    eps_rel: float = 0.001
    feas_tol: float = 0.5
    solver_maxit: int = 1000
    # configuration values not fixed by the mission setup
    t_f_max: float = 10.0
    sigma_min: float = 0.1
    beta_mdot: float = 0.0
    activation_tol: float = 1e-4

    def __post_init__(self):
        for name in ("g_I", "J_B", "r_cp_B", "r_T_B", "r_f", "v_f", "q_f", "w_f"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if not (self.rho0 < self.rho1 < self.rho2 < 1.0):
            raise ValueError("require rho0 < rho1 < rho2 < 1")
        if self.rho0 != 0.0:
            raise ValueError("rho0 must be 0")
        if not (0.0 < self.T_min < self.T_max):
            raise ValueError("require 0 < T_min < T_max")
        if not (self.eta_lb < self.eta_full_init <= self.eta_ub):
            raise ValueError("eta_full_init outside [eta_lb, eta_ub]")
        if not (self.eta_lb < self.eta_reduced_init <= self.eta_ub):
            raise ValueError("eta_reduced_init outside [eta_lb, eta_ub]")

    @property
    def alpha_mdot(self) -> float:
        """Fuel consumption rate 1 / (I_sp * g0)."""
        return 1.0 / (self.I_sp * self.g0)

    def terminal_state(self, m: float) -> VehicleState:
        return VehicleState(self.r_f, self.v_f, self.q_f, self.w_f, m)


@dataclass(frozen=True)
class ProblemInstance:
    """One parametric instance: sampled parameters plus fixed constants."""

    gamma_gs: float  # glideslope angle, rad
    theta_max: float  # max tilt angle, rad
    x0: VehicleState
    constants: ProblemConstants = field(default_factory=ProblemConstants)

    def __post_init__(self):
        if not (0.0 < self.gamma_gs <= np.pi / 2):
            raise ValueError("gamma_gs must be in (0, 90] deg")
        if not (0.0 < self.theta_max < 2 * np.pi):
            raise ValueError("theta_max must be in (0, 360) deg")
        if self.x0.m <= self.constants.m_dry:
            raise ValueError("initial mass must exceed dry mass")

    @property
    def xf(self) -> VehicleState:
        return self.constants.terminal_state(self.constants.m_dry)


@dataclass(frozen=True)
class CatalogRow:
    kind: str
    node: int  # 1-based node index
    convex: bool


class ConstraintCatalog:
    """Deterministic ordering of all discretized inequality rows.

    Node-major: the 7 kinds of node 1 first, then node 2, etc.  The same
    ordering is used for dataset labels, predictions and subproblem assembly.
    """

    def __init__(self, n_nodes: int):
        self.n_nodes = int(n_nodes)
        self._rows = tuple(
            CatalogRow(kind, node, kind not in NONCONVEX_KINDS)
            for node in range(1, self.n_nodes + 1)
            for kind in CONSTRAINT_KINDS
        )

    @property
    def width(self) -> int:
        return len(self._rows)

    @property
    def rows(self) -> tuple[CatalogRow, ...]:
        return self._rows

    def index(self, kind: str, node: int) -> int:
        if kind not in CONSTRAINT_KINDS:
            raise KeyError(kind)
        if not 1 <= node <= self.n_nodes:
            raise IndexError(node)
        return (node - 1) * KINDS_PER_NODE + CONSTRAINT_KINDS.index(kind)

    def kind_mask(self, kind: str) -> np.ndarray:
        return np.array([row.kind == kind for row in self._rows])

    def to_json(self) -> str:
        return json.dumps({
            "n_nodes": self.n_nodes,
            "rows": [[r.kind, r.node, r.convex] for r in self._rows],
        }, separators=(",", ":"))

    @staticmethod
    def from_json(text: str) -> "ConstraintCatalog":
        doc = json.loads(text)
        cat = ConstraintCatalog(doc["n_nodes"])
        if [[r.kind, r.node, r.convex] for r in cat.rows] != doc["rows"]:
            raise ValueError("catalog rows do not match declared ordering")
        return cat

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def __eq__(self, other):
        return isinstance(other, ConstraintCatalog) and other.n_nodes == self.n_nodes

    def __hash__(self):
        return hash(("ConstraintCatalog", self.n_nodes))


def cost(traj) -> float:
    """Minimum-fuel objective: minus the final mass."""
    if traj.states.shape[0] < 2:
        raise ValueError("trajectory needs at least 2 nodes")
    return -float(traj.states[-1, I_M])


def evaluate_constraints(state: VehicleState, ctrl: ControlInput,
                         inst: ProblemInstance) -> np.ndarray:
    """Residuals of the 7 catalog kinds at one node, g <= 0 convention."""
    x = state.as_vector()[None, :]
    u = ctrl.as_vector()[None, :]
    return evaluate_constraints_batch(x, u, inst)[0]


def evaluate_constraints_batch(X: np.ndarray, U: np.ndarray,
                               inst: ProblemInstance) -> np.ndarray:
    """Residuals for states X (n, 14) and controls U (n, 3); returns (n, 7)."""
    c = inst.constants
    m = X[:, I_M]
    r = X[:, S_R]
    q = X[:, S_Q]
    w = X[:, S_W]
    Tn = np.linalg.norm(U, axis=1)
    out = np.empty((X.shape[0], KINDS_PER_NODE))
    out[:, 0] = c.m_dry - m
    out[:, 1] = np.tan(inst.gamma_gs) * np.linalg.norm(r[:, 1:3], axis=1) - r[:, 0]
    out[:, 2] = np.cos(inst.theta_max) - 1.0 + 2.0 * np.linalg.norm(q[:, 2:4], axis=1)
    out[:, 3] = np.linalg.norm(w, axis=1) - c.omega_max
    out[:, 4] = c.T_min - Tn
    out[:, 5] = Tn - c.T_max
    out[:, 6] = np.cos(c.delta_max) * Tn - U[:, 0]
    return out


def evaluate_catalog(traj, inst: ProblemInstance) -> np.ndarray:
    """All catalog residuals of a trajectory, in catalog row order (7N,)."""
    return evaluate_constraints_batch(traj.states, traj.controls, inst).reshape(-1)


@dataclass(frozen=True)
class BoundaryRow:
    node: int  # 1-based
    state_index: int  # index into the flat state vector
    value: float


def boundary_conditions(inst: ProblemInstance) -> list[BoundaryRow]:
    """Equality rows pinning the initial and terminal states.

    The initial attitude quaternion is left free (10 initial rows); the
    terminal state fixes r, v, q and w (13 rows).
    """
    x0 = inst.x0.as_vector()
    xf = inst.xf.as_vector()
    n = inst.constants.N
    rows = [BoundaryRow(1, I_M, x0[I_M])]
    for sl in (S_R, S_V, S_W):
        rows += [BoundaryRow(1, i, x0[i]) for i in range(sl.start, sl.stop)]
    for sl in (S_R, S_V, S_Q, S_W):
        rows += [BoundaryRow(n, i, xf[i]) for i in range(sl.start, sl.stop)]
    return rows


def rotate_state_vector(x: np.ndarray, phi: float) -> np.ndarray:
    """Image of a flat state under the up-axis symmetry rotation by phi.

    Rotates r, v and w_B laterally and conjugates the attitude so the scene
    and the body frame turn together about e1.
    """
    c, s = np.cos(phi), np.sin(phi)
    R = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    out = np.array(x, dtype=float, copy=True)
    out[S_R] = R @ x[S_R]
    out[S_V] = R @ x[S_V]
    out[S_W] = R @ x[S_W]
    out[S_Q] = quat.rotate_about_up(x[S_Q], phi)
    return out


def rotate_control_vector(u: np.ndarray, phi: float) -> np.ndarray:
    c, s = np.cos(phi), np.sin(phi)
    R = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    return R @ np.asarray(u, dtype=float)


# ---------------------------------------------------------------------------
# JSON serialization (degrees for angles, field names mirroring the setup
# tables)
# ---------------------------------------------------------------------------

def instance_to_json(inst: ProblemInstance) -> str:
    c = inst.constants
    doc = {
        "gamma_gs_deg": np.rad2deg(inst.gamma_gs),
        "theta_max_deg": np.rad2deg(inst.theta_max),
        "x0": {
            "r_I": inst.x0.r_I.tolist(),
            "v_I": inst.x0.v_I.tolist(),
            "q_BI": inst.x0.q_BI.tolist(),
            "w_B_deg": np.rad2deg(inst.x0.w_B).tolist(),
            "m": inst.x0.m,
        },
        "constants": {
            "g_I": c.g_I.tolist(),
            "atm_density": c.atm_density,
            "J_B": c.J_B.tolist(),
            "P_amb": c.P_amb,
            "A_noz": c.A_noz,
            "r_cp_B": c.r_cp_B.tolist(),
            "r_T_B": c.r_T_B.tolist(),
            "drag_coeff": c.drag_coeff,
            "I_sp": c.I_sp,
            "g0": c.g0,
            "omega_max_deg": np.rad2deg(c.omega_max),
            "delta_max_deg": np.rad2deg(c.delta_max),
            "T_min": c.T_min,
            "T_max": c.T_max,
            "V_alpha": c.V_alpha,
            "m_dry": c.m_dry,
            "r_f": c.r_f.tolist(),
            "v_f": c.v_f.tolist(),
            "q_f": c.q_f.tolist(),
            "w_f_deg": np.rad2deg(c.w_f).tolist(),
            "N": c.N,
            "N_sub": c.N_sub,
            "iter_max": c.iter_max,
            "lam": c.lam,
            "rho0": c.rho0,
            "rho1": c.rho1,
            "rho2": c.rho2,
            "beta_sh": c.beta_sh,
            "beta_gr": c.beta_gr,
            "eta_full_init": c.eta_full_init,
            "eta_reduced_init": c.eta_reduced_init,
            "eta_lb": c.eta_lb,
            "eta_ub": c.eta_ub,
            "eps_abs": c.eps_abs,
            "eps_rel": c.eps_rel,
            "feas_tol": c.feas_tol,
            "solver_maxit": c.solver_maxit,
            "t_f_max": c.t_f_max,
            "sigma_min": c.sigma_min,
            "beta_mdot": c.beta_mdot,
            "activation_tol": c.activation_tol,
        },
    }
    return json.dumps(doc, indent=2)


def instance_from_json(text: str) -> ProblemInstance:
    doc = json.loads(text)
    cd = doc["constants"]
    consts = ProblemConstants(
        g_I=cd["g_I"], atm_density=cd["atm_density"], J_B=cd["J_B"],
        P_amb=cd["P_amb"], A_noz=cd["A_noz"], r_cp_B=cd["r_cp_B"],
        r_T_B=cd["r_T_B"], drag_coeff=cd["drag_coeff"], I_sp=cd["I_sp"],
        g0=cd["g0"], omega_max=np.deg2rad(cd["omega_max_deg"]),
        delta_max=np.deg2rad(cd["delta_max_deg"]), T_min=cd["T_min"],
        T_max=cd["T_max"], V_alpha=cd["V_alpha"], m_dry=cd["m_dry"],
        r_f=cd["r_f"], v_f=cd["v_f"], q_f=cd["q_f"],
        w_f=np.deg2rad(cd["w_f_deg"]), N=cd["N"], N_sub=cd["N_sub"],
        iter_max=cd["iter_max"], lam=cd["lam"], rho0=cd["rho0"],
        rho1=cd["rho1"], rho2=cd["rho2"], beta_sh=cd["beta_sh"],
        beta_gr=cd["beta_gr"], eta_full_init=cd["eta_full_init"],
        eta_reduced_init=cd["eta_reduced_init"], eta_lb=cd["eta_lb"],
        eta_ub=cd["eta_ub"], eps_abs=cd["eps_abs"], eps_rel=cd["eps_rel"],
        feas_tol=cd["feas_tol"], solver_maxit=cd["solver_maxit"],
        t_f_max=cd["t_f_max"], sigma_min=cd["sigma_min"],
        beta_mdot=cd["beta_mdot"], activation_tol=cd["activation_tol"],
    )
    x0d = doc["x0"]
    x0 = VehicleState(
        r_I=x0d["r_I"], v_I=x0d["v_I"], q_BI=x0d["q_BI"],
        w_B=np.deg2rad(x0d["w_B_deg"]), m=x0d["m"],
    )
    return ProblemInstance(
        gamma_gs=np.deg2rad(doc["gamma_gs_deg"]),
        theta_max=np.deg2rad(doc["theta_max_deg"]),
        x0=x0, constants=consts,
    )


def nominal_instance(consts: ProblemConstants | None = None) -> ProblemInstance:
    """A representative well-posed instance used by tests and demos."""
    consts = consts or ProblemConstants()
    x0 = VehicleState(
        r_I=np.array([6.0, 2.0, 1.0]),
        v_I=np.array([-0.5, 0.2, 0.0]),
        q_BI=quat.IDENTITY.copy(),
        w_B=np.zeros(3),
        m=3.0,
    )
    return ProblemInstance(
        gamma_gs=np.deg2rad(20.0),
        theta_max=np.deg2rad(90.0),
        x0=x0,
        constants=consts,
    )
