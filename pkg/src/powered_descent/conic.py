"""Standard-form conic programming layer.

Problems are posed as

    minimize    c^T z
    subject to  G z + s = h,   s in K

where K is an ordered product of zero cones, nonnegative orthants, and
second-order cones.  The dual reads max -h^T y s.t. G^T y + c = 0, y in K*,
so at an optimum c^T z + h^T y vanishes.

Solving is delegated to a sparse primal-dual interior-point backend
(Nesterov-Todd scaled, homogeneous embedding for infeasibility
certificates); this module owns validation, status mapping, activity
detection and serialization.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import clarabel
import numpy as np
import scipy.sparse as sp

ACTIVITY_DUAL_THRESHOLD = 1e-6
ACTIVATION_TOL = 1e-4

MAGIC_TEXT = "conic-v1"
MAGIC_BIN = b"CPB1"


class IllConditioned(RuntimeError):
    """Factorization breakdown / insufficient progress in the solver."""


class NumericalError(RuntimeError):
    """Non-finite iterates encountered by the solver."""


class NotOptimal(RuntimeError):
    """Operation requires an Optimal solution."""


@dataclass(frozen=True)
class Zero:
    dim: int


@dataclass(frozen=True)
class NonNeg:
    dim: int


@dataclass(frozen=True)
class SOC:
    dim: int


Cone = Zero | NonNeg | SOC


class SolveStatus(enum.Enum):
    OPTIMAL = "Optimal"
    PRIMAL_INFEASIBLE = "PrimalInfeasible"
    DUAL_INFEASIBLE = "DualInfeasible"
    MAX_ITER = "MaxIter"


@dataclass
class ConeProgram:
    c: np.ndarray
    G: sp.csc_matrix
    h: np.ndarray
    cones: list[Cone]
    var_names: list[str] | None = None
    row_names: list[str] | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        self.G = sp.csc_matrix(self.G)
        self.h = np.asarray(self.h, dtype=float).ravel()
        m, n = self.G.shape
        if self.c.shape != (n,):
            raise ValueError("c length must match columns of G")
        if self.h.shape != (m,):
            raise ValueError("h length must match rows of G")
        dims = sum(k.dim for k in self.cones)
        if dims != m:
            raise ValueError(f"cone dims sum to {dims}, expected {m} rows")
        if any(k.dim <= 0 for k in self.cones):
            raise ValueError("cone dimensions must be positive")
        if any(isinstance(k, SOC) and k.dim < 2 for k in self.cones):
            raise ValueError("SOC cones need dimension >= 2")
        # Empty rows are meaningless except inside SOC blocks, where they
        # carry constants through h (e.g. the radius in ||x|| <= r).
        row_counts = np.diff(sp.csr_matrix(self.G).indptr)
        allowed = np.zeros(m, dtype=bool)
        off = 0
        for k in self.cones:
            if isinstance(k, SOC):
                allowed[off:off + k.dim] = True
            off += k.dim
        bad = np.flatnonzero((row_counts == 0) & ~allowed)
        if bad.size:
            raise ValueError(f"all-zero constraint rows: {bad[:5].tolist()}")

    @property
    def n_vars(self) -> int:
        return self.G.shape[1]

    @property
    def n_rows(self) -> int:
        return self.G.shape[0]

    def cone_row_ranges(self) -> list[tuple[int, int]]:
        out, off = [], 0
        for k in self.cones:
            out.append((off, off + k.dim))
            off += k.dim
        return out

    # -- serialization -----------------------------------------------------

    def to_text(self) -> str:
        """Sparse text dump: header line, cone list, c, h, COO triplets."""
        coo = self.G.tocoo()
        lines = [f"{MAGIC_TEXT} rows={self.n_rows} cols={self.n_vars} "
                 f"nnz={coo.nnz} cones={len(self.cones)}"]
        lines.append(" ".join(f"{type(k).__name__}:{k.dim}" for k in self.cones))
        lines.append("c " + " ".join(f"{v:.17g}" for v in self.c))
        lines.append("h " + " ".join(f"{v:.17g}" for v in self.h))
        for i, j, v in zip(coo.row, coo.col, coo.data):
            lines.append(f"{i} {j} {v:.17g}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> "ConeProgram":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        head = dict(tok.split("=") for tok in lines[0].split()[1:])
        if not lines[0].startswith(MAGIC_TEXT):
            raise ValueError("not a conic text dump")
        m, n, nnz = int(head["rows"]), int(head["cols"]), int(head["nnz"])
        cones: list[Cone] = []
        for tok in lines[1].split():
            name, dim = tok.split(":")
            cones.append({"Zero": Zero, "NonNeg": NonNeg, "SOC": SOC}[name](int(dim)))
        c = np.array([float(v) for v in lines[2].split()[1:]])
        h = np.array([float(v) for v in lines[3].split()[1:]])
        rows, cols, vals = [], [], []
        for ln in lines[4:4 + nnz]:
            i, j, v = ln.split()
            rows.append(int(i)); cols.append(int(j)); vals.append(float(v))
        G = sp.coo_matrix((vals, (rows, cols)), shape=(m, n)).tocsc()
        return ConeProgram(c, G, h, cones)

    def to_binary(self) -> bytes:
        """Little-endian binary variant of the text dump."""
        coo = self.G.tocoo()
        out = bytearray()
        out += MAGIC_BIN
        out += struct.pack("<IIII", self.n_rows, self.n_vars, coo.nnz,
                           len(self.cones))
        kinds = {Zero: 0, NonNeg: 1, SOC: 2}
        for k in self.cones:
            out += struct.pack("<BI", kinds[type(k)], k.dim)
        out += self.c.astype("<f8").tobytes()
        out += self.h.astype("<f8").tobytes()
        out += coo.row.astype("<u4").tobytes()
        out += coo.col.astype("<u4").tobytes()
        out += coo.data.astype("<f8").tobytes()
        return bytes(out)

    @staticmethod
    def from_binary(blob: bytes) -> "ConeProgram":
        if blob[:4] != MAGIC_BIN:
            raise ValueError("not a conic binary dump")
        m, n, nnz, nk = struct.unpack_from("<IIII", blob, 4)
        off = 20
        cones: list[Cone] = []
        ctors = [Zero, NonNeg, SOC]
        for _ in range(nk):
            kind, dim = struct.unpack_from("<BI", blob, off)
            cones.append(ctors[kind](dim))
            off += 5
        c = np.frombuffer(blob, "<f8", n, off); off += 8 * n
        h = np.frombuffer(blob, "<f8", m, off); off += 8 * m
        rows = np.frombuffer(blob, "<u4", nnz, off); off += 4 * nnz
        cols = np.frombuffer(blob, "<u4", nnz, off); off += 4 * nnz
        vals = np.frombuffer(blob, "<f8", nnz, off)
        G = sp.coo_matrix((vals, (rows, cols)), shape=(m, n)).tocsc()
        return ConeProgram(c.copy(), G, h.copy(), cones)


@dataclass
class ConeSolution:
    z: np.ndarray
    y: np.ndarray
    s: np.ndarray
    status: SolveStatus
    gap: float
    iters: int
    objective: float


def _to_backend_cones(cones):
    out = []
    for k in cones:
        if isinstance(k, Zero):
            out.append(clarabel.ZeroConeT(k.dim))
        elif isinstance(k, NonNeg):
            out.append(clarabel.NonnegativeConeT(k.dim))
        else:
            out.append(clarabel.SecondOrderConeT(k.dim))
    return out


def solve(prog: ConeProgram, tol: float = 1e-7,
          maxit: int = 1000) -> ConeSolution:
    n = prog.n_vars
    P = sp.csc_matrix((n, n))
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = maxit
    settings.tol_gap_abs = tol
    settings.tol_gap_rel = tol
    settings.tol_feas = tol
    solver = clarabel.DefaultSolver(P, prog.c, prog.G, prog.h,
                                    _to_backend_cones(prog.cones), settings)
    sol = solver.solve()
    name = str(sol.status)
    if "NumericalError" in name:
        raise NumericalError("solver hit non-finite iterates")
    if "InsufficientProgress" in name:
        raise IllConditioned("solver stalled; problem likely ill-conditioned")
    if "Solved" in name or "AlmostSolved" in name:
        status = SolveStatus.OPTIMAL
    elif "PrimalInfeasible" in name:
        status = SolveStatus.PRIMAL_INFEASIBLE
    elif "DualInfeasible" in name:
        status = SolveStatus.DUAL_INFEASIBLE
    else:
        status = SolveStatus.MAX_ITER
    z = np.asarray(sol.x, dtype=float)
    y = np.asarray(sol.z, dtype=float)
    s = np.asarray(sol.s, dtype=float)
    gap = abs(float(prog.c @ z) + float(prog.h @ y))
    return ConeSolution(z=z, y=y, s=s, status=status, gap=gap,
                        iters=int(sol.iterations), objective=float(sol.obj_val))


def dual_activity(sol: ConeSolution, row_ranges,
                  dual_threshold: float = ACTIVITY_DUAL_THRESHOLD,
                  slack_tol: float = ACTIVATION_TOL) -> np.ndarray:
    """Boolean activity flag per row range.

    A range is active when its dual block norm exceeds the threshold or its
    slack is within the activation tolerance of the cone boundary.
    """
    if sol.status is not SolveStatus.OPTIMAL:
        raise NotOptimal(f"solution status is {sol.status.value}")
    flags = np.zeros(len(row_ranges), dtype=bool)
    for i, (lo, hi) in enumerate(row_ranges):
        y = sol.y[lo:hi]
        s = sol.s[lo:hi]
        if hi - lo == 1:
            slack_dist = abs(s[0])
        else:
            # distance to the SOC boundary s0 = ||s_1:||
            slack_dist = abs(s[0] - np.linalg.norm(s[1:]))
        flags[i] = (np.linalg.norm(y) >= dual_threshold
                    or slack_dist <= slack_tol)
    return flags
