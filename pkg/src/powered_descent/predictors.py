"""Warm-start predictors and their shared encodings.

A problem instance is summarized by a 16-component parameter vector in a
fixed, documented order:

    index  0..2   r0      initial position (up, east, north)
    index  3..5   v0      initial velocity
    index  6..9   q0      initial attitude quaternion (scalar first)
    index 10..12  w0      initial body rates
    index 13      m0      initial mass
    index 14      theta_max   tilt limit, radians
    index 15      gamma_gs    glideslope angle, radians

The constraint network appends the outer-loop iteration k as component 16.
A full solution guess is the flat vector (state 14 + control 3 per node,
node-major, then t_f) of length 17 N + 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import quat
from .discretization import Trajectory
from .problem import (I_M, NU, NX, S_Q, S_R, S_V, S_W, ProblemConstants,
                      ProblemInstance, VehicleState)
from .transformer import TransformerWeights

PARAM_WIDTH = 16
THRUST_GUESS_FLOOR = 1e-6


class EmptyDataset(ValueError):
    pass


class DegenerateCovariance(RuntimeError):
    pass


@dataclass(frozen=True)
class TightSet:
    """Binary activity prediction over the constraint catalog rows."""

    bits: np.ndarray
    iteration: int

    def __post_init__(self):
        b = np.asarray(self.bits, dtype=np.uint8).ravel()
        if not np.all((b == 0) | (b == 1)):
            raise ValueError("tight-set entries must be 0/1")
        object.__setattr__(self, "bits", b)

    @property
    def width(self) -> int:
        return self.bits.size


# -- parameter / solution encodings ----------------------------------------

def params_from_instance(inst: ProblemInstance) -> np.ndarray:
    x0 = inst.x0
    return np.concatenate([
        x0.r_I, x0.v_I, x0.q_BI, x0.w_B,
        [x0.m, inst.theta_max, inst.gamma_gs]])


def instance_from_params(p: np.ndarray,
                         consts: ProblemConstants | None = None) -> ProblemInstance:
    p = np.asarray(p, dtype=float).ravel()
    if p.size != PARAM_WIDTH:
        raise ValueError(f"parameter vector must have {PARAM_WIDTH} entries")
    if consts is None:
        consts = ProblemConstants()
    x0 = VehicleState(r_I=p[0:3], v_I=p[3:6], q_BI=quat.normalize(p[6:10]),
                      w_B=p[10:13], m=p[13])
    return ProblemInstance(gamma_gs=p[15], theta_max=p[14], x0=x0,
                           constants=consts)


def encode_solution(traj: Trajectory) -> np.ndarray:
    per_node = np.hstack([traj.states, traj.controls]).reshape(-1)
    return np.concatenate([per_node, [traj.sigma]])


def decode_solution(vec: np.ndarray, inst: ProblemInstance) -> Trajectory:
    """Trajectory from a (possibly learned, unconstrained) flat guess.

    Guards: sigma clamped to [sigma_min, t_f_max], mass to [m_dry, m0],
    quaternions renormalized, degenerate thrust floored to a vertical
    minimum-magnitude vector.
    """
    c = inst.constants
    vec = np.asarray(vec, dtype=float).ravel()
    if vec.size != (NX + NU) * c.N + 1:
        raise ValueError(f"guess length {vec.size}, expected {(NX+NU)*c.N + 1}")
    per_node = vec[:-1].reshape(c.N, NX + NU)
    X = per_node[:, :NX].copy()
    U = per_node[:, NX:].copy()
    X[:, I_M] = np.clip(X[:, I_M], c.m_dry, inst.x0.m)
    for i in range(c.N):
        qn = np.linalg.norm(X[i, S_Q])
        X[i, S_Q] = X[i, S_Q] / qn if qn > 1e-9 else quat.IDENTITY
        if np.linalg.norm(U[i]) < THRUST_GUESS_FLOOR:
            U[i] = np.array([c.T_min, 0.0, 0.0])
    sigma = float(np.clip(vec[-1], c.sigma_min, c.t_f_max))
    return Trajectory(X, U, sigma)


# -- neural predictors ------------------------------------------------------

def nn_predict_tight(weights: TransformerWeights, params: np.ndarray,
                     iteration: int) -> TightSet:
    """Predicted tight set for iteration k; bit = 1 iff logit > 0."""
    params = np.asarray(params, dtype=float).ravel()
    if params.size == PARAM_WIDTH:
        params = np.concatenate([params, [float(iteration)]])
    logits = weights.forward(params)
    return TightSet(bits=(logits > 0.0).astype(np.uint8), iteration=iteration)


def nn_predict_solution(weights: TransformerWeights,
                        params: np.ndarray) -> np.ndarray:
    return weights.predict(np.asarray(params, dtype=float).ravel())


# -- KD-tree ---------------------------------------------------------------

class KDTree:
    """Static KD-tree over row vectors; exact nearest neighbor with ties
    broken toward the lowest row id."""

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[0] == 0:
            raise EmptyDataset("KD-tree needs a nonempty (n, d) point set")
        n, self.dim = self.points.shape
        # node storage: index into points, split axis, left/right child
        self._idx = np.empty(n, dtype=np.int64)
        self._axis = np.empty(n, dtype=np.int64)
        self._left = np.full(n, -1, dtype=np.int64)
        self._right = np.full(n, -1, dtype=np.int64)
        self._count = 0
        self._root = self._build(np.arange(n), 0)

    def _build(self, ids, depth) -> int:
        if ids.size == 0:
            return -1
        axis = depth % self.dim
        order = np.argsort(self.points[ids, axis], kind="stable")
        ids = ids[order]
        mid = ids.size // 2
        node = self._count
        self._count += 1
        self._idx[node] = ids[mid]
        self._axis[node] = axis
        self._left[node] = self._build(ids[:mid], depth + 1)
        self._right[node] = self._build(ids[mid + 1:], depth + 1)
        return node

    def query(self, x: np.ndarray) -> tuple[int, float]:
        """(row id, distance) of the nearest stored point."""
        x = np.asarray(x, dtype=float).ravel()
        best = [np.inf, -1]

        def visit(node):
            if node < 0:
                return
            pid = int(self._idx[node])
            d = float(np.linalg.norm(self.points[pid] - x))
            if (d, pid) < (best[0], best[1]) or best[1] < 0:
                best[0], best[1] = d, pid
            axis = self._axis[node]
            diff = x[axis] - self.points[pid, axis]
            near, far = ((self._left[node], self._right[node]) if diff <= 0
                         else (self._right[node], self._left[node]))
            visit(near)
            if abs(diff) <= best[0]:
                visit(far)

        visit(self._root)
        return best[1], best[0]


def kdtree_predict(tree: KDTree, labels_tight: np.ndarray,
                   labels_solution: np.ndarray,
                   query: np.ndarray) -> tuple[TightSet, np.ndarray]:
    """Labels of the Euclidean nearest neighbor of the query."""
    i, _ = tree.query(query)
    return TightSet(bits=labels_tight[i], iteration=0), labels_solution[i].copy()


# -- PCA + inverse-distance interpolation ----------------------------------

@dataclass
class PCABasis:
    mean: np.ndarray
    components: np.ndarray   # (k, d) orthonormal rows
    explained: np.ndarray    # eigenvalues, descending

    def project(self, X):
        return (np.atleast_2d(X) - self.mean) @ self.components.T

    def lift(self, Z):
        return np.atleast_2d(Z) @ self.components + self.mean


def fit_pca(X: np.ndarray, n_components: int = 10) -> PCABasis:
    X = np.asarray(X, dtype=float)
    if X.shape[0] == 0:
        raise EmptyDataset("PCA needs samples")
    mean = X.mean(axis=0)
    Xc = X - mean
    # SVD of the centered matrix: rows of Vt are covariance eigenvectors
    _, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    k = min(n_components, Vt.shape[0])
    eig = s ** 2 / max(X.shape[0] - 1, 1)
    return PCABasis(mean=mean, components=Vt[:k], explained=eig[:k])


def interp_predict(basis: PCABasis, train_proj: np.ndarray,
                   labels_tight: np.ndarray, labels_solution: np.ndarray,
                   query: np.ndarray, k: int = 11,
                   exact_tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-distance weighted labels over the k nearest training points
    in PCA space.  Returns (soft tight bits in [0,1], solution guess)."""
    if train_proj.shape[0] == 0:
        raise EmptyDataset("no training points")
    zq = basis.project(query)[0]
    d = np.linalg.norm(train_proj - zq, axis=1)
    k = min(k, d.size)
    nearest = np.argpartition(d, k - 1)[:k]
    nearest = nearest[np.argsort(d[nearest], kind="stable")]
    dn = d[nearest]
    if dn[0] <= exact_tol:
        w = (dn <= exact_tol).astype(float)
    else:
        w = 1.0 / dn
    w = w / w.sum()
    soft = w @ labels_tight[nearest].astype(float)
    guess = w @ labels_solution[nearest]
    return soft, guess


# -- out-of-distribution split ---------------------------------------------

def mahalanobis_distances(X: np.ndarray, mean: np.ndarray,
                          cov_inv: np.ndarray) -> np.ndarray:
    diff = np.atleast_2d(X) - mean
    return np.sqrt(np.einsum("ni,ij,nj->n", diff, cov_inv, diff))


def mahalanobis_split(train: np.ndarray, test: np.ndarray,
                      percentile: float = 95.0
                      ) -> tuple[np.ndarray, np.ndarray]:
    """(in-distribution ids, OOD ids) of the test rows, thresholded at the
    given percentile of the training Mahalanobis distances."""
    train = np.asarray(train, dtype=float)
    test = np.asarray(test, dtype=float)
    if train.shape[0] == 0 or test.shape[0] == 0:
        raise EmptyDataset("empty train or test set")
    mean = train.mean(axis=0)
    cov = np.cov(train, rowvar=False)
    cov = np.atleast_2d(cov) + 1e-8 * np.eye(train.shape[1])
    try:
        cov_inv = np.linalg.inv(cov)
    except np.linalg.LinAlgError as exc:
        raise DegenerateCovariance(str(exc)) from exc
    train_d = mahalanobis_distances(train, mean, cov_inv)
    threshold = np.percentile(train_d, percentile, method="linear")
    test_d = mahalanobis_distances(test, mean, cov_inv)
    ids = np.arange(test.shape[0])
    return ids[test_d <= threshold], ids[test_d > threshold]
