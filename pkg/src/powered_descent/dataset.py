"""Dataset generation, rotation augmentation, splits, and persistence.

Each sample is one solved instance: the 16-component parameter vector, the
tight-set snapshot at every accepted outer iteration, the converged flat
solution, and solve statistics.  The up-axis rotational symmetry of the
problem turns every solved base sample into 8 samples (angles 0..315 deg in
45 deg steps) without re-solving: states, controls and parameters rotate,
tight-set labels are invariant.

File format: JSON lines.  The first line is a header (version, catalog
digest, standardization stats, counts); each following line is one sample.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .predictors import PARAM_WIDTH, encode_solution, instance_from_params
from .problem import (NU, NX, ConstraintCatalog, ProblemConstants,
                      rotate_control_vector, rotate_state_vector)
from .scvx import scvx

FILE_VERSION = 1
ROTATION_ANGLES_DEG = tuple(range(0, 360, 45))


@dataclass
class Sample:
    id: int
    base_id: int
    angle_deg: float
    params: np.ndarray                 # (16,)
    tight_history: list[np.ndarray]    # per accepted iteration, (7N,) each
    solution: np.ndarray               # (17N+1,)
    converged: bool
    iterations: int
    wall_time: float
    split: str = ""                    # "", "train" or "test"

    def to_json_line(self) -> str:
        return json.dumps({
            "id": self.id, "base_id": self.base_id,
            "angle_deg": self.angle_deg,
            "params": self.params.tolist(),
            "tight_history": [b.astype(int).tolist()
                              for b in self.tight_history],
            "solution": self.solution.tolist(),
            "converged": self.converged, "iterations": self.iterations,
            "wall_time": self.wall_time, "split": self.split,
        }, separators=(",", ":"))

    @staticmethod
    def from_json_line(line: str) -> "Sample":
        d = json.loads(line)
        return Sample(
            id=d["id"], base_id=d["base_id"], angle_deg=d["angle_deg"],
            params=np.array(d["params"]),
            tight_history=[np.array(b, dtype=np.uint8)
                           for b in d["tight_history"]],
            solution=np.array(d["solution"]),
            converged=d["converged"], iterations=d["iterations"],
            wall_time=d["wall_time"], split=d["split"])


@dataclass
class Dataset:
    samples: list[Sample]
    catalog_digest: str
    param_mean: np.ndarray | None = None   # train-split standardization
    param_std: np.ndarray | None = None

    def __len__(self):
        return len(self.samples)

    def converged_samples(self) -> list[Sample]:
        return [s for s in self.samples if s.converged]

    def by_split(self, tag: str) -> list[Sample]:
        return [s for s in self.samples if s.split == tag]

    def params_matrix(self, samples=None) -> np.ndarray:
        ss = self.samples if samples is None else samples
        return np.array([s.params for s in ss])

    def save(self, path) -> None:
        header = {
            "version": FILE_VERSION,
            "catalog_digest": self.catalog_digest,
            "n_samples": len(self.samples),
            "param_mean": None if self.param_mean is None
            else self.param_mean.tolist(),
            "param_std": None if self.param_std is None
            else self.param_std.tolist(),
        }
        with open(path, "w") as fh:
            fh.write(json.dumps(header, separators=(",", ":")) + "\n")
            for s in self.samples:
                fh.write(s.to_json_line() + "\n")

    @staticmethod
    def load(path) -> "Dataset":
        with open(path) as fh:
            header = json.loads(fh.readline())
            if header["version"] != FILE_VERSION:
                raise ValueError(f"unsupported dataset version "
                                 f"{header['version']}")
            samples = [Sample.from_json_line(ln) for ln in fh if ln.strip()]
        mean = header.get("param_mean")
        std = header.get("param_std")
        return Dataset(samples=samples,
                       catalog_digest=header["catalog_digest"],
                       param_mean=None if mean is None else np.array(mean),
                       param_std=None if std is None else np.array(std))


# -- sampling ---------------------------------------------------------------

def sample_params(rng: np.random.Generator,
                  profile: str = "paper") -> np.ndarray:
    """One raw parameter draw.

    "paper" draws the full published ranges (many draws are infeasible or
    hard; that is the intended distribution).  "desk" draws a tame subset
    that converges reliably at small sample counts, for quick benchmarks
    and CI-scale datasets.
    """
    p = np.empty(PARAM_WIDTH)
    if profile == "paper":
        p[0] = rng.uniform(0.003, 9.997)           # up position
        p[1:3] = rng.uniform(0.0, 13.83, 2)        # lateral: positive quadrant
        p[3] = rng.uniform(-1.998, -0.001)
        p[4:6] = rng.uniform(-2.779, 2.779, 2)
        q = np.array([rng.uniform(-0.996, 1.0), rng.uniform(-1.0, 1.0),
                      rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 0.999)])
        p[6:10] = q / np.linalg.norm(q)
        p[10] = np.deg2rad(rng.uniform(-89.98, 89.70))
        p[11:13] = np.deg2rad(rng.uniform(-123.49, 123.49, 2))
        p[13] = rng.uniform(0.003, 3.0)
        p[14] = np.deg2rad(rng.uniform(1e-3, 359.4))
        p[15] = np.deg2rad(rng.uniform(1e-3, 90.0))
    elif profile == "desk":
        p[0] = rng.uniform(4.0, 7.0)
        p[1:3] = rng.uniform(0.0, 1.5, 2)
        p[3] = rng.uniform(-0.6, -0.1)
        p[4:6] = rng.uniform(-0.2, 0.2, 2)
        angle = rng.uniform(0.0, np.deg2rad(10.0))
        axis = rng.normal(0.0, 1.0, 3)
        axis /= np.linalg.norm(axis)
        half = 0.5 * angle
        p[6:10] = np.concatenate([[np.cos(half)], np.sin(half) * axis])
        p[10:13] = np.deg2rad(rng.uniform(-2.0, 2.0, 3))
        p[13] = rng.uniform(2.4, 3.0)
        p[14] = np.deg2rad(rng.uniform(70.0, 110.0))
        p[15] = np.deg2rad(rng.uniform(10.0, 25.0))
    else:
        raise ValueError(f"unknown sampling profile {profile!r}")
    return p


def rotate_params(p: np.ndarray, phi: float) -> np.ndarray:
    """Parameter vector of the instance rotated by phi about the up axis."""
    x = np.empty(NX)
    x[0] = p[13]
    x[1:4] = p[0:3]
    x[4:7] = p[3:6]
    x[7:11] = p[6:10]
    x[11:14] = p[10:13]
    xr = rotate_state_vector(x, phi)
    out = p.copy()
    out[0:3] = xr[1:4]
    out[3:6] = xr[4:7]
    out[6:10] = xr[7:11]
    out[10:13] = xr[11:14]
    return out


def rotate_solution(vec: np.ndarray, phi: float, n_nodes: int) -> np.ndarray:
    per_node = vec[:-1].reshape(n_nodes, NX + NU)
    out = np.empty_like(per_node)
    for i in range(n_nodes):
        out[i, :NX] = rotate_state_vector(per_node[i, :NX], phi)
        out[i, NX:] = rotate_control_vector(per_node[i, NX:], phi)
    return np.concatenate([out.reshape(-1), vec[-1:]])


def rotate_sample(s: Sample, phi_deg: float, new_id: int,
                  n_nodes: int) -> Sample:
    """Image of a sample under the up-axis symmetry; labels are invariant."""
    phi = np.deg2rad(phi_deg)
    return Sample(
        id=new_id, base_id=s.base_id, angle_deg=phi_deg,
        params=rotate_params(s.params, phi),
        tight_history=[b.copy() for b in s.tight_history],
        solution=rotate_solution(s.solution, phi, n_nodes),
        converged=s.converged, iterations=s.iterations,
        wall_time=s.wall_time, split=s.split)


# -- generation -------------------------------------------------------------

def generate(n_base: int, seed: int,
             consts: ProblemConstants | None = None,
             profile: str = "desk", log=None) -> Dataset:
    """Solve n_base sampled instances and apply the 8 rotations to each
    converged one.  Failures (infeasible parameters, non-converged solves)
    are logged and dropped; generation is deterministic given the seed."""
    if consts is None:
        consts = ProblemConstants()
    cat = ConstraintCatalog(consts.N)
    samples: list[Sample] = []
    next_id = 0
    n_dropped = 0
    for base in range(n_base):
        rng = np.random.default_rng([seed, base])
        p = sample_params(rng, profile)
        try:
            inst = instance_from_params(p, consts)
            t0 = time.monotonic()
            rep = scvx(inst)
            wall = time.monotonic() - t0
        except Exception as exc:
            n_dropped += 1
            if log:
                log(f"sample {base}: dropped ({exc})")
            continue
        if not rep.converged:
            n_dropped += 1
            if log:
                log(f"sample {base}: dropped (status {rep.status})")
            continue
        history = [np.array(it.tight_bits, dtype=np.uint8)
                   for it in rep.iterates if it.accepted]
        base_sample = Sample(
            id=next_id, base_id=base, angle_deg=0.0, params=p,
            tight_history=history, solution=encode_solution(rep.solution),
            converged=True, iterations=rep.n_iterations, wall_time=wall)
        samples.append(base_sample)
        next_id += 1
        for ang in ROTATION_ANGLES_DEG[1:]:
            samples.append(rotate_sample(base_sample, ang, next_id, consts.N))
            next_id += 1
    if log:
        log(f"generated {len(samples)} samples ({n_dropped} base draws dropped)")
    return Dataset(samples=samples, catalog_digest=cat.digest())


def split_and_standardize(ds: Dataset, ratio: float = 0.8, seed: int = 0,
                          paper_split: bool = False) -> Dataset:
    """Tag samples train/test and fit standardization stats on train only.

    Default split is group-aware: all rotations of one base sample land in
    the same split, so no test instance is a rotation of a training one.
    paper_split=True splits over individual samples after augmentation.
    """
    if not ds.samples:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(seed)
    if paper_split:
        ids = np.array([s.id for s in ds.samples])
        rng.shuffle(ids)
        n_train = round(ratio * ids.size)
        train_ids = set(ids[:n_train].tolist())
        tagged = [replace(s, split="train" if s.id in train_ids else "test")
                  for s in ds.samples]
    else:
        groups = sorted({s.base_id for s in ds.samples})
        order = np.array(groups)
        rng.shuffle(order)
        n_train = round(ratio * order.size)
        train_groups = set(order[:n_train].tolist())
        tagged = [replace(s,
                          split="train" if s.base_id in train_groups else "test")
                  for s in ds.samples]
    train = [s for s in tagged if s.split == "train"]
    P = np.array([s.params for s in train])
    mean = P.mean(axis=0)
    std = P.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    return Dataset(samples=tagged, catalog_digest=ds.catalog_digest,
                   param_mean=mean, param_std=std)


# -- training exports -------------------------------------------------------

def export_solution_csv(ds: Dataset, path) -> None:
    """Rows: split, p0..p15 (raw), y0..y{17N} (flat solution).  Converged
    samples only."""
    ss = ds.converged_samples()
    width = ss[0].solution.size if ss else 0
    with open(path, "w") as fh:
        cols = (["split"] + [f"p{i}" for i in range(PARAM_WIDTH)]
                + [f"y{i}" for i in range(width)])
        fh.write(",".join(cols) + "\n")
        for s in ss:
            vals = [s.split] + [f"{v:.12g}" for v in s.params] \
                + [f"{v:.12g}" for v in s.solution]
            fh.write(",".join(vals) + "\n")


def export_constraint_csv(ds: Dataset, path) -> None:
    """Rows: split, p0..p15, k, b0..b{7N-1}; one row per sample per
    accepted iteration."""
    ss = ds.converged_samples()
    width = ss[0].tight_history[0].size if ss else 0
    with open(path, "w") as fh:
        cols = (["split"] + [f"p{i}" for i in range(PARAM_WIDTH)] + ["k"]
                + [f"b{i}" for i in range(width)])
        fh.write(",".join(cols) + "\n")
        for s in ss:
            for k, bits in enumerate(s.tight_history, start=1):
                vals = [s.split] + [f"{v:.12g}" for v in s.params] \
                    + [str(k)] + [str(int(b)) for b in bits]
                fh.write(",".join(vals) + "\n")
