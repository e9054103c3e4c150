"""Predictor and solver benchmarks with plot-ready statistics.

Reports retain the raw per-trial arrays so every published statistic can be
recomputed from the report alone.  Timing uses the monotonic
high-resolution clock; the standard deviation is the unbiased (n-1)
estimator; the peak-memory figure is the Python allocator's high-water
mark around the prediction calls, not process RSS.
"""

from __future__ import annotations

import time
import tracemalloc
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import Dataset, Sample
from .predictors import instance_from_params, mahalanobis_split
from .scvx import scvx
from .tscvx import InterpPredictor, NNPredictor, TablePredictor, tscvx

PREDICTOR_METHODS = ("kdtree", "interp", "nn", "zeros")


def quartile_stats(values) -> dict:
    """Five-number summary plus mean/std and Tukey whiskers.

    Quartiles use linear interpolation between closest ranks, so
    {1,2,3,4,5} gives Q1=2, median=3, Q3=4.  Whiskers are the extreme data
    points within 1.5 IQR of the quartiles.
    """
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("no values")
    q1, med, q3 = np.percentile(v, [25.0, 50.0, 75.0], method="linear")
    iqr = q3 - q1
    in_lo = v[v >= q1 - 1.5 * iqr]
    in_hi = v[v <= q3 + 1.5 * iqr]
    return {
        "n": int(v.size),
        "mean": float(v.mean()),
        "median": float(med),
        "std": float(v.std(ddof=1)) if v.size > 1 else 0.0,
        "min": float(v.min()), "max": float(v.max()),
        "q1": float(q1), "q3": float(q3),
        "whisker_lo": float(min(in_lo.min(), q1)),
        "whisker_hi": float(max(in_hi.max(), q3)),
    }


@dataclass
class BenchReport:
    """Per-method benchmark rows; every row keeps its raw arrays."""

    predictor_rows: dict = field(default_factory=dict)
    solver_rows: dict = field(default_factory=dict)
    baseline_accuracy: float | None = None

    def to_json_dict(self) -> dict:
        return {
            "predictor_rows": self.predictor_rows,
            "solver_rows": self.solver_rows,
            "baseline_accuracy": self.baseline_accuracy,
        }

    @staticmethod
    def from_json_dict(d: dict) -> "BenchReport":
        return BenchReport(predictor_rows=d.get("predictor_rows", {}),
                           solver_rows=d.get("solver_rows", {}),
                           baseline_accuracy=d.get("baseline_accuracy"))


def _final_tight(s: Sample) -> np.ndarray:
    return s.tight_history[-1]


def make_predictor(name: str, ds: Dataset, weights=None):
    """Predictor over the converged training split of a tagged dataset."""
    train = [s for s in ds.by_split("train") if s.converged]
    if not train:
        train = ds.converged_samples()
    if name == "kdtree":
        return TablePredictor(
            params=np.array([s.params for s in train]),
            tight_history=[s.tight_history for s in train],
            solutions=np.array([s.solution for s in train]),
            mean=ds.param_mean, std=ds.param_std)
    if name == "interp":
        return InterpPredictor(
            params=np.array([s.params for s in train]),
            tight_history=[s.tight_history for s in train],
            solutions=np.array([s.solution for s in train]),
            mean=ds.param_mean, std=ds.param_std)
    if name == "nn":
        if weights is None:
            raise ValueError("nn method needs loaded weights")
        return NNPredictor(solution_weights=weights[0],
                           constraint_weights=weights[1])
    raise ValueError(f"unknown predictor method {name!r}")


def zeros_baseline_accuracy(samples) -> float:
    """Binary accuracy of predicting every constraint inactive."""
    bits = np.concatenate([_final_tight(s) for s in samples])
    return float((bits == 0).mean())


def benchmark_predictor(name: str, ds: Dataset, weights=None) -> dict:
    """Inference time, solution MSE (full/in-distribution/OOD), tight-set
    accuracy, and allocator peak for one method over the test split."""
    train = [s for s in ds.by_split("train") if s.converged]
    test = [s for s in ds.by_split("test") if s.converged]
    if not train or not test:
        raise ValueError("dataset needs converged train and test samples")
    pred = make_predictor(name, ds, weights=weights)

    # discard one warmup call before timing
    pred.predict_solution(test[0].params)
    pred.predict_tight(test[0].params, 1)

    times_ms, mses, accs = [], [], []
    tracemalloc.start()
    tracemalloc.reset_peak()
    for s in test:
        t0 = time.perf_counter()
        guess = pred.predict_solution(s.params)
        bits = pred.predict_tight(s.params, len(s.tight_history))
        times_ms.append(1e3 * (time.perf_counter() - t0))
        mses.append(float(np.mean((guess - s.solution) ** 2)))
        accs.append(float((np.asarray(bits) == _final_tight(s)).mean()))
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()

    std_train = (np.array([s.params for s in train]) - ds.param_mean) / ds.param_std
    std_test = (np.array([s.params for s in test]) - ds.param_mean) / ds.param_std
    in_ids, ood_ids = mahalanobis_split(std_train, std_test)
    mses = np.array(mses)
    row = {
        "method": name,
        "inference_ms": quartile_stats(times_ms),
        "mse": float(mses.mean()),
        "mse_in_distribution": (float(mses[in_ids].mean())
                                if in_ids.size else None),
        "mse_ood": float(mses[ood_ids].mean()) if ood_ids.size else None,
        "tight_accuracy": float(np.mean(accs)),
        "peak_alloc_mb": peak / 2 ** 20,
        "raw": {
            "inference_ms": list(map(float, times_ms)),
            "mse": mses.tolist(),
            "tight_accuracy": list(map(float, accs)),
            "ood_ids": ood_ids.tolist(),
        },
    }
    return row


def benchmark_solvers(ds: Dataset, n_instances: int, seed: int = 0,
                      method: str = "kdtree", weights=None) -> dict:
    """Paired cold-vs-warm solves over instances drawn from the dataset.

    The lookup predictor is built over the full dataset and the instances
    are dataset members (each query finds its own stored solve), measuring
    the oracle bound of the warm-started loop; generalization to unseen
    instances is reported by the predictor benchmark's MSE columns.
    """
    samples = ds.converged_samples()
    if not samples:
        raise ValueError("dataset has no converged samples")
    lookup = Dataset(samples=[replace(s, split="train") for s in samples],
                     catalog_digest=ds.catalog_digest,
                     param_mean=ds.param_mean, param_std=ds.param_std)
    pred = make_predictor(method, lookup, weights=weights)

    rng = np.random.default_rng(seed)
    pick = rng.choice(len(samples), min(n_instances, len(samples)),
                      replace=False)
    rows = {"cold": {"iters": [], "time_s": [], "status": []},
            "warm": {"iters": [], "time_s": [], "status": []}}
    for j in pick:
        inst = instance_from_params(samples[j].params)
        t0 = time.monotonic()
        rw = tscvx(inst, pred)
        tw = time.monotonic() - t0
        t0 = time.monotonic()
        rc = scvx(inst)
        tc = time.monotonic() - t0
        rows["warm"]["iters"].append(rw.n_iterations)
        rows["warm"]["time_s"].append(tw)
        rows["warm"]["status"].append(rw.status)
        rows["cold"]["iters"].append(rc.n_iterations)
        rows["cold"]["time_s"].append(tc)
        rows["cold"]["status"].append(rc.status)
    for tag in ("cold", "warm"):
        rows[tag]["time_stats"] = quartile_stats(rows[tag]["time_s"])
        rows[tag]["iter_stats"] = quartile_stats(rows[tag]["iters"])
    rows["instances"] = [int(samples[j].id) for j in pick]
    return rows


def run_benchmark(ds: Dataset, methods, weights=None,
                  solver_instances: int = 0, seed: int = 0,
                  warn=None) -> BenchReport:
    report = BenchReport()
    test = [s for s in ds.by_split("test") if s.converged]
    if test:
        report.baseline_accuracy = zeros_baseline_accuracy(test)
    for name in methods:
        if name == "zeros":
            continue
        try:
            report.predictor_rows[name] = benchmark_predictor(
                name, ds, weights=weights)
        except ValueError as exc:
            if warn:
                warn(f"method {name} skipped: {exc}")
    if solver_instances > 0:
        report.solver_rows = benchmark_solvers(
            ds, solver_instances, seed=seed,
            method="kdtree" if "kdtree" in methods else methods[0],
            weights=weights)
    return report
