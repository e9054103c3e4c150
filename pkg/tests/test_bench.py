import numpy as np
import pytest

from powered_descent.bench import (BenchReport, benchmark_predictor,
                                   make_predictor, quartile_stats,
                                   run_benchmark, zeros_baseline_accuracy)
from powered_descent.dataset import split_and_standardize
from powered_descent.tscvx import InterpPredictor, TablePredictor

from test_dataset import fake_dataset


# -- quartile statistics -----------------------------------------------------

def test_quartile_stats_pinned_example():
    s = quartile_stats([1, 2, 3, 4, 5])
    assert s["q1"] == 2.0 and s["median"] == 3.0 and s["q3"] == 4.0
    assert s["mean"] == 3.0
    assert s["min"] == 1.0 and s["max"] == 5.0
    assert s["whisker_lo"] == 1.0 and s["whisker_hi"] == 5.0
    assert np.isclose(s["std"], np.std([1, 2, 3, 4, 5], ddof=1))


def test_quartile_stats_outlier_excluded_from_whiskers():
    s = quartile_stats([1, 2, 3, 4, 100])
    # q3 = 4, iqr = 2, upper fence 7: the outlier is beyond the whisker
    assert s["whisker_hi"] == 4.0
    assert s["max"] == 100.0


def test_quartile_stats_single_value():
    s = quartile_stats([7.0])
    assert s["median"] == 7.0 and s["std"] == 0.0
    assert s["whisker_lo"] == 7.0 and s["whisker_hi"] == 7.0


def test_quartile_stats_empty_rejected():
    with pytest.raises(ValueError):
        quartile_stats([])


def test_quartile_stats_whiskers_bracket_quartiles():
    rng = np.random.default_rng(0)
    for _ in range(20):
        v = rng.normal(0, 1.0, rng.integers(2, 30))
        s = quartile_stats(v)
        assert s["whisker_lo"] <= s["q1"] <= s["median"] <= s["q3"] \
            <= s["whisker_hi"]


# -- report ------------------------------------------------------------------

def test_bench_report_round_trip():
    rep = BenchReport(predictor_rows={"kdtree": {"mse": 1.0}},
                      solver_rows={"cold": {"iters": [3]}},
                      baseline_accuracy=0.95)
    rep2 = BenchReport.from_json_dict(rep.to_json_dict())
    assert rep2.predictor_rows == rep.predictor_rows
    assert rep2.solver_rows == rep.solver_rows
    assert rep2.baseline_accuracy == 0.95


# -- baseline ----------------------------------------------------------------

def test_zeros_baseline_accuracy():
    ds = fake_dataset(n_base=2, seed=1)
    bits = np.concatenate([s.tight_history[-1] for s in ds.samples])
    assert zeros_baseline_accuracy(ds.samples) == (bits == 0).mean()


# -- predictor construction and benchmarking --------------------------------

def test_make_predictor_types():
    ds = split_and_standardize(fake_dataset(), seed=0)
    assert isinstance(make_predictor("kdtree", ds), TablePredictor)
    assert isinstance(make_predictor("interp", ds), InterpPredictor)
    with pytest.raises(ValueError):
        make_predictor("bogus", ds)
    with pytest.raises(ValueError):
        make_predictor("nn", ds)     # needs weights


def test_benchmark_predictor_row_contents():
    ds = split_and_standardize(fake_dataset(n_base=8, seed=2), ratio=0.5,
                               seed=3)
    row = benchmark_predictor("kdtree", ds)
    n_test = len(ds.by_split("test"))
    assert row["method"] == "kdtree"
    assert row["inference_ms"]["n"] == n_test
    assert len(row["raw"]["mse"]) == n_test
    assert row["mse"] == pytest.approx(np.mean(row["raw"]["mse"]))
    assert 0.0 <= row["tight_accuracy"] <= 1.0
    assert row["peak_alloc_mb"] > 0
    n_in = n_test - len(row["raw"]["ood_ids"])
    if n_in and row["raw"]["ood_ids"]:
        mses = np.array(row["raw"]["mse"])
        ood = np.array(row["raw"]["ood_ids"])
        mask = np.zeros(n_test, dtype=bool)
        mask[ood] = True
        assert row["mse_ood"] == pytest.approx(mses[mask].mean())
        assert row["mse_in_distribution"] == pytest.approx(mses[~mask].mean())


def test_benchmark_predictor_self_recall_mse_zero():
    # paper-style per-sample split: every test sample is a rotation of a
    # training one, but the kdtree queries are distinct points; instead tag
    # duplicates explicitly so the nearest neighbor is the query itself
    ds = split_and_standardize(fake_dataset(n_base=6, seed=4), ratio=0.5,
                               seed=5, paper_split=True)
    # make the test rows literal members of the training set
    from dataclasses import replace

    dup = [replace(s, split="train", id=1000 + i)
           for i, s in enumerate(ds.by_split("test"))]
    ds.samples.extend(dup)
    row = benchmark_predictor("kdtree", ds)
    assert row["mse"] == 0.0
    assert row["tight_accuracy"] == 1.0


def test_benchmark_predictor_needs_both_splits():
    ds = split_and_standardize(fake_dataset(n_base=3, seed=6), ratio=1.0,
                               seed=0)
    with pytest.raises(ValueError):
        benchmark_predictor("kdtree", ds)


def test_run_benchmark_skips_failing_methods():
    ds = split_and_standardize(fake_dataset(n_base=8, seed=7), ratio=0.5,
                               seed=0)
    warnings = []
    rep = run_benchmark(ds, ["kdtree", "nn"], warn=warnings.append)
    assert "kdtree" in rep.predictor_rows
    assert "nn" not in rep.predictor_rows
    assert len(warnings) == 1
    assert rep.baseline_accuracy is not None
