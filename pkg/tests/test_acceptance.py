"""Acceptance gate.

One test per acceptance criterion; each prints a single ``[PRIMARY]`` (or
``[SECONDARY]``) pass/fail line before asserting, so the verdicts can be
read off the ``pytest -v`` output directly.
"""

import json
import time

import numpy as np
import pytest

from powered_descent.bench import benchmark_predictor, benchmark_solvers
from powered_descent.conic import SolveStatus, solve
from powered_descent.dataset import (ROTATION_ANGLES_DEG, rotate_params,
                                     rotate_solution)
from powered_descent.discretization import defect
from powered_descent.dynamics import jacobians_batch
from powered_descent.predictors import (KDTree, decode_solution,
                                        instance_from_params,
                                        mahalanobis_distances,
                                        mahalanobis_split, nn_predict_tight)
from powered_descent.problem import (ProblemConstants, cost, evaluate_catalog,
                                     nominal_instance)
from powered_descent.scvx import TrustRegion, scvx, tight_bits, update_radius
from powered_descent.transformer import load_weights, softmax

from test_conic import random_feasible_socp, scs_objective
from test_dynamics import fd_jacobians


def _verdict(name: str, ok: bool, detail: str, tag: str = "PRIMARY") -> None:
    print(f"\n[{tag}] {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"{name}: {detail}"


def test_jacobian_finite_difference():
    c = ProblemConstants()
    rng = np.random.default_rng(0)
    t0 = time.monotonic()
    worst = 0.0
    for _ in range(100):
        x = np.empty(14)
        x[0] = rng.uniform(1.5, 5.0)                       # mass
        x[1:4] = rng.normal(0.0, 3.0, 3)                   # position
        x[4:7] = rng.normal(0.0, 1.0, 3)                   # velocity
        q = rng.normal(0.0, 1.0, 4)
        x[7:11] = q / np.linalg.norm(q)                    # attitude
        x[11:14] = rng.normal(0.0, 0.5, 3)                 # body rate
        u = rng.uniform(-3.0, 3.0, 3)
        if np.linalg.norm(u) < 0.5:
            u = np.array([1.5, 0.0, 0.0])
        A, B = jacobians_batch(x[None, :], u[None, :], c)
        A_fd, B_fd = fd_jacobians(x, u, c)
        scale_a = max(1.0, np.abs(A[0]).max())
        scale_b = max(1.0, np.abs(B[0]).max())
        worst = max(worst,
                    np.abs(A[0] - A_fd).max() / scale_a,
                    np.abs(B[0] - B_fd).max() / scale_b)
    elapsed = time.monotonic() - t0
    _verdict("jacobian-finite-difference",
             worst < 1e-5 and elapsed < 5.0,
             f"max rel err {worst:.2e}, {elapsed:.2f}s over 100 points")


def test_conic_solver_against_first_order_oracle():
    rng = np.random.default_rng(7)
    t0 = time.monotonic()
    worst_gap, worst_diff = 0.0, 0.0
    for _ in range(50):
        prog = random_feasible_socp(rng, n_max=30)
        sol = solve(prog, tol=1e-9)
        assert sol.status == SolveStatus.OPTIMAL
        ref = scs_objective(prog)
        worst_gap = max(worst_gap, sol.gap)
        worst_diff = max(worst_diff,
                         abs(sol.objective - ref) / max(1.0, abs(ref)))
    elapsed = time.monotonic() - t0
    _verdict("conic-solver-oracle",
             worst_gap < 1e-6 and worst_diff < 1e-5 and elapsed < 30.0,
             f"max gap {worst_gap:.2e}, max objective diff {worst_diff:.2e}, "
             f"{elapsed:.2f}s over 50 programs")


def test_scvx_nominal_convergence():
    inst = nominal_instance()
    c = inst.constants
    t0 = time.monotonic()
    rep = scvx(inst)
    elapsed = time.monotonic() - t0
    accepted = [it for it in rep.iterates if it.accepted]
    J = [it.J for it in accepted]
    monotone = all(b <= a + 1e-9 for a, b in zip(J, J[1:]))
    d_final = float(defect(rep.solution, c).max())
    res_final = float(evaluate_catalog(rep.solution, inst).max())
    ok = (rep.converged and rep.n_iterations <= c.iter_max
          and all(it.defect_max <= c.feas_tol for it in accepted)
          and d_final <= 1e-3 and res_final <= 1e-3
          and monotone and elapsed < 60.0)
    _verdict("scvx-nominal-convergence", ok,
             f"status {rep.status} in {rep.n_iterations} iters, "
             f"final defect {d_final:.2e}, final residual {res_final:.2e}, "
             f"accepted-J monotone {monotone}, {elapsed:.1f}s")


def test_trust_region_update_table():
    tr = TrustRegion(radius=1.0, alpha=2.0, beta=2.0, r_l=0.001, r_u=10.0)
    rho1, rho2 = 0.1, 0.7
    failures = []
    for rho in (-0.2, 0.05, 0.4, 0.8):
        for tau in (0.0, 0.5, 1.0):
            if rho < rho1:
                want = 1.0 / 2.0 ** tau
            elif rho < rho2:
                want = 1.0
            else:
                want = 1.0 * 2.0 ** (1.0 - tau)
            want = min(max(want, tr.r_l), tr.r_u)
            got = update_radius(1.0, rho, rho1, rho2, tr, tau_r=tau)
            if got != want:
                failures.append((rho, tau, got, want))
    _verdict("trust-region-update-table", not failures,
             f"12/12 hand-computed radii exact" if not failures
             else f"mismatches: {failures}")


def test_rotation_invariance(desk_dataset):
    bases = sorted((s for s in desk_dataset.samples
                    if s.angle_deg == 0.0 and s.converged),
                   key=lambda s: s.iterations)[:5]
    assert len(bases) == 5
    # each rotated instance is re-solved from its rotated stored solution:
    # the solver must accept the rotated optimum as a fixed point, which is
    # the symmetry claim.  Cold starts on these multi-modal instances can
    # land in different local basins, which tests basin selection rather
    # than rotational symmetry.
    t0 = time.monotonic()
    n_rows_checked, mismatches, worst_cost = 0, 0, 0.0
    for s in bases:
        ref_bits = ref_margin = ref_cost = None
        for ang in ROTATION_ANGLES_DEG:
            phi = np.deg2rad(ang)
            inst = instance_from_params(rotate_params(s.params, phi))
            init = decode_solution(rotate_solution(s.solution, phi, 50), inst)
            rep = scvx(inst, init=init)
            assert rep.converged, f"base {s.base_id} at {ang} deg"
            res = evaluate_catalog(rep.solution, inst)
            bits = tight_bits(rep.solution, inst)
            margin = np.abs(res + inst.constants.activation_tol)
            cost_val = cost(rep.solution)
            if ref_bits is None:
                ref_bits, ref_margin, ref_cost = bits, margin, cost_val
                continue
            mask = (margin > 1e-3) & (ref_margin > 1e-3)
            n_rows_checked += int(mask.sum())
            mismatches += int((bits[mask] != ref_bits[mask]).sum())
            worst_cost = max(worst_cost,
                             abs(cost_val - ref_cost) / abs(ref_cost))
    elapsed = time.monotonic() - t0
    ok = mismatches == 0 and worst_cost < 1e-3 and elapsed < 600.0
    _verdict("rotation-invariance", ok,
             f"{mismatches} tight-set mismatches over {n_rows_checked} "
             f"clearly-signed rows (5 instances x 8 angles), "
             f"max relative cost diff {worst_cost:.2e}, {elapsed:.0f}s")


def test_warm_start_effectiveness(desk_dataset):
    assert len(desk_dataset.samples) >= 200
    rows = benchmark_solvers(desk_dataset, 20, seed=0)
    n = len(rows["instances"])
    # every warm-started run must converge; cold runs may hit the iteration
    # cap (counting the cap only understates the cold mean, which keeps the
    # comparison conservative)
    warm_ok = all(st == "Converged" for st in rows["warm"]["status"])
    cold_it = np.mean(rows["cold"]["iters"])
    warm_it = np.mean(rows["warm"]["iters"])
    cold_t = np.mean(rows["cold"]["time_s"])
    warm_t = np.mean(rows["warm"]["time_s"])
    ok = n >= 20 and warm_ok and warm_it <= cold_it and warm_t < cold_t
    _verdict("warm-start-effectiveness", ok,
             f"{n} instances, mean iters warm {warm_it:.2f} vs cold "
             f"{cold_it:.2f}, mean time warm {warm_t:.2f}s vs cold "
             f"{cold_t:.2f}s ({100 * (1 - warm_t / cold_t):.0f}% reduction)")


def test_kdtree_against_linear_scan():
    rng = np.random.default_rng(11)
    pts = rng.normal(0.0, 1.0, (300, 16))
    tree = KDTree(pts)
    mism = 0
    for _ in range(500):
        x = rng.normal(0.0, 1.4, 16)
        i, d = tree.query(x)
        dist = np.linalg.norm(pts - x, axis=1)
        j = int(np.lexsort((np.arange(len(dist)), dist))[0])
        if i != j or not np.isclose(d, dist[j]):
            mism += 1
    recall_mse = 0.0
    for i in range(len(pts)):
        j, _ = tree.query(pts[i])
        recall_mse += float(np.mean((pts[j] - pts[i]) ** 2))
    recall_mse /= len(pts)
    _verdict("kdtree-linear-scan",
             mism == 0 and recall_mse == 0.0,
             f"{mism}/500 query mismatches, self-recall MSE {recall_mse}")


def test_attention_and_forward_parity(data_dir):
    rng = np.random.default_rng(13)
    sums_err = 0.0
    for _ in range(20):
        M = rng.normal(0.0, 5.0, (rng.integers(1, 6), rng.integers(1, 9)))
        sums_err = max(sums_err,
                       float(np.abs(softmax(M, axis=-1).sum(axis=-1) - 1.0).max()))
    w = load_weights(data_dir / "constraint_net.tscx")
    fixtures = json.loads((data_dir / "constraint_fixtures.json").read_text())
    worst = 0.0
    for fx in fixtures:
        got = w.forward(np.array(fx["input"], dtype=float))
        worst = max(worst, float(np.abs(got - np.array(fx["logits"])).max()))
    ok = sums_err < 1e-9 and len(fixtures) >= 10 and worst < 1e-4
    _verdict("attention-forward-parity", ok,
             f"softmax row-sum err {sums_err:.1e}, {len(fixtures)} parity "
             f"fixtures max |err| {worst:.2e}")


def test_mahalanobis_split_rate():
    rng = np.random.default_rng(17)
    train = rng.normal(0.0, 1.0, (100, 6))
    in_ids, ood_ids = mahalanobis_split(train, train)
    mean = train.mean(axis=0)
    cov = np.cov(train, rowvar=False) + 1e-8 * np.eye(6)
    d = mahalanobis_distances(train, mean, np.linalg.inv(cov))
    thr = np.percentile(np.sort(d), 95.0, method="linear")
    oracle_ood = set(np.flatnonzero(d > thr))
    flagged = len(ood_ids)
    ok = abs(flagged - 5) <= 1 and set(ood_ids) == oracle_ood \
        and len(in_ids) + flagged == 100
    _verdict("mahalanobis-split", ok,
             f"flagged {flagged}/100 (target 5 +- 1), sort-oracle match "
             f"{set(ood_ids) == oracle_ood}")


def test_baseline_sanity(desk_dataset, data_dir):
    w = load_weights(data_dir / "constraint_net.tscx")
    total = agree = zeros = 0
    for s in desk_dataset.by_split("test"):
        if not s.converged:
            continue
        for k, bits in enumerate(s.tight_history, start=1):
            pred = nn_predict_tight(w, s.params, k).bits
            total += bits.size
            agree += int((np.asarray(pred) == bits).sum())
            zeros += int((bits == 0).sum())
    baseline = zeros / total
    acc = agree / total
    ok = 0.90 <= baseline <= 0.99 and acc > baseline
    _verdict("baseline-sanity", ok,
             f"all-zeros baseline {baseline:.4f} in [0.90, 0.99], "
             f"trained predictor {acc:.4f}")


def test_trainer_end_to_end(desk_dataset, tmp_path):
    pytest.importorskip("torch")
    trainer = pytest.importorskip("pdg_trainer.train")
    from powered_descent.cli import main as cli_main
    from powered_descent.dataset import (export_constraint_csv,
                                         export_solution_csv)
    from powered_descent.predictors import nn_predict_solution

    con_csv = tmp_path / "constraint.csv"
    sol_csv = tmp_path / "solution.csv"
    export_constraint_csv(desk_dataset, con_csv)
    export_solution_csv(desk_dataset, sol_csv)

    con_w = tmp_path / "constraint.tscx"
    cfg = trainer.TrainConfig(kind="constraint", epochs=300, folds=3,
                              warmup_steps=200, embed=64, peak_lr=2e-3,
                              seed=0)
    _, _, con_metrics = trainer.train(con_csv, cfg, con_w)

    sol_w = tmp_path / "solution.tscx"
    cfg = trainer.TrainConfig(kind="solution", epochs=400, folds=3,
                              warmup_steps=100, embed=64, peak_lr=2e-3,
                              seed=0)
    trainer.train(sol_csv, cfg, sol_w)

    test = [s for s in desk_dataset.by_split("test") if s.converged]
    wsol = load_weights(sol_w)
    nn_mse = float(np.mean([np.mean((nn_predict_solution(wsol, s.params)
                                     - s.solution) ** 2) for s in test]))
    kd_mse = benchmark_predictor("kdtree", desk_dataset)["mse"]

    verify_ok = (cli_main(["verify-weights", str(con_w)]) == 0
                 and cli_main(["verify-weights", str(sol_w)]) == 0)

    acc = con_metrics["held_out"]["binary_accuracy"]
    base = con_metrics["held_out"]["baseline_zeros_accuracy"]
    ok = acc >= base and nn_mse <= 2.0 * kd_mse and verify_ok
    _verdict("trainer-end-to-end", ok,
             f"constraint acc {acc:.4f} vs zeros baseline {base:.4f}, "
             f"solution MSE {nn_mse:.4f} vs 2x kdtree {2 * kd_mse:.4f}, "
             f"verify-weights clean {verify_ok}", tag="SECONDARY")
