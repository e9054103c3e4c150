import numpy as np
import pytest

from powered_descent.conic import SOC, NonNeg, Zero
from powered_descent.discretization import (Trajectory, defect, discretize,
                                            propagate_segments)
from powered_descent.problem import (I_M, NU, NX, ConstraintCatalog,
                                     boundary_conditions, cost,
                                     evaluate_catalog, nominal_instance)
from powered_descent.scvx import (PenaltyConfig, ScvxReport, TrustRegion,
                                  assemble_subproblem, binding_diagnostic,
                                  boundary_violation, initial_guess,
                                  penalty_cost, scvx, tight_bits,
                                  update_radius)


@pytest.fixture(scope="module")
def nominal():
    return nominal_instance()


@pytest.fixture(scope="module")
def guess(nominal):
    return initial_guess(nominal)


# -- penalty: brute-force oracle --------------------------------------------

def penalty_oracle(traj, inst, cfg):
    """Independent recomputation of the exact penalty with explicit loops."""
    c = inst.constants
    total = -traj.states[-1, I_M]
    prop = propagate_segments(traj, c)
    for i in range(traj.n_nodes - 1):
        total += cfg.lam_dyn * np.abs(traj.states[i + 1] - prop[i]).sum()
    for bc in boundary_conditions(inst):
        total += cfg.lam_dyn * abs(
            traj.states[bc.node - 1, bc.state_index] - bc.value)
    res = evaluate_catalog(traj, inst)
    cat = ConstraintCatalog(traj.n_nodes)
    for idx, row in enumerate(cat.rows):
        viol = max(res[idx], 0.0)
        total += (cfg.tau_cvx if row.convex else cfg.lam_ncvx) * viol
    return total


def test_penalty_cost_matches_brute_force(nominal, guess):
    cfg = PenaltyConfig(lam=500.0)
    assert np.isclose(penalty_cost(guess, nominal, cfg),
                      penalty_oracle(guess, nominal, cfg), rtol=1e-12)


def test_penalty_cost_distinct_weights(nominal, guess):
    cfg = PenaltyConfig(lam=500.0, lam_dyn=7.0, lam_ncvx=11.0, tau_cvx=13.0)
    assert np.isclose(penalty_cost(guess, nominal, cfg),
                      penalty_oracle(guess, nominal, cfg), rtol=1e-12)


def test_penalty_config_validation():
    with pytest.raises(ValueError):
        PenaltyConfig(lam=500.0, lam_dyn=0.0)
    with pytest.raises(ValueError):
        PenaltyConfig(lam=500.0, tau_cvx=-1.0)
    cfg = PenaltyConfig(lam=5.0)
    assert cfg.lam_dyn == cfg.lam_ncvx == cfg.tau_cvx == 5.0


def test_boundary_violation(nominal, guess):
    # the straight-line guess meets every pinned row except the free
    # initial attitude (not a boundary row), so the violation is zero
    assert boundary_violation(guess, nominal) == 0.0
    bumped = guess.copy()
    bumped.states[0, I_M] += 0.25
    bumped.states[-1, 2] -= 0.5
    assert np.isclose(boundary_violation(bumped, nominal), 0.75)


# -- trust region ------------------------------------------------------------

def test_update_radius_three_cases():
    tr = TrustRegion(radius=1.0, alpha=2.0, beta=2.0, r_l=0.001, r_u=10.0)
    assert update_radius(1.0, -0.5, 0.1, 0.7, tr) == 0.5     # reject/shrink
    assert update_radius(1.0, 0.4, 0.1, 0.7, tr) == 1.0      # keep
    assert update_radius(1.0, 0.9, 0.1, 0.7, tr) == 2.0      # grow


def test_update_radius_tau_r_modulation():
    tr = TrustRegion(radius=1.0, alpha=2.0, beta=2.0, r_l=0.001, r_u=10.0)
    # tau_r = 0: no shrink on low rho, full growth on high rho
    assert update_radius(1.0, -0.5, 0.1, 0.7, tr, tau_r=0.0) == 1.0
    assert update_radius(1.0, 0.9, 0.1, 0.7, tr, tau_r=0.0) == 2.0
    # tau_r = 1: full shrink, no growth
    assert update_radius(1.0, -0.5, 0.1, 0.7, tr, tau_r=1.0) == 0.5
    assert update_radius(1.0, 0.9, 0.1, 0.7, tr, tau_r=1.0) == 1.0
    # fractional exponents
    assert np.isclose(update_radius(1.0, -0.5, 0.1, 0.7, tr, tau_r=0.5),
                      1.0 / 2.0 ** 0.5)
    assert np.isclose(update_radius(1.0, 0.9, 0.1, 0.7, tr, tau_r=0.5),
                      2.0 ** 0.5)


def test_update_radius_clamps():
    tr = TrustRegion(radius=1.0, alpha=2.0, beta=2.0, r_l=0.5, r_u=1.5)
    assert update_radius(0.6, -1.0, 0.1, 0.7, tr) == 0.5
    assert update_radius(1.0, 0.9, 0.1, 0.7, tr) == 1.5


def test_update_radius_tau_r_validation():
    tr = TrustRegion()
    with pytest.raises(ValueError):
        update_radius(1.0, 0.5, 0.1, 0.7, tr, tau_r=1.5)


def test_trust_region_validation():
    with pytest.raises(ValueError):
        TrustRegion(radius=20.0)
    with pytest.raises(ValueError):
        TrustRegion(alpha=1.0)


# -- initial guess -----------------------------------------------------------

def test_initial_guess_structure(nominal, guess):
    c = nominal.constants
    assert guess.n_nodes == c.N
    assert guess.sigma == c.t_f_max / 2.0
    assert boundary_violation(guess, nominal) == 0.0
    Tn = np.linalg.norm(guess.controls, axis=1)
    assert np.all(Tn >= c.T_min - 1e-12) and np.all(Tn <= c.T_max + 1e-12)
    m = guess.states[:, I_M]
    assert np.isclose(m[0], nominal.x0.m) and np.isclose(m[-1], c.m_dry)
    assert np.all(np.diff(m) < 0)


# -- subproblem assembly -----------------------------------------------------

def test_assembly_dimensions(nominal, guess):
    c = nominal.constants
    segs = discretize(guess, c)
    cfg = PenaltyConfig(lam=c.lam)
    prog, meta = assemble_subproblem(guess, segs, None, 2.0, nominal, cfg)
    n, n_seg = c.N, c.N - 1
    assert meta.n_vars == NX * n + NU * n + 1 + 2 * NX * n_seg + n
    assert prog.n_vars == meta.n_vars
    zero_rows = sum(k.dim for k in prog.cones if isinstance(k, Zero))
    assert zero_rows == NX * n_seg + len(boundary_conditions(nominal))
    nonneg = sum(k.dim for k in prog.cones if isinstance(k, NonNeg))
    # |v| <= t pairs, s' >= 0, mass-lb, thrust-lb, dsigma box, sigma bounds
    assert nonneg == 2 * NX * n_seg + n + n + n + 4
    socs = [k.dim for k in prog.cones if isinstance(k, SOC)]
    # per node: glideslope 3, tilt 3, omega 4, thrust-ub 4, gimbal 4;
    # plus the two trust-region cones
    assert sorted(socs)[-2:] == [1 + NU * n, 1 + NX * n]
    assert len(socs) == 5 * n + 2


def test_assembly_objective(nominal, guess):
    c = nominal.constants
    segs = discretize(guess, c)
    cfg = PenaltyConfig(lam=c.lam)
    prog, meta = assemble_subproblem(guess, segs, None, 2.0, nominal, cfg)
    assert prog.c[meta.off_d + NX * (c.N - 1) + I_M] == -1.0
    assert np.all(prog.c[meta.off_t:meta.off_t + NX * (c.N - 1)] == c.lam)
    assert np.all(prog.c[meta.off_sp:meta.off_sp + c.N] == c.lam)
    assert meta.ref_cost == cost(guess)


def test_assembly_dynamics_rhs_is_discretization_residual(nominal, guess):
    # at z = 0 the dynamics rows read h = x_disc(ref) - x_ref, i.e. the
    # per-segment discretized defect of the reference
    c = nominal.constants
    segs = discretize(guess, c)
    cfg = PenaltyConfig(lam=c.lam)
    prog, _ = assemble_subproblem(guess, segs, None, 2.0, nominal, cfg)
    n_seg = c.N - 1
    rhs = prog.h[:NX * n_seg].reshape(n_seg, NX)
    for i, seg in enumerate(segs):
        expected = seg.endpoint(guess.states[i], guess.controls[i],
                                guess.controls[i + 1], guess.sigma) \
            - guess.states[i + 1]
        assert np.allclose(rhs[i], expected)


def test_assembly_reduced_keeps_safety_rows(nominal, guess):
    c = nominal.constants
    segs = discretize(guess, c)
    cfg = PenaltyConfig(lam=c.lam)
    cat = ConstraintCatalog(c.N)
    tight = np.zeros(cat.width, dtype=np.uint8)
    tight[cat.index("glideslope", 7)] = 1
    prog, meta = assemble_subproblem(guess, segs, tight, 2.0, nominal, cfg)
    kept_idx = set(meta.catalog_row_ranges)
    assert cat.index("glideslope", 7) in kept_idx
    for node in range(1, c.N + 1):
        assert cat.index("mass-lb", node) in kept_idx   # safety set
        assert cat.index("tilt", node) not in kept_idx
    assert meta.kept.sum() == c.N + 1
    full, _ = assemble_subproblem(guess, segs, None, 2.0, nominal, cfg)
    assert prog.n_rows < full.n_rows


def test_assembly_rejects_wrong_tight_width(nominal, guess):
    from powered_descent.scvx import InconsistentCatalog

    c = nominal.constants
    segs = discretize(guess, c)
    with pytest.raises(InconsistentCatalog):
        assemble_subproblem(guess, segs, np.zeros(5), 2.0, nominal,
                            PenaltyConfig())


# -- tight bits --------------------------------------------------------------

def test_tight_bits_rule(nominal, guess):
    bits = tight_bits(guess, nominal)
    res = evaluate_catalog(guess, nominal)
    tol = nominal.constants.activation_tol
    assert np.array_equal(bits, (res >= -tol).astype(np.uint8))


# -- full solve (shares the session solve via conftest) ----------------------

def test_nominal_converges(nominal_report, nominal):
    c = nominal.constants
    assert nominal_report.converged
    assert nominal_report.n_iterations <= c.iter_max
    sol = nominal_report.solution
    assert defect(sol, c).max() <= c.feas_tol
    assert evaluate_catalog(sol, nominal).max() <= c.feas_tol
    assert boundary_violation(sol, nominal) <= c.feas_tol


def test_accepted_penalty_non_increasing(nominal_report):
    J = [it.J for it in nominal_report.iterates if it.accepted]
    assert all(J[i + 1] <= J[i] + 1e-9 for i in range(len(J) - 1))


def test_radius_stays_clamped(nominal_report, nominal):
    c = nominal.constants
    for it in nominal_report.iterates:
        assert c.eta_lb - 1e-12 <= it.radius <= c.eta_ub + 1e-12


def test_full_solve_records_are_unreduced(nominal_report):
    for it in nominal_report.iterates:
        assert not it.reduced
        assert it.tau_r is None


def test_report_json_round_trip(nominal_report):
    rep2 = ScvxReport.from_json(nominal_report.to_json())
    assert rep2.status == nominal_report.status
    assert rep2.n_iterations == nominal_report.n_iterations
    assert np.allclose(rep2.solution.states, nominal_report.solution.states)
    assert rep2.iterates[-1].as_dict() == nominal_report.iterates[-1].as_dict()


def test_binding_diagnostic(nominal_report, nominal):
    count, enough = binding_diagnostic(nominal_report, nominal)
    res = evaluate_catalog(nominal_report.solution, nominal)
    tol = nominal.constants.activation_tol
    expected = int((np.abs(res) <= tol).sum()) + 23
    assert count == expected
    assert enough == (count >= NU * (nominal.constants.N - 1))


def test_binding_diagnostic_needs_convergence(nominal):
    from powered_descent.scvx import NotConverged

    bad = ScvxReport("Diverged", initial_guess(nominal), [])
    with pytest.raises(NotConverged):
        binding_diagnostic(bad, nominal)


def test_scvx_rejects_wrong_node_count(nominal, guess):
    small = Trajectory(guess.states[:10], guess.controls[:10], guess.sigma)
    with pytest.raises(ValueError):
        scvx(nominal, init=small)
