import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from qicsep.spectra import (SQRT8, CheckReport, alpha_extended, claim_alpha_check,
                            claim_approx_check, critical_mu, cycle_adjacency, eigen_gap_check,
                            gap_equation_grid, gap_equation_scan, gap_equation_sides,
                            layer_project, odd_cycle_checks, odd_cycle_solution,
                            ratio_bounds_check, recurrence_closed_form, top_layered_eigenvector)
from qicsep.welded_trees import expand_solution, generate_instance, layered_solve, make_params


# --- eigenvalue gap ------------------------------------------------------------

@pytest.mark.parametrize("n", [1, 2, 3, 4, 5, 6])
def test_gap_and_lambda1(n):
    for seed in range(20 if n <= 4 else 5):
        rep = eigen_gap_check(generate_instance(n, seed))
        assert rep.passed, (n, seed, rep.gap_violations)
        assert rep.eigenvalues.max() <= 3 + 1e-9 and rep.eigenvalues.min() >= -3 - 1e-9
        assert rep.lambda1 >= 3 - 2 / (2 ** (n + 2) - 2)


def test_gap_check_refuses_large_n():
    with pytest.raises(ValueError):
        eigen_gap_check(generate_instance(10, 0))


def test_gap_report_json():
    doc = eigen_gap_check(generate_instance(2, 0), tol=1e-9).to_json(seed=0)
    assert doc["tolerance"] == 1e-9 and doc["pass"] and doc["seed"] == 0


def test_critical_lambda_matches_top_eigenvalue():
    # the draft's critical point reproduces lambda_1 of the glued trees
    for n in (3, 5, 7):
        lam1 = eigen_gap_check(generate_instance(n, 0)).lambda1
        assert 3 - critical_mu(n) == pytest.approx(lam1, abs=1e-9)


# --- layer projection --------------------------------------------------------------

def test_layer_project_fixed_points():
    inst = generate_instance(3, 0)
    v = layered_solve(make_params(3)).phi[inst.level - 1]
    assert np.array_equal(layer_project(v, inst), v)
    assert np.array_equal(layer_project(np.zeros(inst.num_nodes), inst), np.zeros(inst.num_nodes))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000))
def test_layer_project_idempotent(seed):
    inst = generate_instance(3, seed % 7)
    v = np.random.default_rng(seed).standard_normal(inst.num_nodes)
    w = layer_project(v, inst)
    assert np.array_equal(layer_project(w, inst), w)


def test_projected_top_eigenvector():
    inst = generate_instance(3, 1)
    lam1, v = top_layered_eigenvector(inst)
    w = layer_project(v, inst)
    a = inst.adjacency_matrix().toarray()
    assert np.linalg.norm(a @ w - lam1 * w) <= 1e-8 * np.linalg.norm(w)


# --- recurrences -----------------------------------------------------------------

def test_vieta_and_displayed_roots():
    lam = SQRT8 + 0.01
    sol = recurrence_closed_form(-2, lam, -1, 1.0, 0.5)
    assert sol.r_plus * sol.r_minus == pytest.approx(0.5, rel=1e-14)
    d = math.sqrt(lam * lam - 8)
    assert sorted([sol.r_plus, sol.r_minus]) == pytest.approx([(lam - d) / 4, (lam + d) / 4],
                                                              rel=1e-14)


_root = st.floats(0.1, 1.9).flatmap(lambda m: st.sampled_from([m, -m]))


@settings(max_examples=60, deadline=None)
@given(st.floats(0.3, 3), _root, _root, st.floats(-2, 2), st.floats(-2, 2))
def test_closed_form_matches_iteration(a, r1, r2, phi1, phi2):
    # build (a, b, c) from two well-separated real roots
    assume(abs(r1 - r2) > 0.05)
    b, c = -a * (r1 + r2), a * r1 * r2
    sol = recurrence_closed_form(a, b, c, phi1, phi2)
    it = sol.iterate(phi1, phi2, 28)
    cf = np.array([sol(i) for i in range(1, 31)])
    scale = max(1.0, np.abs(it).max())
    assert np.abs(cf - it).max() <= 1e-10 * scale
    seed_scale = max(abs(phi1), abs(phi2))
    assert abs(sol(1) - phi1) <= 1e-14 * seed_scale
    assert abs(sol(2) - phi2) <= 1e-14 * seed_scale


def test_recurrence_rejects_complex_roots():
    with pytest.raises(ValueError):
        recurrence_closed_form(1, 1, 1, 0, 1)
    with pytest.raises(ValueError):
        recurrence_closed_form(1, 3, 0, 0, 1)


# --- claims ---------------------------------------------------------------------

def test_claim_approx_n8():
    rep = claim_approx_check(8, 1 / (16 * 10) ** 2)
    assert rep.passed, rep.failures()
    assert rep.slacks["delta.lower"] >= 0


@pytest.mark.parametrize("n", [2, 5, 20, 64])
def test_claim_approx_at_boundary_gamma(n):
    rep = claim_approx_check(n)
    assert rep.details["precondition_slack"] == pytest.approx(0, abs=1e-9)
    assert rep.passed, rep.failures()
    assert claim_approx_check(n, precision="extended").passed


def test_claim_preconditions_enforced():
    with pytest.raises(ValueError):
        claim_approx_check(8, 1 / 64)


@pytest.mark.parametrize("n", [5, 10, 30])
def test_claim_alpha_holds_for_larger_n(n):
    rep = claim_alpha_check(n)
    assert rep.passed, rep.failures()
    assert rep.details["quantity"] < -1
    ext = claim_alpha_check(n, precision="extended")
    assert ext.passed
    assert ext.details["quantity"] == pytest.approx(rep.details["quantity"], rel=1e-9)


@pytest.mark.parametrize("n", [2, 3, 4])
def test_claim_alpha_lower_bound_fails_for_small_n(n):
    # measured in 40-digit arithmetic; the stated lower bound is violated here
    rep = claim_alpha_check(n, precision="extended")
    assert rep.slacks["sandwich.lower"] < 0
    assert rep.slacks["sandwich.upper"] >= 0
    assert rep.slacks["below_minus_one"] > 0


def test_alpha_extended_matches_double():
    for n in (3, 9):
        alpha, alpha_p, _ = alpha_extended(n)
        sol = layered_solve(make_params(n))
        assert float(alpha) == pytest.approx(sol.alpha, rel=1e-9)
        assert float(alpha_p) == pytest.approx(sol.alpha_prime, rel=1e-9)


@pytest.mark.parametrize("n", range(2, 11))
def test_ratio_bounds(n):
    rep = ratio_bounds_check(layered_solve(make_params(n)))
    assert rep.passed, rep.failures()


def test_ratio_bounds_boundary_index():
    n = 5
    sol = layered_solve(make_params(n))
    # i = n+2 maps level 2n+3-i = n+1 onto itself
    assert sol.phi[(2 * n + 3 - (n + 2)) - 1] / sol.phi[n] == 1.0


def test_norm_chain_bounded():
    vals = [ratio_bounds_check(layered_solve(make_params(n))).details["norm_over_n5_root"]
            for n in range(4, 11)]
    assert max(vals) / min(vals) < 10


def test_check_report_worst():
    rep = CheckReport("x", 1, tolerance=0.1)
    rep.le("a", 1.0, 2.0)
    rep.le("b", np.array([1.0, 3.0]), 2.95)
    assert rep.worst == "b" and rep.worst_slack == pytest.approx(-0.05)
    assert rep.passed
    rep.le("a", 5.0, 2.0)
    assert not rep.passed and set(rep.failures()) == {"a"}


# --- gap equation ------------------------------------------------------------------

def test_sides_tend_to_one():
    lhs, rhs = gap_equation_sides(np.array([SQRT8 + 1e-14]), 10)
    assert lhs[0] == pytest.approx(1, abs=1e-5) and rhs[0] == pytest.approx(1, abs=1e-5)


def test_grid_shape():
    g = gap_equation_grid(2.0 ** -10)
    assert g.size == 10_000
    assert g.min() > SQRT8 and g.max() == 3 - 2.0 ** -10
    assert np.all(np.diff(g) >= 0)


def test_no_root_at_n10():
    rep = gap_equation_scan(10)
    assert rep.passed and rep.slacks["lhs>rhs"] > 0
    assert rep.details["sign_changes"] == 0


def test_lhs_exceeds_rhs_near_sqrt8():
    lhs, rhs = gap_equation_sides(np.array([SQRT8 + 1e-4]), 10)
    assert lhs[0] - rhs[0] > 0


def test_scan_finds_root_beyond_critical_mu():
    n = 8
    cm = critical_mu(n)
    assert cm < 2.0 ** -n
    assert not gap_equation_scan(n, mu=cm / 4).passed


# --- odd cycles ------------------------------------------------------------------

def test_triangle():
    a = cycle_adjacency(3)
    assert sorted(np.linalg.eigvalsh(a).round(12).tolist()) == [-1, -1, 2]
    assert np.linalg.norm(a) == pytest.approx(math.sqrt(6), rel=1e-15)
    np.testing.assert_allclose(odd_cycle_solution(3, 0), [-0.5, 0.5, 0.5])


@pytest.mark.parametrize("n", range(3, 16, 2))
def test_odd_cycle_suite(n):
    rep = odd_cycle_checks(n)
    assert rep.passed, rep.failures()
    assert rep.details["rank"] == n


def test_even_cycle_rejected():
    with pytest.raises(ValueError):
        odd_cycle_checks(4)


def test_non_layered_eigenvalue_above_sqrt8_at_n9():
    # seed 5 at n=9 has a second eigenvalue just above sqrt 8 whose eigenvector
    # averages to zero on every level, so no layered eigenvector carries it
    inst = generate_instance(9, 5)
    rep = eigen_gap_check(inst)
    assert len(rep.gap_violations) == 1 and rep.gap_violations[0] > SQRT8 + 1e-3
    a = inst.adjacency_matrix().toarray()
    w, v = np.linalg.eigh(a)
    vec = v[:, np.argmin(np.abs(w - rep.gap_violations[0]))]
    assert np.linalg.norm(layer_project(vec, inst)) <= 1e-10
