import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qicsep.simon import (MODES, ONE_TO_ONE, TWO_TO_ONE, CircuitMatrix, SimonOracle, VectorSampler,
                          apply_circuit_step, block_probabilities, block_probability,
                          exact_solution, geometric_block_probability, gf2_nullspace, gf2_rank,
                          hadamard, invalid_mask, invalid_probability, make_oracle,
                          perturb_solution, recover_secret, recovery_correct, sample_solution,
                          simulate_sq, solution_weights)


def _dot2(a, b):
    return bin(a & b).count("1") & 1


def _final_state(oracle):
    n = oracle.n
    psi = np.zeros(1 << (2 * n))
    psi[0] = 1
    for t in range(1, 2 * n + 2):
        psi = apply_circuit_step(psi, t, oracle)
    return psi


def _dense_M(sq):
    m = np.zeros((sq.rows, sq.cols))
    for r in range(sq.rows):
        idx, vals = sq._row(r)
        m[r, idx] = vals
    return m


# --- oracles -----------------------------------------------------------------------

def test_n1_two_to_one():
    o = make_oracle(1, TWO_TO_ONE, 0, s=1)
    assert o.f(0) == o.f(1)
    assert o.ledger.f_calls == 2


def test_n3_bijection():
    assert len(make_oracle(3, ONE_TO_ONE, 1).image()) == 8


@pytest.mark.parametrize("seed", range(5))
def test_n4_pairing(seed):
    o = make_oracle(4, TWO_TO_ONE, seed)
    for a in range(16):
        assert o.table[a] == o.table[a ^ o.s]
    assert len(o.image()) == 8


def test_oracle_argument_checks():
    with pytest.raises(ValueError):
        make_oracle(2, "three-to-one", 0)
    with pytest.raises(ValueError):
        make_oracle(2, TWO_TO_ONE, 0, s=0)
    with pytest.raises(ValueError):
        SimonOracle(1, "x", [0, 1])


# --- circuit -------------------------------------------------------------------------

def test_double_hadamard_is_identity():
    rng = np.random.default_rng(0)
    v = rng.standard_normal(16)
    for q in range(1, 5):
        np.testing.assert_allclose(hadamard(hadamard(v, q, 4), q, 4), v, atol=1e-12)


def test_oracle_step_permutes_basis():
    o = make_oracle(2, ONE_TO_ONE, 3)
    for a in range(4):
        for b in range(4):
            e = np.zeros(16)
            e[a * 4 + b] = 1
            out = apply_circuit_step(e, 3, o)
            assert out[a * 4 + (b ^ int(o.table[a]))] == 1 and out.sum() == 1


def test_final_state_n2_s01():
    o = make_oracle(2, TWO_TO_ONE, 4, s=1)
    psi = _final_state(o).reshape(4, 4)
    image = set(o.image().tolist())
    for j in range(4):
        for k in range(4):
            if _dot2(j, 1) == 0 and k in image:
                assert abs(abs(psi[j, k]) - 2 / 4) <= 1e-12
            else:
                assert abs(psi[j, k]) <= 1e-12


@pytest.mark.parametrize("mode", MODES)
def test_steps_preserve_norm(mode):
    o = make_oracle(3, mode, 5)
    psi = np.zeros(64)
    psi[0] = 1
    for t in range(1, 8):
        psi = apply_circuit_step(psi, t, o)
        assert abs(np.linalg.norm(psi) - 1) <= 1e-12


def test_block_layout():
    c = CircuitMatrix(2)
    assert c.T == 5 and c.blocks == 15 and c.block_size == 16
    assert [c.block_gate(b)[0] for b in range(15)] == \
        ["H", "H", "H", "F", "H", "H", "I", "I", "I", "I", "I", "H", "H", "F", "H"]
    assert c.oracle_block_rows() == (3, 13)
    with pytest.raises(ValueError):
        c.step_gate(0)


# --- exact solution -------------------------------------------------------------------

def test_first_block_n1():
    sol = exact_solution(make_oracle(1, ONE_TO_ONE, 0))
    np.testing.assert_allclose(sol.blocks[1], [1 / math.sqrt(2), 0, 1 / math.sqrt(2), 0])


def test_weight_ratio():
    for T in (3, 5, 9):
        w = solution_weights(T)
        np.testing.assert_allclose(w[:-1] / w[1:], math.exp(1 / T), rtol=1e-14)


@pytest.mark.parametrize("n", range(1, 6))
@pytest.mark.parametrize("mode", MODES)
def test_solution_solves_system(n, mode):
    sol = exact_solution(make_oracle(n, mode, n))
    assert sol.residual() <= 1e-10


def test_full_matrix_solution_n1():
    o = make_oracle(1, TWO_TO_ONE, 0)
    sq = simulate_sq(o)
    m = _dense_M(sq)
    assert np.allclose(m, m.T)
    e1 = np.zeros(sq.rows)
    e1[0] = 1
    assert np.linalg.norm(m @ exact_solution(o).full() - e1) <= 1e-10


def test_exact_solution_size_cap():
    with pytest.raises(MemoryError):
        exact_solution(make_oracle(8, ONE_TO_ONE, 0))


def test_block_probability_normalization_and_closed_form():
    sol = exact_solution(make_oracle(1, ONE_TO_ONE, 0))
    mass = np.sum(sol.lower() ** 2, axis=1)
    assert (mass / mass.sum()).sum() == pytest.approx(1, abs=1e-15)
    T = 3
    # direct summation of the geometric series as oracle
    w2 = [math.exp(-2 * t / T) for t in range(3 * T)]
    direct = sum(w2[T:2 * T]) / sum(w2)
    assert abs(block_probability(sol) - direct) <= 1e-10
    direct_disp = sum(w2[T:2 * T]) / sum(w2[1:])
    assert abs(block_probabilities(sol)["displayed"] - direct_disp) <= 1e-10
    assert abs(geometric_block_probability(T, True) - direct_disp) <= 1e-10


@pytest.mark.parametrize("n", range(1, 8))
def test_block_probability_is_order_one(n):
    T = 2 * n + 1
    assert geometric_block_probability(T) >= 0.1
    assert geometric_block_probability(T, displayed=True) >= 0.1
    if n <= 4:
        assert abs(block_probability(exact_solution(make_oracle(n, TWO_TO_ONE, n)))
                   - geometric_block_probability(T)) <= 1e-10


# --- SQ simulation --------------------------------------------------------------------

def test_row_norms():
    o = make_oracle(2, ONE_TO_ONE, 0)
    sq = simulate_sq(o)
    expect = math.sqrt(1 + math.exp(-2 / 5))
    for r in range(0, sq.rows, 37):
        _, vals = sq._row(r)
        assert np.linalg.norm(vals) == pytest.approx(expect, rel=1e-14)
        assert sq.row_view(r).norm() == expect


def test_entries_match_rows():
    o = make_oracle(1, TWO_TO_ONE, 2)
    sq = simulate_sq(o)
    m = _dense_M(sq)
    for i in range(sq.rows):
        for j in range(sq.cols):
            assert sq.entry(i, j) == m[i, j]


def test_hadamard_entry_is_free():
    o = make_oracle(2, ONE_TO_ONE, 0)
    sq = simulate_sq(o)
    bs = sq.circuit.block_size
    sq.entry(1 * bs + 3, sq.half + 0 * bs + 3)
    assert o.ledger.f_calls == 0
    sq.entry(3 * bs + 5, sq.half + 2 * bs + 5)
    assert o.ledger.f_calls == 1


def test_f_calls_counted_per_oracle_row():
    o = make_oracle(2, TWO_TO_ONE, 1)
    sq = simulate_sq(o)
    rng = np.random.default_rng(0)
    norms = sq.row_norms_view()
    rows = [norms.sample(rng) for _ in range(1000)]
    for r in rows:
        sq.row_view(r).sample(rng)
    assert o.ledger.f_calls == sum(sq.touches_oracle(r) for r in rows)
    assert o.ledger.row_samples == 1000 and o.ledger.row_norm_samples == 1000


@pytest.mark.parametrize("n", [1, 2, 3])
def test_touches_oracle_classification(n):
    o = make_oracle(n, ONE_TO_ONE, 0)
    sq = simulate_sq(o)
    for r in range(sq.rows):
        before = o.ledger.f_calls
        sq._row(r)
        assert (o.ledger.f_calls - before == 1) == sq.touches_oracle(r)


# --- sampling ---------------------------------------------------------------------------

@pytest.mark.parametrize("n", [1, 2, 3])
def test_conditional_output_distribution(n):
    o = make_oracle(n, TWO_TO_ONE, 10 + n)
    sol = exact_solution(o)
    T = 2 * n + 1
    x = sol.lower()[T:2 * T] ** 2
    cond = x.sum(axis=0) / x.sum()
    image = set(o.image().tolist())
    allowed = [(j << n) | k for j in range(1 << n) for k in range(1 << n)
               if _dot2(j, o.s) == 0 and k in image]
    expect = np.zeros(1 << (2 * n))
    expect[allowed] = 1 / len(allowed)
    np.testing.assert_allclose(cond, expect, atol=1e-12)


def test_t_marginal_and_one_to_one_j_uniform():
    o = make_oracle(3, ONE_TO_ONE, 2)
    sol = exact_solution(o)
    draws = VectorSampler(sol.lower(), 3).sample_many(np.random.default_rng(0), 100_000)
    w2 = sol.weights**2
    freq = np.bincount(draws[:, 0], minlength=len(w2)) / 100_000
    p = w2 / w2.sum()
    assert np.all(np.abs(freq - p) <= 4 * np.sqrt(p * (1 - p) / 100_000))
    T = 7
    x = sol.lower()[T:2 * T] ** 2
    j_marg = x.reshape(T, 8, 8).sum(axis=(0, 2)) / x.sum()
    np.testing.assert_allclose(j_marg, 1 / 8, atol=1e-12)
    t, j, k = sample_solution(sol, np.random.default_rng(1))
    assert 0 <= t < 3 * T and 0 <= j < 8 and 0 <= k < 8


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(0, 10_000))
def test_two_to_one_samples_orthogonal(n, seed):
    o = make_oracle(n, TWO_TO_ONE, seed)
    sol = exact_solution(o)
    T = 2 * n + 1
    draws = VectorSampler(sol.lower(), n).sample_many(np.random.default_rng(seed), 500)
    out = draws[(draws[:, 0] >= T) & (draws[:, 0] < 2 * T)]
    assert all(_dot2(int(j), o.s) == 0 for j in out[:, 1])


# --- perturbation ---------------------------------------------------------------------

def test_zero_perturbation():
    sol = exact_solution(make_oracle(2, TWO_TO_ONE, 0))
    assert np.array_equal(perturb_solution(sol, 0.0, "mass-shift", 0), sol.lower())


@pytest.mark.parametrize("eps", [0.01, 0.05, 0.2])
def test_mass_shift_invalid_probability(eps):
    sol = exact_solution(make_oracle(3, TWO_TO_ONE, 1))
    x = sol.lower()
    xt = perturb_solution(sol, eps, "mass-shift", 0)
    assert np.linalg.norm(xt - x) <= eps * np.linalg.norm(x) * (1 + 1e-12)
    assert invalid_probability(xt, sol) == pytest.approx(eps**2, rel=1e-9)
    assert invalid_probability(x, sol) == 0


def test_mass_shift_needs_two_to_one():
    sol = exact_solution(make_oracle(2, ONE_TO_ONE, 0))
    assert not invalid_mask(sol).any()
    with pytest.raises(ValueError):
        perturb_solution(sol, 0.1, "mass-shift", 0)


def test_random_noise_recovery_n4():
    wins = 0
    for seed in range(20):
        o = make_oracle(4, TWO_TO_ONE, seed)
        sol = exact_solution(o)
        rng = np.random.default_rng(seed)
        xt = perturb_solution(sol, 0.05, "random-noise", rng)
        assert np.linalg.norm(xt - sol.lower()) == pytest.approx(0.05 * np.linalg.norm(sol.lower()))
        wins += recovery_correct(recover_secret(o, VectorSampler(xt, 4), 4, rng), o)
    assert wins >= 18


# --- GF(2) and recovery ---------------------------------------------------------------

def test_nullspace_examples():
    assert gf2_nullspace([1, 2, 4], 3) == []
    assert sorted(gf2_nullspace([], 3)) == [1, 2, 4]
    assert gf2_nullspace([3], 2) == [3]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 255), min_size=0, max_size=20))
def test_nullspace_by_multiplication(rows):
    null = gf2_nullspace(rows, 8)
    assert len(null) == 8 - gf2_rank(rows)
    assert gf2_rank(null) == len(null)
    for x in null:
        assert all(_dot2(r, x) == 0 for r in rows)


def test_nullspace_random_20x8():
    rng = np.random.default_rng(0)
    rows = rng.integers(0, 256, size=20).tolist()
    for x in gf2_nullspace(rows, 8):
        assert all(_dot2(r, x) == 0 for r in rows)
    with pytest.raises(ValueError):
        gf2_nullspace([256], 8)


def test_n1_two_to_one_recovery():
    o = make_oracle(1, TWO_TO_ONE, 0, s=1)
    sol = exact_solution(o)
    res = recover_secret(o, VectorSampler(sol.lower(), 1), 4, np.random.default_rng(0))
    assert res.rank == 0 and res.decision == TWO_TO_ONE and res.recovered_s == 1


@pytest.mark.parametrize("seed", range(20))
def test_n1_one_to_one_always_correct(seed):
    o = make_oracle(1, ONE_TO_ONE, seed)
    sol = exact_solution(o)
    res = recover_secret(o, VectorSampler(sol.lower(), 1), 4, np.random.default_rng(seed))
    assert res.decision == ONE_TO_ONE


def test_n1_one_to_one_reaches_rank_one():
    o = make_oracle(1, ONE_TO_ONE, 0)
    sampler = VectorSampler(exact_solution(o).lower(), 1)
    ranks = [recover_secret(o, sampler, 4, np.random.default_rng(s), verify=False).rank
             for s in range(200)]
    # rank stays 0 only when all 4 valid samples have j = 0
    assert 0.85 <= np.mean(ranks) <= 1


def test_unverified_n1_can_be_fooled():
    o = make_oracle(1, ONE_TO_ONE, 0)
    sampler = VectorSampler(exact_solution(o).lower(), 1)
    outs = [recover_secret(o, sampler, 4, np.random.default_rng(s), verify=False).decision
            for s in range(400)]
    assert TWO_TO_ONE in outs
    assert all(d in (ONE_TO_ONE, TWO_TO_ONE) for d in outs)


@pytest.mark.parametrize("mode", MODES)
def test_n4_recovery_rate(mode):
    ok = 0
    for seed in range(50):
        o = make_oracle(4, mode, seed)
        sol = exact_solution(o)
        rng = np.random.default_rng(seed)
        ok += recovery_correct(recover_secret(o, VectorSampler(sol.lower(), 4), 4, rng), o)
    assert ok >= 45


def test_inconclusive_when_starved():
    o = make_oracle(3, TWO_TO_ONE, 0)
    sampler = VectorSampler(exact_solution(o).lower(), 3)
    res = recover_secret(o, sampler, 4, np.random.default_rng(0), max_draws=1)
    assert res.samples_used == 1
    assert res.decision in ("inconclusive", ONE_TO_ONE, TWO_TO_ONE)
    if res.rank < 2:
        assert res.rank_deficient
