"""Simon's problem embedded in a linear system via a clocked circuit.

The circuit acts on ``2n`` qubits: ``n`` Hadamards on the first register,
the oracle gate ``U_f : (a, b) -> (a, b xor f(a))``, then ``n`` Hadamards
again, so ``T = 2n + 1``.  The clock matrix ``U`` has ``3T x 3T`` blocks of
size ``4^n``; block row ``bt`` holds gate ``G_bt`` in block column
``bt - 1 (mod 3T)``.  With ``A = I - e^{-1/T} U`` the symmetric system is
``M = [[0, A], [A^T, 0]]`` and ``M^{-1} e_1 = (0, A^{-1} e)``.

State indices are ``a * 2^n + b``; qubit 1 is the most significant bit of
``a``.  All gates are real and self-inverse, so ``G^T = G``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .sq_core import QueryLedger, SqMatrixView, SqVectorView, WeightedIndexTree

ONE_TO_ONE = "one-to-one"
TWO_TO_ONE = "two-to-one"
MODES = (ONE_TO_ONE, TWO_TO_ONE)
MAX_EXACT_N = 7
INV_SQRT2 = 1 / math.sqrt(2)


class SimonOracle:
    def __init__(self, n: int, mode: str, table, s: int = 0, ledger: QueryLedger | None = None):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.n, self.mode, self.s = n, mode, int(s)
        self.table = np.asarray(table, dtype=np.int64)
        self.ledger = ledger if ledger is not None else QueryLedger()

    def f(self, a: int) -> int:
        self.ledger.charge("f_calls")
        return int(self.table[a])

    def image(self) -> np.ndarray:
        return np.unique(self.table)


def make_oracle(n: int, mode: str, seed=None, s: int | None = None) -> SimonOracle:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    size = 1 << n
    if mode == ONE_TO_ONE:
        return SimonOracle(n, mode, rng.permutation(size))
    if mode != TWO_TO_ONE:
        raise ValueError(f"mode must be one of {MODES}")
    if s is None:
        s = int(rng.integers(1, size))
    if not 0 < s < size:
        raise ValueError("two-to-one mode needs a non-zero n-bit shift s")
    reps = [a for a in range(size) if a < a ^ s]
    outputs = rng.choice(size, size=len(reps), replace=False)
    table = np.empty(size, dtype=np.int64)
    for a, z in zip(reps, outputs):
        table[a] = table[a ^ s] = z
    return SimonOracle(n, mode, table, s)


# --- gates -------------------------------------------------------------------

def hadamard(state: np.ndarray, qubit: int, n_qubits: int) -> np.ndarray:
    """Apply H to ``qubit`` (1 = most significant) of a ``2^n_qubits`` vector."""
    v = state.reshape(1 << (qubit - 1), 2, -1)
    out = np.empty_like(v)
    out[:, 0] = (v[:, 0] + v[:, 1]) * INV_SQRT2
    out[:, 1] = (v[:, 0] - v[:, 1]) * INV_SQRT2
    return out.reshape(state.shape)


def oracle_gate(state: np.ndarray, table: np.ndarray, n: int) -> np.ndarray:
    """``(a, b) -> (a, b xor f(a))`` as a permutation of amplitudes."""
    size = 1 << n
    v = state.reshape(size, size)
    out = np.empty_like(v)
    cols = np.arange(size)[None, :] ^ table[:, None]
    out[np.arange(size)[:, None], cols] = v
    return out.reshape(state.shape)


@dataclass(frozen=True)
class CircuitMatrix:
    n: int

    @property
    def T(self) -> int:
        return 2 * self.n + 1

    @property
    def block_size(self) -> int:
        return 1 << (2 * self.n)

    @property
    def blocks(self) -> int:
        return 3 * self.T

    @property
    def dim(self) -> int:
        return 2 * self.blocks * self.block_size

    @property
    def damping(self) -> float:
        return math.exp(-1 / self.T)

    @property
    def row_norm(self) -> float:
        return math.sqrt(1 + self.damping**2)

    def step_gate(self, t: int):
        """Gate ``U_t`` for ``t = 1..T``: ``("H", qubit)``, ``("F",)``."""
        n = self.n
        if not 1 <= t <= self.T:
            raise ValueError(f"step t must lie in 1..{self.T}")
        if t <= n:
            return ("H", t)
        if t == n + 1:
            return ("F",)
        return ("H", t - n - 1)

    def block_gate(self, bt: int):
        """Gate in block row ``bt`` of ``U`` (block column ``bt - 1 mod 3T``)."""
        T = self.T
        if bt == 0:
            return self.step_gate(1)
        if bt <= T:
            return self.step_gate(bt)
        if bt <= 2 * T:
            return ("I",)
        return self.step_gate(3 * T + 1 - bt)

    def oracle_block_rows(self) -> tuple[int, int]:
        """Block rows of ``U`` (equivalently of ``A``) that hold ``U_f``."""
        return (self.n + 1, 5 * self.n + 3)

    def apply_gate(self, gate, state, table) -> np.ndarray:
        if gate[0] == "H":
            return hadamard(state, gate[1], 2 * self.n)
        if gate[0] == "F":
            return oracle_gate(state, table, self.n)
        return state.copy()

    def apply_U(self, blocks: np.ndarray, table) -> np.ndarray:
        out = np.empty_like(blocks)
        for bt in range(self.blocks):
            out[bt] = self.apply_gate(self.block_gate(bt), blocks[bt - 1], table)
        return out

    def apply_A(self, blocks: np.ndarray, table) -> np.ndarray:
        return blocks - self.damping * self.apply_U(blocks, table)


def apply_circuit_step(state: np.ndarray, t: int, oracle: SimonOracle) -> np.ndarray:
    """Apply ``U_t``.  The oracle table is read directly: this is the ideal
    circuit, not a classical simulation, so no f-calls are charged."""
    circuit = CircuitMatrix(oracle.n)
    return circuit.apply_gate(circuit.step_gate(t), np.asarray(state, dtype=float), oracle.table)


# --- exact solution ----------------------------------------------------------

@dataclass
class SolutionVector:
    oracle: SimonOracle
    circuit: CircuitMatrix
    blocks: np.ndarray      # (3T, 4^n) unit vectors y^t
    weights: np.ndarray     # omega_t

    def lower(self) -> np.ndarray:
        """``A^{-1} e`` as a ``(3T, 4^n)`` array."""
        return self.weights[:, None] * self.blocks

    def full(self) -> np.ndarray:
        low = self.lower().ravel()
        return np.concatenate([np.zeros_like(low), low])

    def residual(self) -> float:
        e = np.zeros_like(self.blocks)
        e[0, 0] = 1.0
        return float(np.linalg.norm(self.circuit.apply_A(self.lower(), self.oracle.table) - e))


def solution_weights(T: int) -> np.ndarray:
    """``omega_t = sum_k e^{-(t + 3Tk)/T} = e^{-t/T} / (1 - e^{-3})``."""
    t = np.arange(3 * T)
    return np.exp(-t / T) / -math.expm1(-3)


def exact_solution(oracle: SimonOracle, circuit: CircuitMatrix | None = None) -> SolutionVector:
    circuit = circuit or CircuitMatrix(oracle.n)
    if oracle.n > MAX_EXACT_N:
        raise MemoryError(f"exact solutions are limited to n <= {MAX_EXACT_N}")
    T = circuit.T
    psi = np.zeros((T + 1, circuit.block_size))
    psi[0, 0] = 1.0
    for t in range(1, T + 1):
        psi[t] = apply_circuit_step(psi[t - 1], t, oracle)
    idx = [t if t <= T else (T if t <= 2 * T else 3 * T - t) for t in range(3 * T)]
    return SolutionVector(oracle, circuit, psi[idx], solution_weights(T))


def block_probabilities(solution: SolutionVector) -> dict[str, float]:
    """Probability that an l2 sample of the solution lands in blocks
    ``T .. 2T-1``; ``full`` normalizes over every block, ``displayed`` over
    blocks ``1 .. 3T-1`` only."""
    T = solution.circuit.T
    mass = np.sum(solution.lower() ** 2, axis=1)
    out = mass[T:2 * T].sum()
    return {"full": float(out / mass.sum()), "displayed": float(out / mass[1:].sum())}


def block_probability(solution: SolutionVector) -> float:
    return block_probabilities(solution)["full"]


def geometric_block_probability(T: int, displayed: bool = False) -> float:
    """Closed form of :func:`block_probability` (independent of the state)."""
    q = math.exp(-2 / T)
    num = math.exp(-2) * -math.expm1(-2)
    den = (q - math.exp(-6)) if displayed else -math.expm1(-6)
    return num / den


# --- SQ access to M ----------------------------------------------------------

class SimonSq(SqMatrixView):
    """SQ(M) for the symmetric Simon matrix, answered by querying ``f``.

    Rows ``r < D`` are rows of ``A`` (placed in the right half); rows
    ``r >= D`` are rows of ``A^T`` (placed in the left half).  A row or entry
    in a ``U_f`` block costs one f-call; everything else is computed from the
    circuit description.
    """

    def __init__(self, oracle: SimonOracle, circuit: CircuitMatrix | None = None):
        self.oracle = oracle
        self.circuit = circuit or CircuitMatrix(oracle.n)
        self.ledger = oracle.ledger
        self.half = self.circuit.blocks * self.circuit.block_size
        self.rows = self.cols = self.circuit.dim

    def _gate_row(self, gate, s: int) -> tuple[list[int], list[float]]:
        n2 = 2 * self.circuit.n
        if gate[0] == "I":
            return [s], [1.0]
        if gate[0] == "F":
            n = self.circuit.n
            a, b = s >> n, s & ((1 << n) - 1)
            return [(a << n) | (b ^ self.oracle.f(a))], [1.0]
        bit = 1 << (n2 - gate[1])
        return [s, s ^ bit], [-INV_SQRT2 if s & bit else INV_SQRT2, INV_SQRT2]

    def _row(self, r: int) -> tuple[np.ndarray, np.ndarray]:
        c = self.circuit
        if not 0 <= r < self.rows:
            raise IndexError(f"row {r} out of range")
        lower = r >= self.half
        rr = r - self.half if lower else r
        bt, s = divmod(rr, c.block_size)
        if lower:
            # Row bt of A^T = column bt of A: gate G_{bt+1} sits in block row bt+1.
            gate_block = (bt + 1) % c.blocks
            other = gate_block
        else:
            gate_block = bt
            other = (bt - 1) % c.blocks
        cols, vals = self._gate_row(c.block_gate(gate_block), s)
        offset = 0 if lower else self.half
        idx = [offset + rr] + [offset + other * c.block_size + k for k in cols]
        v = [1.0] + [-c.damping * x for x in vals]
        order = np.argsort(idx)
        return np.asarray(idx)[order], np.asarray(v)[order]

    def touches_oracle(self, r: int) -> bool:
        c = self.circuit
        lower = r >= self.half
        bt = (r - self.half if lower else r) // c.block_size
        rows = c.oracle_block_rows()
        return ((bt + 1) % c.blocks in rows) if lower else bt in rows

    def entry(self, i: int, j: int) -> float:
        self.ledger.charge("entry_queries")
        c = self.circuit
        i_low, j_low = i >= self.half, j >= self.half
        if i_low == j_low:
            return 0.0
        ii = i - self.half if i_low else i
        jj = j - self.half if j_low else j
        if ii == jj:
            return 1.0
        bi, si = divmod(ii, c.block_size)
        bj, sj = divmod(jj, c.block_size)
        gate_block = (bi + 1) % c.blocks if i_low else bi
        expected = gate_block if i_low else (bi - 1) % c.blocks
        if bj != expected:
            return 0.0
        cols, vals = self._gate_row(c.block_gate(gate_block), si)
        return -c.damping * dict(zip(cols, vals)).get(sj, 0.0)

    def row_view(self, i: int) -> SqVectorView:
        return _SimonLineView(self, i, "row_samples")

    def col_view(self, j: int) -> SqVectorView:
        return _SimonLineView(self, j, "col_samples")

    def row_norms_view(self) -> SqVectorView:
        return _UniformNormView(self, "row_norm_samples")

    def col_norms_view(self) -> SqVectorView:
        return _UniformNormView(self, "col_norm_samples")

    def row_nonzeros(self, i):
        idx, vals = self._row(i)
        self.ledger.charge("row_extractions")
        self.ledger.charge("extracted_entries", len(idx))
        return idx, vals

    def col_nonzeros(self, j):
        idx, vals = self._row(j)
        self.ledger.charge("col_extractions")
        self.ledger.charge("extracted_entries", len(idx))
        return idx, vals


class _SimonLineView(SqVectorView):
    def __init__(self, sq: SimonSq, i: int, counter: str):
        self.sq, self.i, self.sample_counter = sq, i, counter
        self.length = sq.cols
        self.ledger = sq.ledger

    def entry(self, j):
        return self.sq.entry(self.i, j)

    def sample(self, rng):
        self.ledger.charge(self.sample_counter)
        idx, vals = self.sq._row(self.i)
        w = np.cumsum(vals * vals)
        k = int(np.searchsorted(w, rng.random() * w[-1], side="right"))
        return int(idx[min(k, len(idx) - 1)])

    def norm(self):
        self.ledger.charge("norm_queries")
        return self.sq.circuit.row_norm


class _UniformNormView(SqVectorView):
    def __init__(self, sq: SimonSq, counter: str):
        self.sq, self.sample_counter = sq, counter
        self.length = sq.rows
        self.ledger = sq.ledger

    def entry(self, i):
        self.ledger.charge("entry_queries")
        return self.sq.circuit.row_norm

    def sample(self, rng):
        self.ledger.charge(self.sample_counter)
        return int(rng.integers(self.length))

    def norm(self):
        self.ledger.charge("norm_queries")
        return self.sq.circuit.row_norm * math.sqrt(self.length)


def simulate_sq(oracle: SimonOracle, circuit: CircuitMatrix | None = None) -> SimonSq:
    return SimonSq(oracle, circuit)


# --- sampling and perturbation -----------------------------------------------

def decode_index(idx: int, n: int) -> tuple[int, int, int]:
    """Lower-half index -> ``(t, j, k)``."""
    t, rem = divmod(int(idx), 1 << (2 * n))
    return t, rem >> n, rem & ((1 << n) - 1)


class VectorSampler:
    """l2 sampler over a lower-half vector of shape ``(3T, 4^n)``."""

    def __init__(self, vector: np.ndarray, n: int):
        self.n = n
        self.tree = WeightedIndexTree(np.asarray(vector).ravel())

    def __call__(self, rng) -> tuple[int, int, int]:
        return decode_index(self.tree.sample(rng), self.n)

    def sample_many(self, rng, size: int) -> np.ndarray:
        idx = self.tree.sample_many(rng, size)
        t, rem = np.divmod(idx, 1 << (2 * self.n))
        return np.stack([t, rem >> self.n, rem & ((1 << self.n) - 1)], axis=1)


def sample_solution(solution: SolutionVector, rng) -> tuple[int, int, int]:
    return VectorSampler(solution.lower(), solution.oracle.n)(rng)


def invalid_mask(solution: SolutionVector) -> np.ndarray:
    """Output-block indices with odd ``<j, s>``; empty for one-to-one oracles."""
    c, n = solution.circuit, solution.oracle.n
    j = np.arange(c.block_size) >> n
    odd = np.array([bin(x & solution.oracle.s).count("1") & 1 for x in j], dtype=bool)
    mask = np.zeros((c.blocks, c.block_size), dtype=bool)
    mask[c.T:2 * c.T] = odd
    return mask


def invalid_probability(vector: np.ndarray, solution: SolutionVector) -> float:
    v2 = np.asarray(vector).reshape(solution.blocks.shape) ** 2
    return float(v2[invalid_mask(solution)].sum() / v2.sum())


def perturb_solution(solution: SolutionVector, epsilon: float, adversary: str, rng) -> np.ndarray:
    """Return ``x~`` (lower half) with ``||x~ - x|| <= epsilon ||x||``.

    ``mass-shift`` is the worst case for validity: it shrinks ``x`` to
    ``(1 - eps^2) x`` and adds ``eps sqrt(1 - eps^2) ||x||`` spread evenly over
    the invalid output indices, which makes the invalid probability exactly
    ``eps^2``.  ``random-noise`` adds a uniformly random direction of length
    ``eps ||x||``.
    """
    if not 0 <= epsilon < 1:
        raise ValueError("epsilon must lie in [0, 1)")
    x = solution.lower()
    if epsilon == 0:
        return x.copy()
    norm = np.linalg.norm(x)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    if adversary == "mass-shift":
        mask = invalid_mask(solution)
        if not mask.any():
            raise ValueError("mass-shift needs invalid indices (a two-to-one oracle)")
        u = mask / math.sqrt(mask.sum())
        return (1 - epsilon**2) * x + epsilon * math.sqrt(1 - epsilon**2) * norm * u
    if adversary == "random-noise":
        g = rng.standard_normal(x.shape)
        return x + epsilon * norm * g / np.linalg.norm(g)
    raise ValueError(f"unknown adversary {adversary!r}")


# --- recovery ------------------------------------------------------------------

def gf2_reduce(basis: dict[int, int], v: int) -> int:
    """Reduce ``v`` against an echelon basis keyed by leading bit."""
    while v:
        top = v.bit_length() - 1
        if top not in basis:
            return v
        v ^= basis[top]
    return 0


def gf2_rank(rows) -> int:
    basis: dict[int, int] = {}
    for r in rows:
        v = gf2_reduce(basis, int(r))
        if v:
            basis[v.bit_length() - 1] = v
    return len(basis)


def gf2_nullspace(rows, n: int) -> list[int]:
    """Basis of ``{x : <r, x> = 0 mod 2 for every row r}`` in ``F_2^n``."""
    basis: dict[int, int] = {}
    for r in rows:
        if int(r) >> n:
            raise ValueError(f"row {r} does not fit in {n} bits")
        v = gf2_reduce(basis, int(r))
        if v:
            basis[v.bit_length() - 1] = v
    # Fully reduce to RREF so pivot bits appear in exactly one row.
    pivots = sorted(basis)
    for p in pivots:
        for q in pivots:
            if q != p and basis[q] >> p & 1:
                basis[q] ^= basis[p]
    free = [b for b in range(n) if b not in basis]
    out = []
    for f in free:
        x = 1 << f
        for p, row in basis.items():
            if row >> f & 1:
                x |= 1 << p
        out.append(x)
    return out


@dataclass
class RecoveryResult:
    decision: str           # ONE_TO_ONE, TWO_TO_ONE or "inconclusive"
    recovered_s: int | None
    samples_used: int
    f_calls: int
    valid_samples: int
    rank: int

    @property
    def rank_deficient(self) -> bool:
        return self.decision == "inconclusive"


def recover_secret(oracle: SimonOracle, sampler, c_multiplier: float, rng,
                   max_draws: int | None = None, verify: bool = True) -> RecoveryResult:
    """Collect ``c*n`` samples from the output blocks and decide by GF(2) rank.

    Stops early once rank ``n`` is reached (one-to-one is then certain).  At
    rank ``n-1`` the null space holds a single candidate shift; with ``verify``
    it is checked classically with two calls, ``f(0) == f(s)``, which under
    the promise settles the decision either way.  Without ``verify`` rank
    ``n-1`` is read as two-to-one, which a one-to-one run hits with
    probability about ``2^-(c n)`` at n=1.
    """
    n = oracle.n
    T = 2 * n + 1
    need = max(1, math.ceil(c_multiplier * n))
    cap = max_draws if max_draws is not None else 100 * need
    f_before = oracle.ledger.f_calls
    basis: dict[int, int] = {}
    js: list[int] = []
    draws = valid = 0
    while valid < need and draws < cap and len(basis) < n:
        t, j, _ = sampler(rng)
        draws += 1
        if T <= t <= 2 * T - 1:
            valid += 1
            js.append(int(j))
            v = gf2_reduce(basis, int(j))
            if v:
                basis[v.bit_length() - 1] = v
    rank = len(basis)

    def result(decision, s=None):
        return RecoveryResult(decision, s, draws, oracle.ledger.f_calls - f_before, valid, rank)

    if rank == n:
        return result(ONE_TO_ONE)
    if rank == n - 1 and (verify or valid >= need):
        cand = gf2_nullspace(js, n)[0]
        if not verify:
            return result(TWO_TO_ONE, cand)
        if oracle.f(0) == oracle.f(cand):
            return result(TWO_TO_ONE, cand)
        return result(ONE_TO_ONE)
    return result("inconclusive")


def recovery_correct(result: RecoveryResult, oracle: SimonOracle) -> bool:
    if oracle.mode == ONE_TO_ONE:
        return result.decision == ONE_TO_ONE
    return result.decision == TWO_TO_ONE and result.recovered_s == oracle.s
