"""Two binary trees glued along a random alternating leaf cycle.

Node ids follow heap order: tree ``T1`` occupies ids ``0 .. 2^{n+1}-2``
(root 0, children of ``v`` at ``2v+1`` and ``2v+2``) and ``T2`` occupies the
next ``2^{n+1}-1`` ids with the same layout shifted.  Level ``i`` runs from
1 (root of T1) to ``2n+2`` (root of T2).

The hard matrix lives on the label space: ``lambda*I - A`` on labels that
name real nodes and ``sqrt(lambda^2+3)`` on the diagonal elsewhere.  The
:class:`WeldedTreesSq` view answers SQ requests on that matrix by querying a
:class:`TreeOracle`.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .sq_core import QueryLedger, SqMatrixView, SqVectorView


def label_bits_for(n: int) -> int:
    # 2n bits name every node once n >= 2; n = 1 needs 4 bits for its 6 nodes.
    bits = 2 * n
    while (1 << bits) < (1 << (n + 2)) - 2:
        bits += 2
    return bits


def level_sizes(n: int) -> np.ndarray:
    i = np.arange(1, 2 * n + 3)
    return 2 ** np.minimum(i - 1, 2 * n + 2 - i)


@dataclass
class WeldedTreesInstance:
    n: int
    seed: int | None
    labels: np.ndarray          # node id -> label
    adjacency: list[tuple[int, ...]]
    level: np.ndarray           # node id -> level in 1..2n+2
    leaf_cycle: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.label_bits = label_bits_for(self.n)
        self._node_of = {int(l): v for v, l in enumerate(self.labels)}

    @property
    def num_nodes(self) -> int:
        return len(self.labels)

    @property
    def tree_size(self) -> int:
        return (1 << (self.n + 1)) - 1

    @property
    def root_t1(self) -> int:
        return 0

    @property
    def root_t2(self) -> int:
        return self.tree_size

    @property
    def root_t2_label(self) -> int:
        return int(self.labels[self.root_t2])

    @property
    def hex_width(self) -> int:
        return (self.label_bits + 3) // 4

    def node_of(self, label: int) -> int | None:
        return self._node_of.get(int(label))

    def to_hex(self, label: int) -> str:
        return format(int(label), f"0{self.hex_width}x")

    def edges(self) -> list[tuple[int, int]]:
        return [(u, v) for u, nb in enumerate(self.adjacency) for v in nb if u < v]

    def adjacency_matrix(self) -> sp.csr_matrix:
        e = np.array(self.edges())
        n = self.num_nodes
        a = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
        return (a + a.T).tocsr()

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "seed": self.seed,
            "labels": [self.to_hex(l) for l in self.labels],
            "edges": [[int(u), int(v)] for u, v in self.edges()],
            "root_t2_label": self.to_hex(self.root_t2_label),
        }

    @classmethod
    def from_json(cls, data: dict) -> "WeldedTreesInstance":
        n = int(data["n"])
        labels = np.array([int(h, 16) for h in data["labels"]], dtype=np.int64)
        nbrs: list[list[int]] = [[] for _ in labels]
        for u, v in data["edges"]:
            nbrs[u].append(v)
            nbrs[v].append(u)
        inst = cls(n, data.get("seed"), labels, [tuple(sorted(x)) for x in nbrs], _levels(n))
        if inst.to_hex(inst.root_t2_label) != data["root_t2_label"]:
            raise ValueError("root_t2_label does not match the labels array")
        return inst


def _levels(n: int) -> np.ndarray:
    size = (1 << (n + 1)) - 1
    depth = np.floor(np.log2(np.arange(size) + 1)).astype(np.int64)
    return np.concatenate([depth + 1, 2 * n + 2 - depth])


def generate_instance(n: int, seed=None) -> WeldedTreesInstance:
    if n < 1:
        raise ValueError("tree height n must be >= 1")
    rng = np.random.default_rng(seed)
    size = (1 << (n + 1)) - 1
    total = 2 * size
    nbrs: list[list[int]] = [[] for _ in range(total)]
    for off in (0, size):
        for v in range(1, size):
            p = (v - 1) // 2
            nbrs[off + v].append(off + p)
            nbrs[off + p].append(off + v)
    leaves = np.arange(size // 2, size)
    t1 = np.concatenate([leaves[:1], rng.permutation(leaves[1:])])
    t2 = rng.permutation(leaves) + size
    cycle = [int(x) for pair in zip(t1, t2) for x in pair]
    for k, u in enumerate(cycle):
        v = cycle[(k + 1) % len(cycle)]
        nbrs[u].append(v)
        nbrs[v].append(u)
    bits = label_bits_for(n)
    labels = np.zeros(total, dtype=np.int64)
    labels[1:] = rng.choice((1 << bits) - 1, size=total - 1, replace=False) + 1
    return WeldedTreesInstance(n, seed, labels, [tuple(sorted(x)) for x in nbrs],
                               _levels(n), cycle)


class TreeOracle:
    """Neighbor oracle over labels; latches ``won`` when queried with ``i*``."""

    def __init__(self, instance: WeldedTreesInstance, ledger: QueryLedger | None = None):
        self.instance = instance
        self.ledger = ledger if ledger is not None else QueryLedger()
        self._won = False

    @property
    def won(self) -> bool:
        return self._won

    def _parse(self, label) -> int:
        inst = self.instance
        if isinstance(label, str):
            if len(label) != inst.hex_width:
                raise ValueError(f"label {label!r} must have {inst.hex_width} hex digits")
            label = int(label, 16)
        label = int(label)
        if not 0 <= label < (1 << inst.label_bits):
            raise ValueError(f"label {label} does not fit in {inst.label_bits} bits")
        return label

    def query(self, label) -> list[int] | None:
        """Neighbor labels of ``label``, or ``None`` if no node carries it."""
        label = self._parse(label)
        self.ledger.charge("oracle_calls")
        if label == self.instance.root_t2_label:
            self._won = True
        v = self.instance.node_of(label)
        if v is None:
            return None
        return [int(self.instance.labels[u]) for u in self.instance.adjacency[v]]


def oracle_query(oracle: TreeOracle, label):
    return oracle.query(label)


@dataclass(frozen=True)
class HardMatrixParams:
    n: int
    lambda_: float
    gamma: float
    delta: float
    label_bits: int
    off_block_diag: float

    @property
    def dim(self) -> int:
        return 1 << self.label_bits

    @property
    def num_nodes(self) -> int:
        return (1 << (self.n + 2)) - 2

    @property
    def frobenius_sq(self) -> float:
        return self.dim * (self.lambda_**2 + 3) - 2

    def precondition_slack(self) -> float:
        """``gamma^{-1/2}/16 - (n+2)``; zero for the canonical gamma."""
        return 1 / (16 * math.sqrt(self.gamma)) - (self.n + 2)


def make_params(n: int, gamma: float | None = None) -> HardMatrixParams:
    if n < 1:
        raise ValueError("n must be >= 1")
    if gamma is None:
        gamma = 1.0 / (16 * (n + 2)) ** 2
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    lam = math.sqrt(8) + gamma
    # lambda^2 - 8 = gamma (2 sqrt 8 + gamma) avoids cancellation.
    delta = math.sqrt(gamma * (2 * math.sqrt(8) + gamma))
    return HardMatrixParams(n, lam, gamma, delta, label_bits_for(n), math.sqrt(lam * lam + 3))


def simulate_sq_entry(oracle: TreeOracle, params: HardMatrixParams, i: int, j: int) -> float:
    nb = oracle.query(i)
    if nb is None:
        return params.off_block_diag if i == j else 0.0
    if i == j:
        return params.lambda_
    return -1.0 if j in nb else 0.0


def _row_support(oracle, params, i):
    nb = oracle.query(i)
    if nb is None:
        return [i], [params.off_block_diag]
    return [i] + nb, [params.lambda_] + [-1.0] * len(nb)


def simulate_sq_row_sample(oracle: TreeOracle, params: HardMatrixParams, i: int, rng) -> int:
    idx, vals = _row_support(oracle, params, i)
    w = np.square(vals)
    u = rng.random() * w.sum()
    k = int(np.searchsorted(np.cumsum(w), u, side="right"))
    return idx[min(k, len(idx) - 1)]


def simulate_sq_rowcol_norm_sample(params: HardMatrixParams, rng) -> int:
    return int(rng.integers(params.dim))


class _SimLineView(SqVectorView):
    def __init__(self, sq: "WeldedTreesSq", i: int, counter: str):
        self.sq, self.i, self.sample_counter = sq, i, counter
        self.length = sq.rows
        self.ledger = sq.ledger

    def entry(self, j):
        return self.sq.entry(self.i, j)

    def sample(self, rng):
        self.ledger.charge(self.sample_counter)
        return simulate_sq_row_sample(self.sq.oracle, self.sq.params, self.i, rng)

    def norm(self):
        self.ledger.charge("norm_queries")
        _, vals = _row_support(self.sq.oracle, self.sq.params, self.i)
        return math.sqrt(float(np.square(vals).sum()))


class _SimNormsView(SqVectorView):
    def __init__(self, sq: "WeldedTreesSq", counter: str):
        self.sq, self.sample_counter = sq, counter
        self.length = sq.rows
        self.ledger = sq.ledger

    def entry(self, i):
        # One oracle call to learn the degree of i.
        self.ledger.charge("entry_queries")
        _, vals = _row_support(self.sq.oracle, self.sq.params, i)
        return math.sqrt(float(np.square(vals).sum()))

    def sample(self, rng):
        self.ledger.charge(self.sample_counter)
        return simulate_sq_rowcol_norm_sample(self.sq.params, rng)

    def sample_many(self, rng, size):
        self.ledger.charge(self.sample_counter, size)
        return rng.integers(self.sq.params.dim, size=size)

    def norm(self):
        self.ledger.charge("norm_queries")
        return math.sqrt(self.sq.params.frobenius_sq)


class WeldedTreesSq(SqMatrixView):
    """SQ access to the hard matrix, answered through the tree oracle.

    Row/column samples, entry queries and extractions cost one oracle call
    each; row/column-norm samples cost none.  The view shares the oracle's
    ledger.
    """

    def __init__(self, oracle: TreeOracle, params: HardMatrixParams):
        self.oracle = oracle
        self.params = params
        self.ledger = oracle.ledger
        self.rows = self.cols = params.dim

    def entry(self, i, j):
        self.ledger.charge("entry_queries")
        return simulate_sq_entry(self.oracle, self.params, i, j)

    def row_view(self, i):
        return _SimLineView(self, i, "row_samples")

    def col_view(self, j):
        return _SimLineView(self, j, "col_samples")

    def row_norms_view(self):
        return _SimNormsView(self, "row_norm_samples")

    def col_norms_view(self):
        return _SimNormsView(self, "col_norm_samples")

    def row_nonzeros(self, i):
        self.ledger.charge("row_extractions")
        idx, vals = _row_support(self.oracle, self.params, i)
        self.ledger.charge("extracted_entries", len(idx))
        return np.array(idx, dtype=np.int64), np.array(vals)

    def col_nonzeros(self, j):
        self.ledger.charge("col_extractions")
        idx, vals = _row_support(self.oracle, self.params, j)
        self.ledger.charge("extracted_entries", len(idx))
        return np.array(idx, dtype=np.int64), np.array(vals)


def simulate_sq(oracle: TreeOracle, params: HardMatrixParams) -> WeldedTreesSq:
    return WeldedTreesSq(oracle, params)


def assemble_B(instance: WeldedTreesInstance, params: HardMatrixParams) -> sp.csr_matrix:
    """``lambda I - A`` in node-id order."""
    n = instance.num_nodes
    return (params.lambda_ * sp.identity(n, format="csr") - instance.adjacency_matrix()).tocsr()


def assemble_hard_matrix(instance: WeldedTreesInstance, params: HardMatrixParams) -> sp.csr_matrix:
    """The full label-space matrix (only sensible for small n)."""
    diag = np.full(params.dim, params.off_block_diag)
    diag[instance.labels] = params.lambda_
    e = np.array(instance.edges())
    lu, lv = instance.labels[e[:, 0]], instance.labels[e[:, 1]]
    off = sp.coo_matrix((-np.ones(len(e)), (lu, lv)), shape=(params.dim, params.dim))
    return (sp.diags(diag) + off + off.T).tocsr()


class NumericalDegeneracyError(ArithmeticError):
    pass


@dataclass
class LayeredSolution:
    phi: np.ndarray        # phi[i-1] is the value on level i
    alpha: float
    alpha_prime: float
    params: HardMatrixParams

    @property
    def n(self) -> int:
        return self.params.n

    @property
    def beta(self) -> float:
        return 1.0 - self.alpha

    def multiplicities(self) -> np.ndarray:
        return level_sizes(self.n)

    def norm_squared(self) -> float:
        return float(np.sum(self.multiplicities() * self.phi**2))

    def residuals(self) -> dict[str, float]:
        """Residuals of every row of ``Bx = e_1`` restricted to levels.

        A T1 node on level ``i`` has its parent on level ``i-1``; a T2 node
        has its parent on level ``i+1``.  Leaves see two opposite leaves.
        """
        lam, phi = self.params.lambda_, self.phi
        n = self.n
        scale = float(np.abs(phi).max())
        c = np.arange(1, 2 * n + 1)          # 0-based centres, levels 2..2n+1
        fwd = lam * phi[c] - phi[c - 1] - 2 * phi[c + 1]
        bwd = lam * phi[c] - phi[c + 1] - 2 * phi[c - 1]
        t1 = fwd[: n]                       # levels 2..n+1
        t2 = bwd[n:]                        # levels n+2..2n+1
        return {
            "root_t1": float(lam * phi[0] - 2 * phi[1] - 1),
            "root_t2": float(lam * phi[-1] - 2 * phi[-2]) / scale,
            "t1_levels": float(np.abs(t1).max(initial=0)) / scale,
            "t2_levels": float(np.abs(t2).max(initial=0)) / scale,
        }


def root_powers(lam, delta, i, *, mp=None):
    """``(r_minus^i, r_plus^i - r_minus^i)`` with a cancellation-free difference."""
    if mp is None:
        rm = (lam - delta) / 4
        ratio = math.log1p(2 * delta / (lam - delta))
        return rm**i, rm**i * math.expm1(i * ratio)
    rm = (lam - delta) / 4
    ratio = mp.log1p(2 * delta / (lam - delta))
    return rm**i, rm**i * mp.expm1(i * ratio)


def layered_solve(params: HardMatrixParams, n: int | None = None) -> LayeredSolution:
    """Closed-form solution of ``Bx = e_1`` constant on levels.

    T1 levels ``i = 1..n+2``: ``phi_i = alpha (r-^i - r+^i) + r+^i``.
    T2 levels, counted from the T2 root: ``alpha' (r-^i - r+^i)``.  Matching
    both forms at the two leaf levels fixes ``alpha`` and ``alpha'``.
    """
    n = params.n if n is None else n
    lam, delta = params.lambda_, params.delta

    def t1(i):
        rmi, diff = root_powers(lam, delta, i)
        return -diff, rmi + diff          # coefficient of alpha, constant

    def t2(i):
        _, diff = root_powers(lam, delta, i)
        return -diff

    # Level L = n+1 is a T1 leaf (T2 index n+2); level n+2 is a T2 leaf (T1 index n+2 unused).
    # T1 form valid on levels 1..n+2, T2 form on levels n+1..2n+2.
    a1, c1 = t1(n + 1)
    a2, c2 = t1(n + 2)
    b1 = t2(2 * n + 3 - (n + 1))
    b2 = t2(2 * n + 3 - (n + 2))
    mat = np.array([[a1, -b1], [a2, -b2]])
    rhs = np.array([-c1, -c2])
    det = np.linalg.det(mat)
    if not np.isfinite(det) or abs(det) <= 1e-14 * np.abs(mat).max() ** 2:
        raise NumericalDegeneracyError("level-matching system is singular")
    alpha, alpha_p = np.linalg.solve(mat, rhs)
    phi = np.empty(2 * n + 2)
    for lvl in range(1, n + 2):
        a, c = t1(lvl)
        phi[lvl - 1] = alpha * a + c
    for lvl in range(n + 2, 2 * n + 3):
        phi[lvl - 1] = alpha_p * t2(2 * n + 3 - lvl)
    return LayeredSolution(phi, float(alpha), float(alpha_p), params)


def expand_solution(instance: WeldedTreesInstance, solution: LayeredSolution) -> np.ndarray:
    if instance.n != solution.n:
        raise ValueError("instance and solution heights differ")
    return solution.phi[instance.level - 1]


def mass_ratio(solution: LayeredSolution, n: int | None = None) -> float:
    return float(solution.phi[-1] ** 2 / solution.norm_squared())


def dense_solve(instance: WeldedTreesInstance, params: HardMatrixParams) -> np.ndarray:
    e1 = np.zeros(instance.num_nodes)
    e1[instance.root_t1] = 1.0
    return spla.spsolve(assemble_B(instance, params).tocsc(), e1)


@dataclass
class ConditionReport:
    sigma_max: float
    sigma_min: float
    kappa: float
    bound: float
    eigenvalues_B: np.ndarray

    def __iter__(self):
        return iter((self.sigma_max, self.sigma_min, self.kappa))


def condition_number_check(instance: WeldedTreesInstance, params: HardMatrixParams) -> ConditionReport:
    """Singular values of the hard matrix: the dense spectrum of ``B`` plus the
    constant off-block diagonal, whose singular values are all ``sqrt(lambda^2+3)``."""
    if instance.n > 9:
        raise ValueError("dense spectra are capped at n = 9")
    ev = np.linalg.eigvalsh(assemble_B(instance, params).toarray())
    sv = np.abs(ev)
    extra = [params.off_block_diag] if params.dim > instance.num_nodes else []
    smax = float(max(sv.max(), *extra))
    smin = float(min(sv.min(), *extra))
    bound = 6 * (16 * (params.n + 2)) ** 2
    return ConditionReport(smax, smin, smax / smin, bound, ev[::-1])


# --- the query game ---------------------------------------------------------

@dataclass
class GameResult:
    won: bool
    oracle_queries: int
    strategy: str
    seed: int | None = None
    output_label: int | None = None


class ApproxSampleSolver:
    """Draws one index of ``M e_1`` per sample: pick the only index of ``e_1``,
    then sample its column.  One oracle call per sample."""

    per_sample_cost = 1

    def draw(self, sq: WeldedTreesSq, y: SqVectorView, rng) -> int:
        j = y.sample(rng)
        return sq.col_view(j).sample(rng)


class RowWalkSolver:
    """Random walk of ``steps`` row samples started at a draw of ``y``."""

    def __init__(self, steps: int):
        if steps < 1:
            raise ValueError("steps must be positive")
        self.steps = steps
        self.per_sample_cost = steps

    def draw(self, sq, y, rng):
        i = y.sample(rng)
        for _ in range(self.steps):
            i = sq.row_view(i).sample(rng)
        return i


STRATEGIES = ("uniform-random", "bfs-from-root", "qic-pipeline")


def play_game(strategy: str, oracle: TreeOracle, budget: int, rng, *, solver=None,
              seed=None) -> GameResult:
    if budget < 0:
        raise ValueError("budget must be non-negative")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    inst = oracle.instance
    start = oracle.ledger.oracle_calls
    output = None
    if strategy == "uniform-random":
        for _ in range(budget):
            output = int(rng.integers(1 << inst.label_bits))
            oracle.query(output)
            if oracle.won:
                break
    elif strategy == "bfs-from-root":
        seen = {0}
        queue = deque([0])
        used = 0
        while queue and used < budget and not oracle.won:
            output = queue.popleft()
            nb = oracle.query(output)
            used += 1
            for w in nb or ():
                if w not in seen:
                    seen.add(w)
                    queue.append(w)
    elif strategy == "qic-pipeline":
        solver = solver if solver is not None else ApproxSampleSolver()
        params = make_params(inst.n)
        sq = WeldedTreesSq(oracle, params)
        # SQ(e_1) is known to the simulator and charged to its own ledger.
        y = _UnitVectorView(params.dim, 0)
        samples = budget // solver.per_sample_cost
        for _ in range(samples):
            output = solver.draw(sq, y, rng)
        if samples:
            oracle.query(output)
    else:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    return GameResult(oracle.won, oracle.ledger.oracle_calls - start, strategy, seed, output)


class _UnitVectorView(SqVectorView):
    """SQ access to a standard basis vector, without materializing it."""

    def __init__(self, length: int, index: int, ledger: QueryLedger | None = None):
        self.length, self.index = length, index
        self.ledger = ledger if ledger is not None else QueryLedger()

    def entry(self, i):
        self.ledger.charge("entry_queries")
        return 1.0 if i == self.index else 0.0

    def sample(self, rng):
        self.ledger.charge(self.sample_counter)
        return self.index

    def norm(self):
        self.ledger.charge("norm_queries")
        return 1.0


def unit_vector_view(length: int, index: int, ledger: QueryLedger | None = None) -> SqVectorView:
    return _UnitVectorView(length, index, ledger)
