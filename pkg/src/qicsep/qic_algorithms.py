"""Sampling primitives for ``Ay`` under sparse SQ access.

All routines take an :class:`~qicsep.sq_core.SqMatrixView` ``A`` and an
:class:`~qicsep.sq_core.SqVectorView` ``y`` and charge every access to the
views' ledgers.  Batch helpers memoize per-index work; on a cache hit the
ledger delta recorded the first time is charged again, so the accounting is
identical to the unmemoized path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .sq_core import MaterializedMatrix, NoDistributionError, QueryLedger, SqMatrixView, SqVectorView


class BoundViolationError(RuntimeError):
    """Acceptance probability exceeded one: ``m_bound`` or ``n_estimate`` is wrong."""


@dataclass(frozen=True)
class SparsityProfile:
    t: int

    @classmethod
    def of(cls, A) -> "SparsityProfile":
        if isinstance(A, MaterializedMatrix):
            csr = A.sparse()
        else:
            import scipy.sparse as sp
            csr = sp.csr_matrix(A)
            csr.eliminate_zeros()
        row = np.diff(csr.indptr).max(initial=0)
        col = np.diff(csr.tocsc().indptr).max(initial=0)
        return cls(max(1, int(max(row, col))))


@dataclass
class NormEstimate:
    value: float
    k: int
    epsilon: float | None
    repetitions: int
    means: tuple[float, ...] = ()


@dataclass
class RejectionOutcome:
    index: int | None
    accepted: bool
    attempts: int
    m_bound: float
    n_estimate: float


@dataclass
class CoordinateDescentState:
    w: np.ndarray
    iteration: int = 0


@dataclass(frozen=True)
class ComplexityParams:
    gamma: float
    kappa: float
    kappa_F: float | None = None

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not self.kappa >= 1:
            raise ValueError(f"kappa must be >= 1, got {self.kappa}")
        if self.kappa_F is not None and self.kappa_F < self.kappa * (1 - 1e-12):
            raise ValueError("kappa_F must be >= kappa")

    @classmethod
    def from_dense(cls, A, y) -> "ComplexityParams":
        """Exact parameters of a materialized instance (``A`` used as given)."""
        A = np.asarray(A, dtype=float)
        y = np.asarray(y, dtype=float)
        s = np.linalg.svd(A, compute_uv=False)
        tol = s.max() * max(A.shape) * np.finfo(float).eps
        nz = s[s > tol]
        proj = A @ (np.linalg.pinv(A) @ y)
        gamma = min(1.0, np.linalg.norm(proj) / np.linalg.norm(y))
        kappa = nz.max() / nz.min()
        return cls(gamma=gamma, kappa=max(1.0, kappa),
                   kappa_F=max(kappa, np.linalg.norm(A) / nz.min()))


def _check_rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


class _ChargeCache:
    """Memoizes f(key) together with the ledger delta it caused."""

    def __init__(self, ledgers):
        # Views may carry distinct ledgers (A and y are independent objects).
        self.ledgers = list({id(l): l for l in ledgers}.values())
        self.cache = {}

    def get(self, key, fn, times: int = 1):
        """Value of ``fn()`` for ``key``, charged as if evaluated ``times`` times."""
        hit = self.cache.get(key)
        if hit is None:
            before = [l.snapshot() for l in self.ledgers]
            value = fn()
            deltas = [l.delta(b) for l, b in zip(self.ledgers, before)]
            self.cache[key] = hit = (value, deltas)
            times -= 1
        value, deltas = hit
        if times:
            for ledger, d in zip(self.ledgers, deltas):
                ledger.add(d, times)
        return value

    def get_many(self, keys: np.ndarray, fn) -> np.ndarray:
        uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
        vals = np.array([self.get(int(k), lambda k=int(k): fn(k), int(c))
                         for k, c in zip(uniq, counts)], dtype=float)
        return vals[inverse]


def _z_numerator(A: SqMatrixView, y: SqVectorView, j: int) -> tuple[float, float]:
    """Return ``(y_j, A_{:,j}^T A y)`` using sparse extractions."""
    col_rows, col_vals = A.col_nonzeros(j)
    colj = dict(zip(col_rows.tolist(), col_vals.tolist()))
    needed = set()
    for i in col_rows.tolist():
        idx, _ = A.row_nonzeros(i)
        needed.update(idx.tolist())
    needed.add(j)
    total = 0.0
    yj = 0.0
    for jj in sorted(needed):
        yv = y.entry(jj)
        if jj == j:
            yj = yv
        if jj != j and not colj:
            continue
        rows, vals = A.col_nonzeros(jj) if jj != j else (col_rows, col_vals)
        inner = sum(colj.get(r, 0.0) * v for r, v in zip(rows.tolist(), vals.tolist()))
        total += inner * yv
    return yj, total


def norm_sample_value(A: SqMatrixView, y: SqVectorView, j: int, y_norm_sq: float) -> float:
    """One draw of ``Z = ||y||^2 / y_j * (A_{:,j}^T A y)`` at a given index ``j``."""
    yj, num = _z_numerator(A, y, j)
    if yj == 0:
        raise NoDistributionError(f"index {j} has zero weight in y")
    return y_norm_sq * num / yj


def estimate_norm_squared(A: SqMatrixView, y: SqVectorView, k: int, repetitions: int = 9,
                          rng=None, epsilon: float | None = None, memoize: bool = True) -> NormEstimate:
    """Median of ``repetitions`` averages of ``k`` draws of ``Z``; ``E[Z] = ||Ay||^2``."""
    if k < 1:
        raise ValueError("k must be a positive integer")
    if repetitions < 1 or repetitions % 2 == 0:
        raise ValueError("repetitions must be a positive odd integer")
    rng = _check_rng(rng)
    y_norm = y.norm()
    if y_norm == 0:
        raise NoDistributionError("y is the zero vector")
    y_norm_sq = y_norm * y_norm
    draws = y.sample_many(rng, k * repetitions)
    if memoize:
        cache = _ChargeCache([A.ledger, y.ledger])
        z = cache.get_many(draws, lambda j: norm_sample_value(A, y, j, y_norm_sq))
    else:
        z = np.array([norm_sample_value(A, y, int(j), y_norm_sq) for j in draws])
    means = z.reshape(repetitions, k).mean(axis=1)
    return NormEstimate(value=max(0.0, float(np.median(means))), k=k, epsilon=epsilon,
                        repetitions=repetitions, means=tuple(means.tolist()))


def optimal_norm_samples(A, y, epsilon: float) -> int:
    """``ceil(4 eps^-2 ||y||^2 ||A^T A y||^2 / ||Ay||^4)`` evaluated densely."""
    A = np.asarray(A, dtype=float)
    y = np.asarray(y, dtype=float)
    ay = A @ y
    v = 4 / epsilon**2 * (y @ y) * np.sum((A.T @ ay) ** 2) / (ay @ ay) ** 2
    return _ceil(v)


def _ceil(v: float) -> int:
    # Guards against 400.00000000000006 style rounding in closed forms.
    return max(1, math.ceil(round(v, 9)))


def required_samples(params: ComplexityParams, epsilon: float) -> int:
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    return _ceil(4 * params.kappa**2 / (epsilon**2 * params.gamma**2))


def estimate_norm_squared_auto(A, y, params: ComplexityParams, epsilon: float,
                               repetitions: int = 9, rng=None) -> NormEstimate:
    return estimate_norm_squared(A, y, required_samples(params, epsilon), repetitions, rng, epsilon)


def _sample_column(A: SqMatrixView, y: SqVectorView, rng, retries: int = 100) -> int:
    for _ in range(retries):
        j = y.sample(rng)
        try:
            return A.col_view(j).sample(rng)
        except NoDistributionError:
            continue
    raise NoDistributionError("sampled columns were all zero after 100 retries")


def approx_sample(A: SqMatrixView, y: SqVectorView, rng) -> int:
    """Row ``i`` with probability ``sum_j A_ij^2/||A_:j||^2 * y_j^2/||y||^2``."""
    return _sample_column(A, y, _check_rng(rng))


def approx_sample_many(A: SqMatrixView, y: SqVectorView, size: int, rng) -> np.ndarray:
    """``size`` independent :func:`approx_sample` draws, grouped by column."""
    rng = _check_rng(rng)
    js = y.sample_many(rng, size)
    out = np.empty(size, dtype=np.int64)
    uniq, inverse, counts = np.unique(js, return_inverse=True, return_counts=True)
    for u, (j, c) in enumerate(zip(uniq, counts)):
        out[inverse == u] = A.col_view(int(j)).sample_many(rng, int(c))
    return out


def approx_probabilities(A, y) -> np.ndarray:
    """Dense evaluation of the approximate-sampling distribution."""
    A = np.asarray(A, dtype=float)
    y = np.asarray(y, dtype=float)
    colsq = np.sum(A * A, axis=0)
    w = np.divide(y * y, colsq, out=np.zeros_like(y), where=colsq > 0)
    p = (A * A) @ w
    return p / (y @ y)


def rejection_bound(params: ComplexityParams, t: int) -> float:
    if t < 1:
        raise ValueError("t must be a positive integer")
    return params.kappa**2 * t / params.gamma**2


def row_quantities(A: SqMatrixView, y: SqVectorView, i: int, y_norm_sq: float) -> tuple[float, float]:
    """Exact ``(p_i, (Ay)_i)`` from one row extraction plus its columns."""
    idx, vals = A.row_nonzeros(i)
    p = 0.0
    ay = 0.0
    for j, a in zip(idx.tolist(), vals.tolist()):
        _, cvals = A.col_nonzeros(j)
        yj = y.entry(j)
        p += a * a / float(cvals @ cvals) * yj * yj / y_norm_sq
        ay += a * yj
    return p, ay


def _acceptance(p: float, ay: float, m_bound: float, n_estimate: float) -> float:
    acc = ay * ay / (2 * n_estimate * m_bound * p)
    if acc > 1 + 1e-12:
        raise BoundViolationError(
            f"acceptance probability {acc:.6g} > 1; m_bound or n_estimate is invalid")
    return acc


def exact_sample(A: SqMatrixView, y: SqVectorView, m_bound: float, n_estimate: float,
                 max_attempts: int, rng) -> RejectionOutcome:
    """Rejection sampling from ``(Ay)_i^2 / ||Ay||^2``."""
    if max_attempts < 1:
        raise ValueError("max_attempts must be positive")
    rng = _check_rng(rng)
    y_norm_sq = y.norm() ** 2
    for attempt in range(1, max_attempts + 1):
        i = _sample_column(A, y, rng)
        p, ay = row_quantities(A, y, i, y_norm_sq)
        if rng.random() < _acceptance(p, ay, m_bound, n_estimate):
            return RejectionOutcome(i, True, attempt, m_bound, n_estimate)
    return RejectionOutcome(None, False, max_attempts, m_bound, n_estimate)


@dataclass
class RejectionBatch:
    indices: np.ndarray
    attempts: int
    m_bound: float
    n_estimate: float

    @property
    def acceptance_rate(self) -> float:
        return len(self.indices) / self.attempts if self.attempts else 0.0


def exact_sample_many(A: SqMatrixView, y: SqVectorView, m_bound: float, n_estimate: float,
                      accepted: int, rng, max_attempts: int | None = None,
                      chunk: int = 1 << 15) -> RejectionBatch:
    """Draw until ``accepted`` samples pass; same law and charges as repeated
    :func:`exact_sample` calls, evaluated in vectorized chunks."""
    rng = _check_rng(rng)
    y_norm_sq = y.norm() ** 2
    cache = _ChargeCache([A.ledger, y.ledger])
    got: list[np.ndarray] = []
    n_got = 0
    attempts = 0
    while n_got < accepted:
        if max_attempts is not None and attempts >= max_attempts:
            break
        size = chunk if max_attempts is None else min(chunk, max_attempts - attempts)
        rows = approx_sample_many(A, y, size, rng)
        u = rng.random(size)
        acc = cache.get_many(rows, lambda i: _acceptance(
            *row_quantities(A, y, i, y_norm_sq), m_bound, n_estimate))
        hits = np.flatnonzero(u < acc)
        need = accepted - n_got
        if len(hits) >= need:
            # Stop at the attempt that produced the last needed sample.
            last = hits[need - 1]
            attempts += last + 1
            got.append(rows[hits[:need]])
            n_got = accepted
            break
        attempts += size
        got.append(rows[hits])
        n_got += len(hits)
    idx = np.concatenate(got) if got else np.empty(0, dtype=np.int64)
    return RejectionBatch(idx, attempts, m_bound, n_estimate)


def random_sparse_matrix(rows: int, cols: int, t: int, rng) -> np.ndarray:
    """Dense ``rows x cols`` matrix with at most ``t`` non-zeros per row and
    column and none of either empty: a sum of ``t`` random partial
    permutations with Gaussian weights, cropped from the larger square."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    size = max(rows, cols)
    while True:
        a = np.zeros((size, size))
        for _ in range(t):
            a[np.arange(size), rng.permutation(size)] += rng.standard_normal(size)
        a = a[:rows, :cols]
        if np.all(np.any(a != 0, axis=0)) and np.all(np.any(a != 0, axis=1)):
            return a


def exact_distribution(A, y) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    ay = A @ np.asarray(y, dtype=float)
    return ay * ay / (ay @ ay)


def coordinate_descent_step(state: CoordinateDescentState, A: SqMatrixView, y: SqVectorView,
                            i_k: int) -> CoordinateDescentState:
    idx, vals = A.row_nonzeros(i_k)
    diag = 0.0
    dot = 0.0
    for j, a in zip(idx.tolist(), vals.tolist()):
        dot += a * state.w[j]
        if j == i_k:
            diag = a
    if diag == 0:
        raise ZeroDivisionError(f"A[{i_k}, {i_k}] is zero")
    w = state.w.copy()
    w[i_k] -= (dot - y.entry(i_k)) / diag
    return CoordinateDescentState(w, state.iteration + 1)


def coordinate_descent(A: MaterializedMatrix, y: SqVectorView, w0, max_iter: int, rng,
                       tol: float | None = 1e-8):
    """Uniform random coordinate descent; returns the final state and the
    residual history (monitoring uses the uncharged dense copy of ``A``)."""
    rng = _check_rng(rng)
    dense = A.dense()
    target = y.dense() if hasattr(y, "dense") else None
    state = CoordinateDescentState(np.asarray(w0, dtype=float).copy())
    history = []
    for _ in range(max_iter):
        if target is not None:
            r = float(np.linalg.norm(dense @ state.w - target))
            history.append(r)
            if tol is not None and r <= tol:
                break
        state = coordinate_descent_step(state, A, y, int(rng.integers(A.rows)))
    if target is not None:
        history.append(float(np.linalg.norm(dense @ state.w - target)))
    return state, history
