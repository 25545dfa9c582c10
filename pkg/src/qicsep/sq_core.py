"""Sampling-and-query (SQ) access to vectors and matrices.

A vector view answers three kinds of requests: entry queries, indices drawn
with probability ``v_i**2 / ||v||**2``, and the norm.  A matrix view exposes
such a vector view for every row, every column, and for the vectors of row
and column norms.  Every primitive call is charged to a :class:`QueryLedger`.

The materialized views are backed by :class:`WeightedIndexTree`, a complete
binary tree over squared magnitudes that samples and updates in
``O(log n)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import scipy.sparse as sp


class NoDistributionError(ValueError):
    """Raised when sampling from an all-zero weight vector."""


@dataclass
class QueryLedger:
    """Counters for every SQ primitive and every underlying oracle call.

    ``extracted_entries`` is not a primitive: it tallies how many non-zeros
    row/column extractions returned, so that the "one extraction = t entry
    queries" cost model can be reported next to the extraction counts.  It is
    therefore excluded from :meth:`total`.
    """

    entry_queries: int = 0
    row_samples: int = 0
    col_samples: int = 0
    row_norm_samples: int = 0
    col_norm_samples: int = 0
    norm_queries: int = 0
    vector_samples: int = 0
    row_extractions: int = 0
    col_extractions: int = 0
    oracle_calls: int = 0
    f_calls: int = 0
    extracted_entries: int = 0

    _NOT_PRIMITIVE = ("extracted_entries",)
    _UNDERLYING = ("oracle_calls", "f_calls")

    def charge(self, counter: str, k: int = 1) -> None:
        if k < 0:
            raise ValueError("ledger counters are monotone")
        setattr(self, counter, getattr(self, counter) + k)

    def counters(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self)
                if f.name not in self._NOT_PRIMITIVE}

    def total(self) -> int:
        return sum(self.counters().values())

    def sq_total(self) -> int:
        """Total of SQ primitives only (oracle and f calls excluded)."""
        return sum(v for k, v in self.counters().items() if k not in self._UNDERLYING)

    def entry_equivalent_cost(self) -> int:
        """Cost when each extraction is billed per non-zero it returned."""
        return (self.sq_total() - self.row_extractions - self.col_extractions
                + self.extracted_entries)

    def snapshot(self) -> "QueryLedger":
        return QueryLedger(**asdict(self))

    def delta(self, before: "QueryLedger") -> "QueryLedger":
        return QueryLedger(**{k: v - getattr(before, k) for k, v in asdict(self).items()})

    def add(self, other: "QueryLedger", times: int = 1) -> None:
        for k, v in asdict(other).items():
            self.charge(k, v * times)

    def __iadd__(self, other: "QueryLedger") -> "QueryLedger":
        self.add(other)
        return self

    def as_dict(self) -> dict[str, int]:
        return asdict(self)


class WeightedIndexTree:
    """Complete binary tree of squared magnitudes.

    Leaf ``i`` stores ``values[i]**2``; each internal node stores the sum of
    its children.  Internal nodes are recomputed from their children on every
    update, and the whole tree is rebuilt every ``REBUILD_EVERY`` updates.
    """

    REBUILD_EVERY = 1 << 20

    def __init__(self, values):
        values = np.asarray(values, dtype=float).ravel()
        if values.size == 0:
            raise ValueError("cannot build a tree over an empty vector")
        if not np.all(np.isfinite(values)):
            raise ValueError("tree values must be finite")
        self.size = int(values.size)
        self.depth = max(0, math.ceil(math.log2(self.size)))
        self.capacity = 1 << self.depth
        self.node_sums = np.zeros(2 * self.capacity)
        self.node_sums[self.capacity:self.capacity + self.size] = values * values
        self._updates = 0
        self._rebuild_internal()

    def _rebuild_internal(self):
        s = self.node_sums
        width = self.capacity
        while width > 1:
            half = width // 2
            s[half:width] = s[width:2 * width:2] + s[width + 1:2 * width:2]
            width = half

    def rebuild(self):
        self._rebuild_internal()
        self._updates = 0

    @property
    def root(self) -> float:
        return float(self.node_sums[1])

    def leaf(self, i: int) -> float:
        return float(self.node_sums[self.capacity + i])

    def leaves(self) -> np.ndarray:
        return self.node_sums[self.capacity:self.capacity + self.size].copy()

    def probabilities(self) -> np.ndarray:
        root = self.root
        if root <= 0:
            raise NoDistributionError("all weights are zero")
        return self.leaves() / root

    def update(self, i: int, new_value: float) -> None:
        if not 0 <= i < self.size:
            raise IndexError(f"index {i} out of range for tree of size {self.size}")
        if not math.isfinite(new_value):
            raise ValueError("tree values must be finite")
        s = self.node_sums
        node = self.capacity + i
        s[node] = new_value * new_value
        node //= 2
        while node >= 1:
            s[node] = s[2 * node] + s[2 * node + 1]
            node //= 2
        self._updates += 1
        if self._updates >= self.REBUILD_EVERY:
            self.rebuild()

    def sample(self, rng: np.random.Generator) -> int:
        s = self.node_sums
        root = s[1]
        if root <= 0:
            raise NoDistributionError("all weights are zero")
        u = rng.random() * root
        node = 1
        while node < self.capacity:
            left = s[2 * node]
            right = s[2 * node + 1]
            if (u < left and left > 0) or right <= 0:
                node = 2 * node
            else:
                u -= left
                node = 2 * node + 1
        return node - self.capacity

    def sample_many(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Vectorised :meth:`sample`; consumes the same uniforms in order."""
        s = self.node_sums
        root = s[1]
        if root <= 0:
            raise NoDistributionError("all weights are zero")
        u = rng.random(size) * root
        node = np.ones(size, dtype=np.int64)
        for _ in range(self.depth):
            left = s[2 * node]
            right = s[2 * node + 1]
            go_left = ((u < left) & (left > 0)) | (right <= 0)
            u = np.where(go_left, u, u - left)
            node = 2 * node + (~go_left)
        return node - self.capacity


def build_weighted_tree(values) -> WeightedIndexTree:
    return WeightedIndexTree(values)


def tree_sample(tree: WeightedIndexTree, rng: np.random.Generator) -> int:
    return tree.sample(rng)


def tree_update(tree: WeightedIndexTree, i: int, new_value: float) -> None:
    tree.update(i, new_value)


class SqVectorView:
    """Interface for SQ access to a vector of length ``length``."""

    length: int
    ledger: QueryLedger
    sample_counter = "vector_samples"

    def entry(self, i: int) -> float:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator) -> int:
        raise NotImplementedError

    def sample_many(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return np.array([self.sample(rng) for _ in range(size)], dtype=np.int64)

    def norm(self) -> float:
        raise NotImplementedError


class SparseVectorView(SqVectorView):
    """Materialized vector; the sampling tree only spans the non-zeros."""

    def __init__(self, length: int, indices, values, ledger: QueryLedger | None = None,
                 sample_counter: str = "vector_samples"):
        indices = np.asarray(indices, dtype=np.int64).ravel()
        values = np.asarray(values, dtype=float).ravel()
        keep = values != 0
        self.indices = indices[keep]
        self.values = values[keep]
        self.length = int(length)
        self.ledger = ledger if ledger is not None else QueryLedger()
        self.sample_counter = sample_counter
        self._lookup = dict(zip(self.indices.tolist(), self.values.tolist()))
        self._tree = WeightedIndexTree(self.values) if self.values.size else None

    def entry(self, i: int) -> float:
        self.ledger.charge("entry_queries")
        return self._lookup.get(int(i), 0.0)

    def sample(self, rng: np.random.Generator) -> int:
        self.ledger.charge(self.sample_counter)
        if self._tree is None:
            raise NoDistributionError("cannot sample from a zero vector")
        return int(self.indices[self._tree.sample(rng)])

    def sample_many(self, rng: np.random.Generator, size: int) -> np.ndarray:
        self.ledger.charge(self.sample_counter, size)
        if self._tree is None:
            raise NoDistributionError("cannot sample from a zero vector")
        return self.indices[self._tree.sample_many(rng, size)]

    def norm(self) -> float:
        self.ledger.charge("norm_queries")
        return math.sqrt(self._tree.root) if self._tree is not None else 0.0

    # Uncharged introspection, for oracles and tests.
    def dense(self) -> np.ndarray:
        out = np.zeros(self.length)
        out[self.indices] = self.values
        return out

    def probabilities(self) -> np.ndarray:
        out = np.zeros(self.length)
        if self._tree is None:
            raise NoDistributionError("zero vector")
        out[self.indices] = self._tree.probabilities()
        return out


def vector_view(values, ledger: QueryLedger | None = None,
                sample_counter: str = "vector_samples") -> SparseVectorView:
    values = np.asarray(values, dtype=float).ravel()
    if not np.all(np.isfinite(values)):
        raise ValueError("vector entries must be finite")
    idx = np.flatnonzero(values)
    return SparseVectorView(values.size, idx, values[idx], ledger, sample_counter)


class SqMatrixView:
    """Interface for SQ access to a matrix.

    Besides the four vector views of the definition, ``row_nonzeros`` and
    ``col_nonzeros`` return all non-zeros of a row or column in one call
    (the sparse "extraction" primitive).
    """

    rows: int
    cols: int
    ledger: QueryLedger

    def entry(self, i: int, j: int) -> float:
        raise NotImplementedError

    def row_view(self, i: int) -> SqVectorView:
        raise NotImplementedError

    def col_view(self, j: int) -> SqVectorView:
        raise NotImplementedError

    def row_norms_view(self) -> SqVectorView:
        raise NotImplementedError

    def col_norms_view(self) -> SqVectorView:
        raise NotImplementedError

    def row_nonzeros(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def col_nonzeros(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    @property
    def T(self) -> "SqMatrixView":
        return TransposedView(self)


class MaterializedMatrix(SqMatrixView):
    """SQ access to an explicitly stored (sparse or dense) matrix."""

    def __init__(self, matrix, ledger: QueryLedger | None = None):
        csr = sp.csr_matrix(matrix, dtype=float)
        csr.eliminate_zeros()
        if csr.size and not np.all(np.isfinite(csr.data)):
            raise ValueError("matrix entries must be finite")
        self._csr = csr
        self._csc = csr.tocsc()
        self.rows, self.cols = csr.shape
        self.ledger = ledger if ledger is not None else QueryLedger()
        self._row_views: dict[int, SparseVectorView] = {}
        self._col_views: dict[int, SparseVectorView] = {}
        self._row_norms = None
        self._col_norms = None

    def _row(self, i):
        lo, hi = self._csr.indptr[i], self._csr.indptr[i + 1]
        return self._csr.indices[lo:hi], self._csr.data[lo:hi]

    def _col(self, j):
        lo, hi = self._csc.indptr[j], self._csc.indptr[j + 1]
        return self._csc.indices[lo:hi], self._csc.data[lo:hi]

    def entry(self, i: int, j: int) -> float:
        if not (0 <= i < self.rows and 0 <= j < self.cols):
            raise IndexError(f"entry ({i}, {j}) out of range")
        self.ledger.charge("entry_queries")
        return float(self._csr[i, j])

    def row_view(self, i: int) -> SparseVectorView:
        if i not in self._row_views:
            idx, val = self._row(i)
            self._row_views[i] = SparseVectorView(self.cols, idx, val, self.ledger, "row_samples")
        return self._row_views[i]

    def col_view(self, j: int) -> SparseVectorView:
        if j not in self._col_views:
            idx, val = self._col(j)
            self._col_views[j] = SparseVectorView(self.rows, idx, val, self.ledger, "col_samples")
        return self._col_views[j]

    def row_norms_view(self) -> SparseVectorView:
        if self._row_norms is None:
            norms = np.sqrt(np.asarray(self._csr.multiply(self._csr).sum(axis=1)).ravel())
            self._row_norms = vector_view(norms, self.ledger, "row_norm_samples")
        return self._row_norms

    def col_norms_view(self) -> SparseVectorView:
        if self._col_norms is None:
            norms = np.sqrt(np.asarray(self._csc.multiply(self._csc).sum(axis=0)).ravel())
            self._col_norms = vector_view(norms, self.ledger, "col_norm_samples")
        return self._col_norms

    def row_nonzeros(self, i: int):
        idx, val = self._row(i)
        self.ledger.charge("row_extractions")
        self.ledger.charge("extracted_entries", len(idx))
        return idx.copy(), val.copy()

    def col_nonzeros(self, j: int):
        idx, val = self._col(j)
        self.ledger.charge("col_extractions")
        self.ledger.charge("extracted_entries", len(idx))
        return idx.copy(), val.copy()

    def dense(self) -> np.ndarray:
        """Uncharged copy of the matrix, for oracles and monitoring."""
        return self._csr.toarray()

    def sparse(self) -> sp.csr_matrix:
        return self._csr.copy()


class TransposedView(SqMatrixView):
    """Rows of the transpose are columns of the base; charges go to the base."""

    def __init__(self, base: SqMatrixView):
        self.base = base
        self.rows, self.cols = base.cols, base.rows
        self.ledger = base.ledger

    def entry(self, i, j):
        return self.base.entry(j, i)

    def row_view(self, i):
        return self.base.col_view(i)

    def col_view(self, j):
        return self.base.row_view(j)

    def row_norms_view(self):
        return self.base.col_norms_view()

    def col_norms_view(self):
        return self.base.row_norms_view()

    def row_nonzeros(self, i):
        return self.base.col_nonzeros(i)

    def col_nonzeros(self, j):
        return self.base.row_nonzeros(j)

    @property
    def T(self):
        return self.base

    def dense(self):
        return self.base.dense().T
