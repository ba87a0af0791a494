"""Undirected graphs in CSR form, normalized Laplacians, and Dirichlet energy.

The Laplacian used everywhere downstream is the symmetric normalized form
with self loops,

    Lhat = I - Dt^{-1/2} At Dt^{-1/2},   At = A + I,  Dt = D + I,

whose spectrum lies in [0, 2]. Dt^{1/2} applied to the all-ones vector spans
its null space on connected graphs. Isolated nodes are permitted; their
Laplacian row is identically zero (the self loop normalizes to 1 - 1).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class GraphError(ValueError):
    """Raised for malformed graph input."""


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable undirected graph.

    Attributes
    ----------
    n : int
        Node count.
    edges : (2m, 2) int64 array
        Directed pair list; each undirected edge is stored in both
        directions, lexicographically sorted, without duplicates or
        self loops.
    csr : scipy.sparse.csr_array
        Binary n x n adjacency built from ``edges``.
    degree : (n,) int64 array
        Number of incident undirected edges per node.
    """

    n: int
    edges: np.ndarray
    csr: sp.csr_array
    degree: np.ndarray

    @property
    def num_undirected_edges(self) -> int:
        return self.edges.shape[0] // 2


@dataclass(frozen=True, eq=False)
class NormalizedLaplacian:
    """Symmetric normalized Laplacian with self loops, stored as CSR."""

    csr: sp.csr_array
    n: int

    def dense(self) -> np.ndarray:
        return self.csr.toarray()


def build_graph(n: int, undirected_edges: Iterable[Sequence[int]]) -> Graph:
    """Build an immutable graph from an undirected edge list.

    Each input pair (i, j) is stored in both directions; duplicates
    (including reversed duplicates) are merged.

    Raises
    ------
    GraphError
        If ``n`` is not positive, an endpoint is out of range, or a self
        loop appears in the input.
    """
    if not isinstance(n, (int, np.integer)) or n <= 0:
        raise GraphError(f"node count must be a positive integer, got {n!r}")

    seen: set[tuple[int, int]] = set()
    for k, pair in enumerate(undirected_edges):
        if len(pair) != 2:
            raise GraphError(f"edges[{k}] = {pair!r} is not a pair")
        i, j = int(pair[0]), int(pair[1])
        if not (0 <= i < n and 0 <= j < n):
            raise GraphError(f"edges[{k}] = ({i}, {j}): endpoint out of range for n={n}")
        if i == j:
            raise GraphError(f"edges[{k}] = ({i}, {j}): self loops are not allowed")
        seen.add((min(i, j), max(i, j)))

    if seen:
        und = np.array(sorted(seen), dtype=np.int64)
        directed = np.vstack([und, und[:, ::-1]])
        order = np.lexsort((directed[:, 1], directed[:, 0]))
        directed = directed[order]
    else:
        directed = np.empty((0, 2), dtype=np.int64)

    src, dst = directed[:, 0], directed[:, 1]
    data = np.ones(directed.shape[0], dtype=np.float64)
    adj = sp.csr_array((data, (src, dst)), shape=(n, n))
    degree = np.bincount(src, minlength=n).astype(np.int64)
    return Graph(n=int(n), edges=directed, csr=adj, degree=degree)


def normalized_laplacian(g: Graph) -> NormalizedLaplacian:
    """Return Lhat = I - Dt^{-1/2} (A + I) Dt^{-1/2} with Dt = D + I."""
    s = 1.0 / np.sqrt(1.0 + g.degree.astype(np.float64))
    src, dst = g.edges[:, 0], g.edges[:, 1]

    rows = np.concatenate([np.arange(g.n, dtype=np.int64), src])
    cols = np.concatenate([np.arange(g.n, dtype=np.int64), dst])
    vals = np.concatenate([1.0 - s * s, -s[src] * s[dst]])
    lap = sp.csr_array((vals, (rows, cols)), shape=(g.n, g.n))
    lap.sort_indices()
    return NormalizedLaplacian(csr=lap, n=g.n)


def laplacian_apply(lap: NormalizedLaplacian, U: np.ndarray) -> np.ndarray:
    """Sparse product Lhat @ U, applied column by column.

    ``U`` may be an (n,) vector or an (n, c) matrix; the result has the
    same shape.
    """
    U = np.asarray(U, dtype=np.float64)
    if U.shape[0] != lap.n:
        raise GraphError(f"row count {U.shape[0]} does not match Laplacian dimension {lap.n}")
    return lap.csr @ U


def dirichlet_energy(g: Graph, U: np.ndarray) -> float:
    """Degree-normalized Dirichlet energy of node features.

    E(U) = 1/2 * sum over directed pairs (i, j) of
           || U_i / sqrt(1 + d_i) - U_j / sqrt(1 + d_j) ||^2,

    so every undirected edge contributes once. Zero exactly on the
    Laplacian null space, non-negative everywhere.
    """
    U = np.asarray(U, dtype=np.float64)
    if U.ndim == 1:
        U = U.reshape(-1, 1)
    if U.ndim != 2 or U.shape[0] != g.n:
        raise GraphError(f"features must be ({g.n}, c), got shape {U.shape}")
    if g.edges.shape[0] == 0:
        return 0.0
    scaled = U / np.sqrt(1.0 + g.degree.astype(np.float64))[:, None]
    diff = scaled[g.edges[:, 0]] - scaled[g.edges[:, 1]]
    return 0.5 * float(np.sum(diff * diff))
