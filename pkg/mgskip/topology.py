"""
Network graphs and Metropolis–Hastings mixing matrices.

Graphs are plain immutable edge sets over nodes ``0..n-1``. The mixing
matrix carries its full spectrum because every later stage (Chebyshev
weight, round count, diagnostics) is a function of it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations
from pathlib import Path

import networkx as nx
import numpy as np
import pandas as pd
from scipy import linalg

from mgskip.errors import (
    ConnectivityError,
    DataParseError,
    InfeasibleConnectivityError,
    InvalidSizeError,
    ParameterError,
)

logger = logging.getLogger(__name__)

Edge = tuple[int, int]


@dataclass(frozen=True)
class Graph:
    """Undirected simple graph on nodes ``0..n-1``.

    Edges are stored normalized as ``(i, j)`` with ``i < j`` and sorted, so two
    graphs with the same edge set compare equal.
    """

    n: int
    edges: tuple[Edge, ...]

    def __post_init__(self) -> None:
        if self.n < 1:
            raise InvalidSizeError(f"graph needs at least one node, got n={self.n}")
        normalized = set()
        for i, j in self.edges:
            if i == j:
                raise ParameterError(f"self-loop at node {i}")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ParameterError(f"edge ({i}, {j}) outside 0..{self.n - 1}")
            edge = (min(i, j), max(i, j))
            if edge in normalized:
                raise ParameterError(f"duplicate edge {edge}")
            normalized.add(edge)
        object.__setattr__(self, "edges", tuple(sorted(normalized)))

    @cached_property
    def adjacency(self) -> tuple[tuple[int, ...], ...]:
        nbrs: list[list[int]] = [[] for _ in range(self.n)]
        for i, j in self.edges:
            nbrs[i].append(j)
            nbrs[j].append(i)
        return tuple(tuple(sorted(row)) for row in nbrs)

    def neighbors(self, i: int) -> tuple[int, ...]:
        return self.adjacency[i]

    @property
    def degrees(self) -> np.ndarray:
        return np.array([len(row) for row in self.adjacency], dtype=int)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.n))
        g.add_edges_from(self.edges)
        return g

    @cached_property
    def is_connected(self) -> bool:
        return nx.is_connected(self.to_networkx())


def build_ring(n: int) -> Graph:
    """Ring ``0-1-…-(n-1)-0``; every node has degree 2."""
    if n < 3:
        raise InvalidSizeError(f"a ring needs n >= 3, got n={n}")
    return Graph(n, tuple((i, (i + 1) % n) for i in range(n)))


def complete_graph(n: int) -> Graph:
    return Graph(n, tuple(combinations(range(n), 2)))


def build_random_connectivity(n: int, iota: float, seed: int) -> Graph:
    """
    Random connected graph with exactly ``floor(iota * n(n-1)/2)`` edges.

    A random recursive spanning tree is laid down first (node ``perm[k]``
    attaches to a uniformly chosen earlier node), then the remaining budget is
    filled with distinct non-tree pairs sampled uniformly without replacement.

    Raises:
        InfeasibleConnectivityError: the edge budget is below ``n - 1``.
    """
    if not 0.0 < iota <= 1.0:
        raise ParameterError(f"connectivity ratio must lie in (0, 1], got {iota}")
    if n < 1:
        raise InvalidSizeError(f"graph needs at least one node, got n={n}")
    m = int(np.floor(iota * n * (n - 1) / 2))
    if m < n - 1:
        raise InfeasibleConnectivityError(
            f"{m} edges cannot connect {n} nodes (need at least {n - 1})"
        )

    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    tree = set()
    for k in range(1, n):
        parent = perm[rng.integers(k)]
        child = perm[k]
        tree.add((int(min(parent, child)), int(max(parent, child))))

    candidates = [e for e in combinations(range(n), 2) if e not in tree]
    extra_count = m - len(tree)
    picked = rng.choice(len(candidates), size=extra_count, replace=False) if extra_count else []
    edges = sorted(tree | {candidates[int(k)] for k in picked})

    graph = Graph(n, tuple(edges))
    logger.debug(f"random graph n={n} iota={iota} seed={seed}: {graph.num_edges} edges")
    return graph


@dataclass(frozen=True, eq=False)
class MixingMatrix:
    """Symmetric doubly stochastic weights with their spectrum.

    ``eigenvalues`` are sorted in decreasing order, so ``eigenvalues[0]`` is the
    consensus eigenvalue 1.
    """

    w: np.ndarray = field(repr=False)
    rho: float
    eigenvalues: np.ndarray = field(repr=False)
    graph: Graph | None = field(default=None, repr=False, compare=False)

    @property
    def n(self) -> int:
        return self.w.shape[0]

    @classmethod
    def from_weights(cls, w: np.ndarray, graph: Graph | None = None) -> MixingMatrix:
        """Validate ``w`` and attach its spectrum."""
        w = np.array(w, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ParameterError(f"mixing matrix must be square, got shape {w.shape}")
        if not np.array_equal(w, w.T):
            raise ParameterError("mixing matrix is not symmetric")
        if np.any(w < 0) or np.any(w > 1):
            raise ParameterError("mixing matrix entries must lie in [0, 1]")
        if np.max(np.abs(w.sum(axis=1) - 1.0)) > 1e-12:
            raise ParameterError("mixing matrix rows do not sum to 1")
        if graph is not None:
            if graph.n != w.shape[0]:
                raise ParameterError("mixing matrix size differs from graph size")
            allowed = np.eye(graph.n, dtype=bool)
            for i, j in graph.edges:
                allowed[i, j] = allowed[j, i] = True
            if np.any(w[~allowed] != 0):
                raise ParameterError("mixing matrix has weight on a non-edge")

        eigenvalues = np.sort(linalg.eigh(w, eigvals_only=True))[::-1]
        rho = 0.0 if w.shape[0] == 1 else float(max(abs(eigenvalues[1]), abs(eigenvalues[-1])))
        return cls(w=w, rho=rho, eigenvalues=eigenvalues, graph=graph)


def metropolis_weights(g: Graph) -> MixingMatrix:
    """
    Metropolis–Hastings weights.

    ``w_ij = 1 / (1 + max(deg_i, deg_j))`` on edges and
    ``w_ii = 1 - sum_{j != i} w_ij``.

    Raises:
        ConnectivityError: ``g`` is disconnected.
    """
    if not g.is_connected:
        raise ConnectivityError(f"graph with n={g.n} and {g.num_edges} edges is disconnected")
    deg = g.degrees
    w = np.zeros((g.n, g.n))
    for i, j in g.edges:
        weight = 1.0 / (1.0 + max(deg[i], deg[j]))
        w[i, j] = weight
        w[j, i] = weight
    np.fill_diagonal(w, 1.0 - w.sum(axis=1))
    mixing = MixingMatrix.from_weights(w, graph=g)
    logger.debug(f"metropolis weights n={g.n}: rho={mixing.rho:.6f}")
    return mixing


def spectral_gap(w: MixingMatrix) -> float:
    """``max(|λ_2|, |λ_n|)``; 0 for a single node."""
    return w.rho


# ─── Plain-text exchange formats ─────────────────────────────────────────────


def write_edge_list(g: Graph, path: str | Path) -> Path:
    """Write ``n m`` followed by one ``i j`` line per edge (0-indexed)."""
    path = Path(path)
    lines = [f"{g.n} {g.num_edges}"] + [f"{i} {j}" for i, j in g.edges]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_edge_list(path: str | Path) -> Graph:
    lines = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise DataParseError("missing 'n m' header", 1)
    try:
        n, m = (int(tok) for tok in lines[0].split())
    except ValueError:
        raise DataParseError(f"bad header {lines[0]!r}", 1) from None
    edges = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            i, j = (int(tok) for tok in line.split())
        except ValueError:
            raise DataParseError(f"bad edge {line!r}", lineno) from None
        edges.append((i, j))
    if len(edges) != m:
        raise DataParseError(f"header declares {m} edges, found {len(edges)}", 1)
    return Graph(n, tuple(edges))


def write_mixing_csv(mixing: MixingMatrix, path: str | Path) -> Path:
    """One CSV row per node, no header."""
    path = Path(path)
    pd.DataFrame(mixing.w).to_csv(path, header=False, index=False, float_format="%.17g")
    return path
