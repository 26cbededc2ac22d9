"""Undirected graphs in compressed sparse row form, plus small constructors."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable

import numpy as np
import scipy.sparse as sp


class DomainError(ValueError):
    """Raised when a graph violates a structural precondition (e.g. connectivity)."""


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable undirected graph.

    Every undirected edge ``{i, j}`` is stored twice (row ``i`` holds ``j`` and
    row ``j`` holds ``i``). Neighbor lists are sorted and self-loops are never
    stored.
    """

    num_nodes: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    _degrees: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        ro = np.ascontiguousarray(self.row_offsets, dtype=np.int64)
        ci = np.ascontiguousarray(self.col_indices, dtype=np.int64)
        if ro.shape != (self.num_nodes + 1,) or ro[0] != 0 or ro[-1] != ci.size:
            raise ValueError("row_offsets inconsistent with col_indices")
        if np.any(np.diff(ro) < 0):
            raise ValueError("row_offsets must be nondecreasing")
        ro.setflags(write=False)
        ci.setflags(write=False)
        object.__setattr__(self, "row_offsets", ro)
        object.__setattr__(self, "col_indices", ci)
        object.__setattr__(self, "_degrees", np.diff(ro))

    @classmethod
    def from_edges(cls, num_nodes: int, edges: Iterable[tuple[int, int]] | np.ndarray) -> "Graph":
        """Build from undirected pairs; duplicates and self-loops are dropped."""
        e = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
        e = e.reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= num_nodes):
            raise ValueError("edge endpoint out of range")
        e = e[e[:, 0] != e[:, 1]]
        both = np.concatenate([e, e[:, ::-1]])
        # sort by (row, col) then dedupe
        key = both[:, 0] * num_nodes + both[:, 1]
        key = np.unique(key)
        rows, cols = key // num_nodes, key % num_nodes
        offsets = np.zeros(num_nodes + 1, dtype=np.int64)
        np.add.at(offsets, rows + 1, 1)
        return cls(num_nodes, np.cumsum(offsets), cols)

    @property
    def num_edges(self) -> int:
        """Number of undirected edges."""
        return self.col_indices.size // 2

    @property
    def degrees(self) -> np.ndarray:
        return self._degrees

    @property
    def max_degree(self) -> int:
        return int(self._degrees.max()) if self.num_nodes else 0

    def neighbors(self, i: int) -> np.ndarray:
        return self.col_indices[self.row_offsets[i]:self.row_offsets[i + 1]]

    @cached_property
    def row_indices(self) -> np.ndarray:
        """Source node of every stored directed edge, aligned with ``col_indices``."""
        return np.repeat(np.arange(self.num_nodes), self._degrees)

    @cached_property
    def reverse_edge(self) -> np.ndarray:
        """Position of edge (j, i) for each stored edge (i, j)."""
        key = self.col_indices * self.num_nodes + self.row_indices
        fwd = self.row_indices * self.num_nodes + self.col_indices
        return np.searchsorted(fwd, key)

    def edge_list(self) -> np.ndarray:
        """Undirected edges as an (e, 2) array with i < j."""
        mask = self.row_indices < self.col_indices
        return np.stack([self.row_indices[mask], self.col_indices[mask]], axis=1)

    def adjacency(self, weights: np.ndarray | None = None) -> sp.csr_matrix:
        data = np.ones(self.col_indices.size) if weights is None else weights
        return sp.csr_matrix(
            (data, self.col_indices, self.row_offsets), shape=(self.num_nodes, self.num_nodes)
        )

    @cached_property
    def with_self_loops(self) -> "SelfLoopView":
        return SelfLoopView.build(self)

    @cached_property
    def gcn_matrix(self) -> sp.csr_matrix:
        """``D^-1/2 (A + I) D^-1/2`` with ``D`` the degree matrix of ``A + I``."""
        loops = self.with_self_loops
        d = (self._degrees + 1).astype(np.float64)
        w = 1.0 / np.sqrt(d[loops.row_indices] * d[loops.col_indices])
        return sp.csr_matrix(
            (w, loops.col_indices, loops.row_offsets), shape=(self.num_nodes, self.num_nodes)
        )

    def bfs_distances(self, source: int) -> np.ndarray:
        """Hop distances from ``source``; unreachable nodes get -1."""
        dist = np.full(self.num_nodes, -1, dtype=np.int64)
        dist[source] = 0
        queue = deque([source])
        while queue:
            u = queue.popleft()
            for w in self.neighbors(u):
                if dist[w] < 0:
                    dist[w] = dist[u] + 1
                    queue.append(w)
        return dist

    def is_connected(self) -> bool:
        return self.num_nodes == 0 or bool(np.all(self.bfs_distances(0) >= 0))

    def permuted(self, perm: np.ndarray) -> "Graph":
        """Relabel node ``i`` as ``perm[i]``."""
        perm = np.asarray(perm)
        return Graph.from_edges(self.num_nodes, perm[self.edge_list()])

    def __repr__(self):
        return f"Graph(num_nodes={self.num_nodes}, num_edges={self.num_edges})"


@dataclass(frozen=True, eq=False)
class SelfLoopView:
    """CSR structure of ``N_i ∪ {i}``, used by attention and GCN normalization."""

    num_nodes: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    row_indices: np.ndarray

    @classmethod
    def build(cls, g: Graph) -> "SelfLoopView":
        rows = np.concatenate([g.row_indices, np.arange(g.num_nodes)])
        cols = np.concatenate([g.col_indices, np.arange(g.num_nodes)])
        order = np.lexsort((cols, rows))
        rows, cols = rows[order], cols[order]
        offsets = np.concatenate([[0], np.cumsum(g.degrees + 1)])
        return cls(g.num_nodes, offsets, cols, rows)

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.row_offsets)


def grid2d(side: int) -> Graph:
    """``side x side`` lattice with 4-neighbor connectivity, no wraparound."""
    if side < 2:
        raise ValueError("grid side must be >= 2")
    idx = np.arange(side * side).reshape(side, side)
    horiz = np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], axis=1)
    vert = np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], axis=1)
    return Graph.from_edges(side * side, np.concatenate([horiz, vert]))


def cycle(n: int) -> Graph:
    if n < 3:
        raise ValueError("cycle needs at least 3 nodes")
    i = np.arange(n)
    return Graph.from_edges(n, np.stack([i, (i + 1) % n], axis=1))


def path(n: int) -> Graph:
    if n < 1:
        raise ValueError("path needs at least 1 node")
    i = np.arange(n - 1)
    return Graph.from_edges(n, np.stack([i, i + 1], axis=1))


def complete(n: int) -> Graph:
    i, j = np.triu_indices(n, k=1)
    return Graph.from_edges(n, np.stack([i, j], axis=1))


def random_connected(n: int, extra_edge_prob: float, rng: np.random.Generator) -> Graph:
    """Random spanning tree plus independent extra edges; always connected."""
    order = rng.permutation(n)
    tree = [(order[k], order[rng.integers(0, k)]) for k in range(1, n)]
    i, j = np.triu_indices(n, k=1)
    keep = rng.random(i.size) < extra_edge_prob
    extra = np.stack([i[keep], j[keep]], axis=1)
    edges = np.concatenate([np.asarray(tree, dtype=np.int64).reshape(-1, 2), extra])
    return Graph.from_edges(n, edges)


def parse_graph_spec(spec: str) -> Graph:
    """Parse ``cycle:N``, ``grid:S``, ``path:N`` or ``complete:N``."""
    kind, _, arg = spec.partition(":")
    builders = {"cycle": cycle, "grid": grid2d, "path": path, "complete": complete}
    if kind not in builders or not arg.isdigit():
        raise ValueError(f"bad graph spec {spec!r}; expected e.g. cycle:6 or grid:10")
    return builders[kind](int(arg))


def read_edge_list(path_or_lines, num_nodes: int | None = None) -> Graph:
    """Load a whitespace separated ``i j`` edge list (0-based, each edge once)."""
    if isinstance(path_or_lines, (str, bytes)) or hasattr(path_or_lines, "__fspath__"):
        with open(path_or_lines, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    else:
        lines = list(path_or_lines)
    pairs = []
    for ln in lines:
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        a, b = ln.split()[:2]
        pairs.append((int(a), int(b)))
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    n = num_nodes if num_nodes is not None else (int(arr.max()) + 1 if arr.size else 0)
    return Graph.from_edges(n, arr)


def write_edge_list(graph: Graph, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, j in graph.edge_list():
            fh.write(f"{i} {j}\n")
