"""Graph functionals used to measure smoothing: gradients, energies, MAD."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import DomainError, Graph

MAD_NORM_FLOOR = 1e-12


def _as_rows(graph: Graph, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != graph.num_nodes:
        raise ValueError(f"expected {graph.num_nodes} rows, got {X.shape[0]}")
    return X


def graph_gradient(graph: Graph, y) -> dict[tuple[int, int], float]:
    """Per ordered edge ``(i, j)`` the difference ``y[j] - y[i]``."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1 or y.size != graph.num_nodes:
        raise ValueError("y must be a vector with one entry per node")
    diffs = y[graph.col_indices] - y[graph.row_indices]
    return {
        (int(i), int(j)): float(d)
        for i, j, d in zip(graph.row_indices, graph.col_indices, diffs)
    }


def edge_differences(graph: Graph, X) -> np.ndarray:
    """Array form of the graph gradient, one row per stored directed edge."""
    X = _as_rows(graph, X)
    return X[graph.col_indices] - X[graph.row_indices]


def dirichlet_energy(graph: Graph, X) -> float:
    """``(1/v) sum_i sum_{j in N_i} ||X_i - X_j||^2`` over ordered pairs."""
    X = _as_rows(graph, X)
    if graph.num_nodes == 0:
        return 0.0
    d = edge_differences(graph, X)
    return float(np.sum(d * d) / graph.num_nodes)


def mad(graph: Graph, X) -> float:
    """Mean cosine distance between adjacent node representations.

    A pair involving a row with norm below ``MAD_NORM_FLOOR`` has no direction;
    it counts as distance 0, so features that collapse to zero read as fully
    smoothed. Graphs without edges have MAD 0.
    """
    X = _as_rows(graph, X)
    if graph.col_indices.size == 0:
        return 0.0
    norms = np.linalg.norm(X, axis=1)
    src, dst = graph.row_indices, graph.col_indices
    ok = (norms[src] >= MAD_NORM_FLOOR) & (norms[dst] >= MAD_NORM_FLOOR)
    dist = np.zeros(src.size)
    dots = np.einsum("ij,ij->i", X[src[ok]], X[dst[ok]])
    dist[ok] = 1.0 - dots / (norms[src[ok]] * norms[dst[ok]])
    return float(np.clip(dist, 0.0, 2.0).mean())


def eccentricity(graph: Graph, node: int) -> int:
    dist = graph.bfs_distances(node)
    unreachable = np.flatnonzero(dist < 0)
    if unreachable.size:
        raise DomainError(f"graph is disconnected: node {unreachable[0]} unreachable from {node}")
    return int(dist.max())


@dataclass(frozen=True)
class PoincareReport:
    lhs: float
    rhs: float
    holds: bool


def poincare_check(graph: Graph, y, anchor: int) -> PoincareReport:
    """Compare ``sum y_i^2`` against ``dmax * ecc(anchor) * sum_i sum_j (y_j - y_i)^2``."""
    y = np.asarray(y, dtype=np.float64)
    if y[anchor] != 0:
        raise ValueError(f"y[anchor] must be 0, got {y[anchor]}")
    ecc = eccentricity(graph, anchor)
    d = edge_differences(graph, y)
    lhs = float(np.sum(y * y))
    rhs = float(graph.max_degree * ecc * np.sum(d * d))
    return PoincareReport(lhs, rhs, lhs <= rhs)
