"""1-neighborhood coupling functions (GCN, GAT, GraphSAGE) and fixed
right-stochastic coupling matrices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Value
from .graph import Graph

KINDS = ("gcn", "gat", "sage")
AGGREGATIONS = ("sum", "mean", "max")
LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class CouplingConfig:
    kind: str
    in_dim: int
    out_dim: int
    aggregation: str = "mean"
    attention_dim: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown coupling kind {self.kind!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("coupling dims must be >= 1")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_coupling(config: CouplingConfig, rng: np.random.Generator, prefix: str = "") -> dict[str, Parameter]:
    """Glorot-uniform parameters for one coupling layer, keyed by short name."""
    i, o = config.in_dim, config.out_dim
    if config.kind == "gcn":
        names = {"W": (i, o)}
    elif config.kind == "gat":
        names = {"W": (i, o), "att_src": (o, 1), "att_dst": (o, 1)}
    else:
        names = {"W_self": (i, o), "W_neigh": (i, o)}
    return {k: Parameter(prefix + k, glorot(rng, *shape)) for k, shape in names.items()}


def attention_weights(H: Value, att_dst: Value, att_src: Value, graph: Graph) -> Value:
    """Per-edge attention over ``N_i ∪ {i}``, aligned with the self-loop CSR."""
    loops = graph.with_self_loops
    s_i = ad.row_gather(H @ att_dst, loops.row_indices)
    s_j = ad.row_gather(H @ att_src, loops.col_indices)
    return ad.segment_softmax(ad.leaky_relu(s_i + s_j, LEAKY_SLOPE), loops.row_offsets)


def neighbor_aggregate(graph: Graph, X: Value, mode: str = "sum") -> Value:
    return ad.segment_reduce(ad.row_gather(X, graph.col_indices), graph.row_offsets, mode)


def coupling_forward(
    config: CouplingConfig,
    params: dict[str, Parameter],
    graph: Graph,
    X: Value,
    tape: Tape | None = None,
) -> Value:
    if X.shape != (graph.num_nodes, config.in_dim):
        raise ValueError(f"expected X of shape {(graph.num_nodes, config.in_dim)}, got {X.shape}")
    P = {k: ad.param(tape, p) for k, p in params.items()}
    if config.kind == "gcn":
        return ad.spmm(graph.gcn_matrix, X @ P["W"])
    if config.kind == "gat":
        H = X @ P["W"]
        alpha = attention_weights(H, P["att_dst"], P["att_src"], graph)
        loops = graph.with_self_loops
        msgs = ad.mul(alpha, ad.row_gather(H, loops.col_indices))
        return ad.segment_reduce(msgs, loops.row_offsets, "sum")
    agg = neighbor_aggregate(graph, X, config.aggregation)
    return X @ P["W_self"] + agg @ P["W_neigh"]


@dataclass(frozen=True, eq=False)
class StochasticMatrix:
    """Row-stochastic weights on the stored edges of ``graph``.

    ``weights`` is aligned with ``graph.col_indices``; ``diagonal`` holds
    self-coupling entries (zero for the constructions here).
    """

    graph: Graph
    weights: np.ndarray
    diagonal: np.ndarray

    @property
    def min_entry(self) -> float:
        return float(self.weights.min())

    def row_sums(self) -> np.ndarray:
        g = self.graph
        out = np.zeros(g.num_nodes)
        np.add.at(out, g.row_indices, self.weights)
        return out + self.diagonal

    def is_symmetric(self, atol: float = 0.0) -> bool:
        return bool(np.all(np.abs(self.weights - self.weights[self.graph.reverse_edge]) <= atol))

    def dense(self) -> np.ndarray:
        return self.graph.adjacency(self.weights).toarray() + np.diag(self.diagonal)

    def sparse(self):
        return self.graph.adjacency(self.weights)


def make_right_stochastic(graph: Graph, mode: str = "uniform", seed: int | None = None) -> StochasticMatrix:
    """``uniform``: ``A_ij = 1/deg(i)``; ``random``: positive draws normalized per row."""
    deg = graph.degrees
    if np.any(deg == 0):
        raise ValueError(f"node {int(np.flatnonzero(deg == 0)[0])} is isolated")
    if mode == "uniform":
        w = 1.0 / deg[graph.row_indices].astype(np.float64)
    elif mode == "random":
        rng = np.random.default_rng(seed)
        raw = rng.uniform(0.1, 1.0, size=graph.col_indices.size)
        sums = np.zeros(graph.num_nodes)
        np.add.at(sums, graph.row_indices, raw)
        w = raw / sums[graph.row_indices]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return StochasticMatrix(graph, w, np.zeros(graph.num_nodes))
