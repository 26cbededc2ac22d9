"""Synthetic node-level datasets and the on-disk dataset bundle."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .graph import Graph, read_edge_list, write_edge_list

MEAN_DEGREE = 8
SPLIT_FRACTIONS = (0.48, 0.32, 0.20)


class ConstructionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    graph: Graph
    features: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    task: str = "classification"

    def __post_init__(self):
        n = self.graph.num_nodes
        for name in ("features", "labels", "train_mask", "val_mask", "test_mask"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} has wrong number of rows")
        counts = self.train_mask.astype(int) + self.val_mask.astype(int) + self.test_mask.astype(int)
        if np.any(counts != 1):
            raise ValueError("every node must be in exactly one split")

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.task == "classification" else 1

    def mask(self, split: str) -> np.ndarray:
        return {"train": self.train_mask, "val": self.val_mask, "test": self.test_mask}[split]


def edge_homophily(graph: Graph, labels) -> float:
    """Fraction of edges whose endpoints share a label."""
    labels = np.asarray(labels)
    if graph.col_indices.size == 0:
        return 1.0
    return float(np.mean(labels[graph.row_indices] == labels[graph.col_indices]))


def stratified_split(labels: np.ndarray, rng: np.random.Generator, fractions=SPLIT_FRACTIONS):
    n = labels.size
    masks = [np.zeros(n, dtype=bool) for _ in range(3)]
    for c in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == c))
        n_train = int(round(fractions[0] * members.size))
        n_val = int(round(fractions[1] * members.size))
        masks[0][members[:n_train]] = True
        masks[1][members[n_train:n_train + n_val]] = True
        masks[2][members[n_train + n_val:]] = True
    return masks


def planted_partition(labels: np.ndarray, target_h: float, rng: np.random.Generator) -> Graph:
    """Random graph with mean degree ~8 whose edge homophily is ``target_h``.

    Each node initiates ``MEAN_DEGREE / 2`` edges. A fixed count
    ``round(target_h * total)`` of these are drawn inside the node's class and
    the rest across classes, so the realized homophily only deviates from the
    target by rounding.
    """
    n = labels.size
    classes = np.unique(labels)
    stubs_per_node = MEAN_DEGREE // 2
    total = n * stubs_per_node
    n_intra = int(round(target_h * total))
    members = {c: np.flatnonzero(labels == c) for c in classes}
    others = {c: np.flatnonzero(labels != c) for c in classes}
    if n_intra > 0 and min(m.size for m in members.values()) < 2:
        raise ConstructionError("a class has fewer than two nodes; intra-class edges impossible")
    if n_intra < total and len(classes) < 2:
        raise ConstructionError("cross-class edges requested but only one class present")

    intra = np.zeros(total, dtype=bool)
    intra[rng.permutation(total)[:n_intra]] = True
    sources = np.repeat(np.arange(n), stubs_per_node)
    seen: set[tuple[int, int]] = set()
    edges = []
    for src, is_intra in zip(sources, intra):
        pool = members[labels[src]] if is_intra else others[labels[src]]
        for _ in range(100):
            dst = int(pool[rng.integers(pool.size)])
            key = (min(src, dst), max(src, dst))
            if dst != src and key not in seen:
                break
        else:
            raise ConstructionError("could not place a non-duplicate edge; graph too small")
        seen.add(key)
        edges.append(key)
    return Graph.from_edges(n, np.asarray(edges, dtype=np.int64))


def synthetic_homophily(classes: int, nodes: int, target_h: float, feat_dim: int, seed: int) -> LabeledDataset:
    """Planted-partition classification dataset with controllable homophily."""
    if classes < 1 or nodes < 10 * classes:
        raise ValueError("need nodes >= 10 * classes")
    if not 0.0 <= target_h <= 1.0:
        raise ValueError("target_h must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(nodes) % classes)
    graph = planted_partition(labels, target_h, rng)
    means = np.zeros((classes, feat_dim))
    means[np.arange(classes), np.arange(classes) % feat_dim] = 3.0
    features = means[labels] + rng.standard_normal((nodes, feat_dim))
    train, val, test = stratified_split(labels, rng)
    return LabeledDataset(graph, features, labels.astype(np.int64), train, val, test)


def synthetic_multiscale(nodes: int, seed: int, target_h: float = 0.22, bins: int = 5) -> LabeledDataset:
    """Node regression with targets spread log-uniformly over ``[1e-5, 1]``.

    Nodes are binned by log-target into ``bins`` latent groups which drive the
    low-homophily edge placement. Targets are divided by their maximum, which
    keeps them in ``(0, 1]`` and preserves their ratios.
    """
    if nodes < 100:
        raise ValueError("need nodes >= 100")
    rng = np.random.default_rng(seed)
    log_y = rng.uniform(-5.0, 0.0, size=nodes)
    y = 10.0 ** log_y
    y = y / y.max()
    groups = np.minimum(((log_y + 5.0) / 5.0 * bins).astype(np.int64), bins - 1)
    graph = planted_partition(groups, target_h, rng)
    features = rng.standard_normal((nodes, 16))
    features[:, 0] = np.log10(y) + rng.normal(0.0, 0.5, size=nodes)
    train, val, test = stratified_split(groups, rng)
    return LabeledDataset(graph, features, y, train, val, test, task="regression")


def save_bundle(ds: LabeledDataset, directory) -> None:
    """Write ``edges.txt``, ``features.csv``, ``labels.csv`` and ``splits.csv``."""
    os.makedirs(directory, exist_ok=True)
    write_edge_list(ds.graph, os.path.join(directory, "edges.txt"))
    with open(os.path.join(directory, "features.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{k}" for k in range(ds.features.shape[1])])
        for row in ds.features:
            w.writerow([repr(float(x)) for x in row])
    with open(os.path.join(directory, "labels.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label" if ds.task == "classification" else "target"])
        for y in ds.labels:
            w.writerow([int(y) if ds.task == "classification" else repr(float(y))])
    with open(os.path.join(directory, "splits.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["train", "val", "test"])
        for a, b, c in zip(ds.train_mask, ds.val_mask, ds.test_mask):
            w.writerow([int(a), int(b), int(c)])


def _read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def load_bundle(directory) -> LabeledDataset:
    _, feat_rows = _read_csv(os.path.join(directory, "features.csv"))
    features = np.asarray(feat_rows, dtype=np.float64)
    header, label_rows = _read_csv(os.path.join(directory, "labels.csv"))
    task = "classification" if header[0] == "label" else "regression"
    labels = np.asarray([r[0] for r in label_rows], dtype=np.int64 if task == "classification" else np.float64)
    _, split_rows = _read_csv(os.path.join(directory, "splits.csv"))
    splits = np.asarray(split_rows, dtype=np.int64).astype(bool)
    graph = read_edge_list(os.path.join(directory, "edges.txt"), num_nodes=features.shape[0])
    return LabeledDataset(graph, features, labels, splits[:, 0], splits[:, 1], splits[:, 2], task=task)
