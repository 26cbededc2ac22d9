"""Full-batch training: losses, Adam, early stopping and a small grid search."""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Value
from .datasets import LabeledDataset
from .gating import G2Config, G2Model, PropagationError


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, message: str = "non-finite loss"):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    weight_decay: float = 5e-4
    dropout_in: float = 0.0
    dropout_out: float = 0.0
    hidden_dim: int = 32
    epochs: int = 1000
    patience: int = 100
    seed: int = 0
    task: str = "classification"

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        for d in (self.dropout_in, self.dropout_out):
            if not 0.0 <= d <= 0.9:
                raise ValueError("dropout must lie in [0, 0.9]")
        if self.task not in ("classification", "regression"):
            raise ValueError(f"unknown task {self.task!r}")


@dataclass
class TrainResult:
    best_val_metric: float
    test_metric: float
    best_epoch: int
    metric_per_epoch: list[float] = field(default_factory=list)
    param_count: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


# -- losses ------------------------------------------------------------------------

def _mask_index(mask) -> np.ndarray:
    idx = np.flatnonzero(np.asarray(mask))
    if idx.size == 0:
        raise ValueError("mask selects no nodes")
    return idx


def cross_entropy(logits: Value, labels, mask) -> Value:
    idx = _mask_index(mask)
    logp = ad.log_softmax(ad.row_gather(logits, idx))
    picked = ad.take(logp, np.arange(idx.size), np.asarray(labels)[idx])
    return ad.scale(ad.reduce(picked, "mean"), -1.0)


def nmse(preds: Value, targets, mask) -> Value:
    """``sum (yhat - y)^2 / sum (y - mean y)^2`` over the masked nodes."""
    idx = _mask_index(mask)
    y = np.asarray(targets, dtype=np.float64)[idx][:, None]
    denom = float(np.sum((y - y.mean()) ** 2))
    if denom == 0:
        raise ValueError("targets are constant on the mask; NMSE undefined")
    r = ad.row_gather(preds, idx) - ad.const(y)
    return ad.scale(ad.reduce(ad.mul(r, r), "sum"), 1.0 / denom)


def loss(task: str, outputs: Value, labels, mask) -> Value:
    if task == "classification":
        return cross_entropy(outputs, labels, mask)
    if task == "regression":
        return nmse(outputs, labels, mask)
    raise ValueError(f"unknown task {task!r}")


def accuracy(logits: np.ndarray, labels, mask) -> float:
    idx = _mask_index(mask)
    return float(np.mean(np.argmax(logits[idx], axis=1) == np.asarray(labels)[idx]))


def metric(task: str, outputs: np.ndarray, labels, mask) -> float:
    """Accuracy (higher is better) or negative-free NMSE (lower is better)."""
    if task == "classification":
        return accuracy(outputs, labels, mask)
    return float(nmse(ad.const(outputs), labels, mask).data[0, 0])


def better(task: str, a: float, b: float) -> bool:
    return a > b if task == "classification" else a < b


# -- optimizer ---------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def adam_step(params: Sequence[Parameter], state: AdamState, lr: float, weight_decay: float = 0.0) -> None:
    """In-place Adam update with decoupled weight decay; reads ``p.grad``."""
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - BETA1 ** t, 1.0 - BETA2 ** t
    for k, p in enumerate(params):
        g = p.grad
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1 - BETA1) * g if m is None else BETA1 * m + (1 - BETA1) * g
        v = (1 - BETA2) * g * g if v is None else BETA2 * v + (1 - BETA2) * g * g
        state.m[k], state.v[k] = m, v
        if weight_decay:
            p.value -= lr * weight_decay * p.value
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


# -- training loop -----------------------------------------------------------------

def build_model(config: G2Config, dataset: LabeledDataset, seed: int) -> G2Model:
    out_dim = dataset.num_classes if dataset.task == "classification" else 1
    return G2Model.create(config, dataset.features.shape[1], out_dim, seed)


def train(config: G2Config, dataset: LabeledDataset, tc: TrainConfig, model: G2Model | None = None) -> TrainResult:
    """Full-batch training with early stopping on the validation metric.

    The test metric is read from the parameters of the best validation epoch.
    """
    if model is None:
        model = build_model(config, dataset, tc.seed)
    params = model.parameters()
    state = AdamState()
    g, X, y, task = dataset.graph, dataset.features, dataset.labels, dataset.task

    best_val, best_epoch = None, -1
    best_values = [p.value.copy() for p in params]
    history: list[float] = []
    since_best = 0
    for epoch in range(tc.epochs):
        for p in params:
            p.zero_grad()
        tape = Tape()
        rng = np.random.default_rng([tc.seed, epoch, 1]) if (tc.dropout_in or tc.dropout_out) else None
        try:
            out = model.forward(g, X, tape, train=True, dropout_in=tc.dropout_in, dropout_out=tc.dropout_out, rng=rng)
        except PropagationError as exc:
            raise TrainingError(epoch, str(exc)) from exc
        L = loss(task, out, y, dataset.train_mask)
        if not np.isfinite(L.data[0, 0]):
            raise TrainingError(epoch)
        tape.backward(L)
        adam_step(params, state, tc.lr, tc.weight_decay)

        try:
            eval_out = model.forward(g, X).data
        except PropagationError as exc:
            raise TrainingError(epoch, str(exc)) from exc
        if not np.all(np.isfinite(eval_out)):
            raise TrainingError(epoch, "non-finite outputs")
        val = metric(task, eval_out, y, dataset.val_mask)
        history.append(val)
        if best_val is None or better(task, val, best_val):
            best_val, best_epoch, since_best = val, epoch, 0
            best_values = [p.value.copy() for p in params]
        else:
            since_best += 1
            if since_best >= tc.patience:
                break

    for p, v in zip(params, best_values):
        p.value[...] = v
    final = model.forward(g, X).data
    test = metric(task, final, y, dataset.test_mask)
    return TrainResult(float(best_val), float(test), best_epoch, history, model.param_count())


# -- grid search -------------------------------------------------------------------

@dataclass
class GridEntry:
    overrides: dict
    train_config: TrainConfig
    result: TrainResult


def _key(d: dict) -> str:
    return json.dumps(d, sort_keys=True)


def grid_search(
    config: G2Config,
    dataset: LabeledDataset,
    base: TrainConfig,
    grid: dict[str, Sequence],
    model_keys: Sequence[str] = ("p", "alpha", "num_layers"),
) -> tuple[GridEntry, list[GridEntry]]:
    """Train every grid point and rank by validation metric.

    Grid keys naming ``G2Config`` fields (``model_keys``) override the model
    config, the rest override ``TrainConfig``. Ties break by the lexicographic
    order of the JSON-encoded overrides.
    """
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("grid must be nonempty")
    keys = sorted(grid)
    entries = []
    for values in itertools.product(*(grid[k] for k in keys)):
        ov = dict(zip(keys, values))
        mc = replace(config, **{k: v for k, v in ov.items() if k in model_keys})
        tc = replace(base, **{k: v for k, v in ov.items() if k not in model_keys})
        if "hidden_dim" in ov:
            from .coupling import CouplingConfig

            c = mc.coupling
            mc = replace(mc, coupling=CouplingConfig(c.kind, tc.hidden_dim, tc.hidden_dim, c.aggregation))
        entries.append(GridEntry(ov, tc, train(mc, dataset, tc)))
    sign = -1.0 if base.task == "classification" else 1.0
    entries.sort(key=lambda e: (sign * e.result.best_val_metric, _key(e.overrides)))
    return entries[0], entries
