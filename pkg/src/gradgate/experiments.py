"""Experiment runners shared by the command line, the scripts and the tests.

Training experiments are described by a plain-dict *echo*
``{"task", "dataset", "model", "train"}`` (optionally ``"grid"``) so that any
emitted record can be re-run from its own content.
"""

from __future__ import annotations

import functools
import json
from dataclasses import asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .coupling import make_right_stochastic
from .datasets import LabeledDataset, synthetic_homophily, synthetic_multiscale
from .diagnostics import dirichlet_energy, mad
from .dynamics import (
    PerturbationRun,
    fit_decay,
    last_decade,
    decay_window,
    linear_envelope,
    oversmoothing_verdict,
    quasilinear_envelope,
    simulate_linearized,
    simulate_quasilinear,
)
from .gating import FAMILIES, G2Config, G2Model, family_config, fresh_layers, propagate
from .gradcheck import grad_check
from .graph import Graph, grid2d, parse_graph_spec, random_connected, read_edge_list
from .training import TrainConfig, cross_entropy, grid_search, train

ENERGY_MODELS = ("gcn", "gat", "g2-gcn", "g2-gat")
METRICS = {"dirichlet": dirichlet_energy, "mad": mad}


# -- oversmoothing curves ----------------------------------------------------------

def energy_curve(
    model: str,
    layers: int,
    grid_side: int = 10,
    seed: int = 0,
    metric: str = "dirichlet",
    width: int = 16,
    p: float = 2.0,
) -> np.ndarray:
    """Per-layer metric of untrained propagation on a square grid.

    Returns ``(layers + 1, 2)`` rows ``(layer, value)`` starting at the input
    ``X0 ~ U[0, 1]``. Every layer draws fresh Glorot weights.
    """
    if model not in ENERGY_MODELS:
        raise ValueError(f"unknown model {model!r}; choose from {ENERGY_MODELS}")
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    g = grid2d(grid_side)
    fn = METRICS[metric]
    cfg = family_config(model, width, layers, p=p)
    X0 = np.random.default_rng([seed, 0]).uniform(0.0, 1.0, size=(g.num_nodes, width))
    values = [fn(g, X0)]
    propagate(cfg, fresh_layers(cfg, seed), g, X0, layers, callback=lambda n, X: values.append(fn(g, X)))
    return np.stack([np.arange(layers + 1, dtype=np.float64), np.asarray(values)], axis=1)


# -- perturbation stability --------------------------------------------------------

def parse_graph(spec: str) -> Graph:
    """``cycle:N``, ``grid:S``, ``path:N``, ``complete:N`` or ``edges:FILE``."""
    if spec.startswith("edges:"):
        return read_edge_list(spec[len("edges:"):])
    return parse_graph_spec(spec)


def stability_run(
    p: float,
    graph: Graph,
    dt: float = 1e-3,
    horizon: float = 50.0,
    seed: int = 0,
    epsilon: float = 1e-3,
    coupling: str = "uniform",
    clamp: int = 0,
) -> tuple[PerturbationRun, np.ndarray, dict]:
    """Simulate one perturbation run and summarize its decay."""
    A = make_right_stochastic(graph, coupling, seed=seed)
    run = PerturbationRun(graph, A, p=p, clamped_node=clamp, epsilon=epsilon, dt=dt, horizon=horizon, seed=seed)
    series = simulate_linearized(run) if p == 0 else simulate_quasilinear(run)
    t, e = series[:, 0], series[:, 1]
    envelope = linear_envelope(run, t, e[0]) if p == 0 else quasilinear_envelope(run, t, e[0])
    fits = {"exponential": fit_decay(decay_window(series), "exponential").to_dict()}
    if t[-1] > 0:
        fits["power_law_last_decade"] = fit_decay(series, "power_law", last_decade(series)).to_dict()
        fits["exponential_last_decade"] = fit_decay(series, "exponential", last_decade(series)).to_dict()
    summary = {
        "constants": run.constants(),
        "fits": fits,
        "verdict": oversmoothing_verdict(series),
        "envelope_max_ratio": float(np.max(e / envelope)),
        "final_ratio": float(e[-1] / e[0]),
    }
    return run, series, summary


# -- training points ---------------------------------------------------------------

def dataset_spec(kind: str, seed: int, **kw) -> dict:
    if kind == "homophily":
        d = {"kind": kind, "classes": 5, "nodes": 500, "h": 0.5, "feat_dim": 16}
    elif kind == "multiscale":
        d = {"kind": kind, "nodes": 1000}
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    d.update(kw)
    d["seed"] = seed
    return d


@functools.lru_cache(maxsize=32)
def _dataset_cached(key: str) -> LabeledDataset:
    d = json.loads(key)
    if d["kind"] == "homophily":
        return synthetic_homophily(d["classes"], d["nodes"], d["h"], d["feat_dim"], d["seed"])
    return synthetic_multiscale(d["nodes"], d["seed"])


def make_dataset(spec: dict) -> LabeledDataset:
    return _dataset_cached(json.dumps(spec, sort_keys=True))


def point_echo(task: str, dataset: dict, model: G2Config, tc: TrainConfig, grid: dict | None = None) -> dict:
    echo = {"task": task, "dataset": dataset, "model": model.to_dict(), "train": asdict(tc)}
    if grid:
        echo["grid"] = grid
    return echo


def run_point(echo: dict) -> dict:
    """Train the configuration described by ``echo``; return its metrics."""
    ds = make_dataset(echo["dataset"])
    cfg = G2Config.from_dict(echo["model"])
    tc = TrainConfig(**echo["train"])
    grid = echo.get("grid")
    if grid:
        best, _ = grid_search(cfg, ds, tc, grid)
        res = best.result
        selected = best.overrides
    else:
        res = train(cfg, ds, tc)
        selected = None
    out = {
        "test_metric": res.test_metric,
        "best_val_metric": res.best_val_metric,
        "best_epoch": res.best_epoch,
        "param_count": res.param_count,
    }
    if selected is not None:
        out["selected"] = selected
    return out


# -- gradient check instances ------------------------------------------------------

GRADCHECK_MODELS = ("linear",) + tuple(sorted(FAMILIES))


def gradcheck_instance(model: str, p: float = 2.0, seed: int = 0, aggregation: str = "mean"):
    """A random 8-node problem for ``model``: returns ``(forward, params)``.

    ``linear`` is a loss linear in its weights, so central differences carry no
    truncation error at any step. Other models are two-layer stacks with separate weights
    per layer and a cross-entropy loss on every node.
    """
    rng = np.random.default_rng([seed, 11])
    g = random_connected(8, 0.3, rng)
    X = rng.normal(size=(8, 4))
    if model == "linear":
        W = Parameter("W", rng.normal(size=(4, 3)))
        R = rng.normal(size=(8, 3))
        return (lambda tape: ad.reduce(ad.mul(ad.const(X) @ ad.param(tape, W), ad.const(R)), "sum")), [W]
    if model not in FAMILIES:
        raise ValueError(f"unknown model {model!r}; choose from {GRADCHECK_MODELS}")
    cfg = family_config(model, 5, 2, p=p, coupling_aggregation=aggregation, share_weights=False)
    net = G2Model.create(cfg, 4, 3, seed)
    labels = rng.integers(0, 3, size=8)
    mask = np.ones(8, dtype=bool)

    def forward(tape):
        return cross_entropy(net.forward(g, X, tape), labels, mask)

    return forward, net.parameters()


def run_gradcheck(model: str, p: float = 2.0, seed: int = 0, aggregation: str = "mean", tolerance: float = 1e-4):
    forward, params = gradcheck_instance(model, p, seed, aggregation)
    # a wide step only shrinks rounding error when the loss is linear
    h = 1e-3 if model == "linear" else 1e-6
    return grad_check(forward, params, tolerance=tolerance, h=h, seed=seed)
