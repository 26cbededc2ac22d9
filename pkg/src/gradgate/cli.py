"""Command line harness: one subcommand per experiment.

Exit codes: 0 success, 1 failed check, 2 usage error, 3 runtime or domain error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .datasets import ConstructionError
from .dynamics import FitError, IntegrationError, oversmoothing_verdict, write_series_csv
from .experiments import (
    ENERGY_MODELS,
    GRADCHECK_MODELS,
    METRICS,
    dataset_spec,
    energy_curve,
    parse_graph,
    point_echo,
    run_gradcheck,
    run_point,
    stability_run,
)
from .gating import FAMILIES, PropagationError, family_config
from .graph import DomainError
from .training import TrainConfig, TrainingError

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3

CLASSIFY_DEFAULTS = TrainConfig(lr=0.01, weight_decay=5e-4, epochs=400, patience=100)
REGRESS_DEFAULTS = TrainConfig(
    lr=0.005, weight_decay=5e-4, dropout_in=0.5, dropout_out=0.5, epochs=400, patience=100, task="regression"
)
DEPTH_DEFAULTS = TrainConfig(lr=0.005, weight_decay=5e-4, epochs=200, patience=50)

ABLATE_AXES = {
    # axis: (default points, default task, default homophily for classification)
    "alpha": ("0.001,0.01,0.1,0.5,1.0", "regress", 0.3),
    "p": ("1,2,3,4,5", "classify", 0.3),
    "params": ("8,16,32,64", "classify", 0.1),
    "fhat": ("false,true", "classify", 0.3),
    "single-rate": ("g2,g2_single_rate", "regress", 0.3),
}
RUNTIME_ERRORS = (DomainError, ConstructionError, IntegrationError, PropagationError, TrainingError, FitError)


class UsageError(Exception):
    pass


# -- parsing helpers ---------------------------------------------------------------

def parse_list(text: str, cast: Callable = float) -> list:
    items = [s.strip() for s in text.split(",") if s.strip()]
    if not items:
        raise UsageError(f"empty list {text!r}")
    try:
        return [cast(s) for s in items]
    except ValueError as exc:
        raise UsageError(f"bad list {text!r}: {exc}") from None


def parse_points(text: str, num: int = 5) -> list[float]:
    """``a,b,c`` or ``a..b`` (``num`` geometrically spaced points, endpoints included)."""
    if ".." in text:
        lo_s, _, hi_s = text.partition("..")
        try:
            lo, hi = float(lo_s), float(hi_s)
        except ValueError:
            raise UsageError(f"bad range {text!r}") from None
        if not (0 < lo < hi) or num < 2:
            raise UsageError(f"range {text!r} needs 0 < a < b and at least 2 points")
        return [float(x) for x in np.geomspace(lo, hi, num)]
    return parse_list(text)


def parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _jobs(args) -> int:
    jobs = args.jobs if args.jobs is not None else int(os.environ.get("G2_JOBS", "1"))
    if jobs < 1:
        raise UsageError("--jobs must be >= 1")
    return jobs


# -- record emission ---------------------------------------------------------------

def _dumps(record: dict) -> str:
    return json.dumps(record, sort_keys=True, allow_nan=True)


class Emitter:
    def __init__(self, out: str | None):
        self._fh = open(out, "w", encoding="utf-8", newline="\n") if out else sys.stdout
        self._own = out is not None

    def __call__(self, record: dict) -> None:
        self._fh.write(_dumps(record) + "\n")
        self._fh.flush()

    def close(self) -> None:
        if self._own:
            self._fh.close()


def _timed(fn: Callable, *a):
    t0 = time.perf_counter()
    out = fn(*a)
    return out, int(round(1000 * (time.perf_counter() - t0)))


def _run_timed_point(echo: dict):
    return _timed(run_point, echo)


def run_points(echoes: Sequence[dict], jobs: int) -> list[tuple[dict, int]]:
    """Run sweep points, returning results in input order."""
    if jobs == 1 or len(echoes) <= 1:
        return [_run_timed_point(e) for e in echoes]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_timed_point, echoes))


# -- subcommands -------------------------------------------------------------------

def cmd_energy(args) -> int:
    if args.layers < 1:
        raise UsageError("--layers must be >= 1")
    config = {
        "model": args.model, "layers": args.layers, "grid_side": args.grid_side,
        "seed": args.seed, "metric": args.metric, "width": args.width, "p": args.p,
    }
    series, ms = _timed(lambda: energy_curve(**config))
    record = {"experiment": "energy", "seed": args.seed, "config": config, "metrics": _energy_metrics(series)}
    if args.timing:
        record["wall_time_ms"] = ms
    if args.out:
        write_series_csv(series[1:], args.out, time_label="layer", value_label=args.metric)
        print(_dumps(record))
    else:
        write_series_csv(series[1:], sys.stdout, time_label="layer", value_label=args.metric)
        print(_dumps(record), file=sys.stderr)
    if args.expect and record["metrics"]["verdict"] != args.expect:
        return EXIT_CHECK
    return EXIT_OK


def _energy_metrics(series: np.ndarray) -> dict:
    e = series[:, 1]
    return {
        "verdict": oversmoothing_verdict(series),
        "initial": float(e[0]),
        "final": float(e[-1]),
        "ratio": float(e[-1] / e[0]) if e[0] else float("nan"),
    }


def cmd_stability(args) -> int:
    if args.p < 0:
        raise UsageError("--p must be >= 0")
    if not 0 < args.dt <= 1:
        raise UsageError("--dt must lie in (0, 1]")
    if args.horizon <= 0:
        raise UsageError("--horizon must be > 0")
    try:
        graph = parse_graph(args.graph)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    config = {
        "p": args.p, "graph": args.graph, "dt": args.dt, "horizon": args.horizon,
        "seed": args.seed, "epsilon": args.epsilon, "coupling": args.coupling, "clamp": args.clamp,
    }
    (run, series, summary), ms = _timed(lambda: _stability(config, graph))
    record = {"experiment": "stability", "seed": args.seed, "config": config, "metrics": summary}
    if args.timing:
        record["wall_time_ms"] = ms
    if args.out:
        write_series_csv(series, args.out)
        fit_path = Path(args.out).with_suffix(".fit.json")
        with open(fit_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(_dumps(record))
    if args.check_envelope and summary["envelope_max_ratio"] > args.slack:
        return EXIT_CHECK
    return EXIT_OK


def _stability(config: dict, graph=None):
    c = dict(config)
    g = graph if graph is not None else parse_graph(c["graph"])
    c.pop("graph")
    return stability_run(graph=g, **c)


def _train_defaults(args, base: TrainConfig) -> TrainConfig:
    over = {
        "lr": args.lr, "weight_decay": args.weight_decay, "epochs": args.epochs,
        "patience": args.patience, "hidden_dim": args.width,
    }
    if args.dropout is not None:
        over["dropout_in"] = over["dropout_out"] = args.dropout
    return replace(base, **{k: v for k, v in over.items() if v is not None})


def _models(args) -> list[str]:
    models = parse_list(args.models, str)
    bad = [m for m in models if m not in FAMILIES]
    if bad:
        raise UsageError(f"unknown model(s) {bad}; choose from {sorted(FAMILIES)}")
    return models


def _seeds(args) -> list[int]:
    if args.num_seeds < 1:
        raise UsageError("--num-seeds must be >= 1")
    return [args.seed + k for k in range(args.num_seeds)]


def _emit_sweep(args, experiment: str, points: list[tuple[dict, dict]]) -> int:
    """``points`` holds ``(sweep coordinates, echo)`` pairs in sweep order."""
    results = run_points([echo for _, echo in points], _jobs(args))
    emit = Emitter(args.out)
    try:
        for (coords, echo), (metrics, ms) in zip(points, results):
            record = {
                "experiment": experiment,
                "seed": echo["train"]["seed"],
                "point": coords,
                "config": echo,
                "metrics": metrics,
            }
            if args.timing:
                record["wall_time_ms"] = ms
            emit(record)
    finally:
        emit.close()
    return EXIT_OK


def _classify_point(args, family: str, h: float, layers: int, seed: int, tc: TrainConfig, grid=None, **model_kw):
    ds = dataset_spec("homophily", seed, h=h, nodes=args.nodes or 500, classes=args.classes)
    cfg = family_config(family, tc.hidden_dim, layers, **{"p": args.p, **model_kw})
    if grid and cfg.mode not in ("g2", "g2_alpha", "g2_single_rate"):
        grid = None
    return point_echo("classification", ds, cfg, replace(tc, seed=seed), grid)


def _regress_point(args, family: str, layers: int, seed: int, tc: TrainConfig, **model_kw):
    ds = dataset_spec("multiscale", seed, nodes=args.nodes or 1000)
    cfg = family_config(family, tc.hidden_dim, layers, **{"p": args.p, **model_kw})
    return point_echo("regression", ds, cfg, replace(tc, seed=seed))


def cmd_depth(args) -> int:
    layer_list = parse_list(args.layers, int)
    if min(layer_list) < 1:
        raise UsageError("--layers entries must be >= 1")
    tc = _train_defaults(args, DEPTH_DEFAULTS)
    points = [
        ({"model": m, "layers": L}, _classify_point(args, m, args.homophily, L, s, tc))
        for m in _models(args) for L in layer_list for s in _seeds(args)
    ]
    return _emit_sweep(args, "depth", points)


def cmd_homophily(args) -> int:
    hs = parse_list(args.h)
    if any(not 0 <= h <= 1 for h in hs):
        raise UsageError("--h entries must lie in [0, 1]")
    grid = {"p": parse_list(args.grid_p)} if args.grid_p else None
    tc = _train_defaults(args, CLASSIFY_DEFAULTS)
    points = [
        ({"model": m, "h": h}, _classify_point(args, m, h, args.layers, s, tc, grid))
        for m in _models(args) for h in hs for s in _seeds(args)
    ]
    return _emit_sweep(args, "homophily", points)


def cmd_regress(args) -> int:
    tc = _train_defaults(args, REGRESS_DEFAULTS)
    points = [
        ({"model": m}, _regress_point(args, m, args.layers, s, tc))
        for m in _models(args) for s in _seeds(args)
    ]
    return _emit_sweep(args, "regress", points)


def cmd_ablate(args) -> int:
    default_points, default_task, default_h = ABLATE_AXES[args.axis]
    task = args.task or default_task
    h = default_h if args.homophily is None else args.homophily
    text = args.points or default_points
    if args.axis == "fhat":
        try:
            values = [parse_bool(v) for v in parse_list(text, str)]
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    elif args.axis == "single-rate":
        values = parse_list(text, str)
        if any(v not in ("g2", "g2_single_rate") for v in values):
            raise UsageError("single-rate points must be g2 or g2_single_rate")
    elif args.axis == "params":
        values = parse_list(text, int)
        if min(values) < 1:
            raise UsageError("widths must be >= 1")
    else:
        values = parse_points(text, args.num_points)
    if args.axis == "alpha" and any(not 0 <= a <= 1 for a in values):
        raise UsageError("alpha points must lie in [0, 1]")
    if args.axis == "p" and any(not v > 0 for v in values):
        raise UsageError("p points must be > 0")

    base = REGRESS_DEFAULTS if task == "regress" else CLASSIFY_DEFAULTS
    tc = _train_defaults(args, base)

    def point(family, seed, width=None, **kw):
        t = tc if width is None else replace(tc, hidden_dim=width)
        if task == "regress":
            return _regress_point(args, family, args.layers, seed, t, **kw)
        return _classify_point(args, family, h, args.layers, seed, t, **kw)

    points = []
    for v in values:
        for s in _seeds(args):
            if args.axis == "alpha":
                points.append(({"alpha": v}, point("g2-gcn", s, mode="g2_alpha", alpha=v)))
            elif args.axis == "p":
                points.append(({"p": v}, point("g2-gcn", s, p=v)))
            elif args.axis == "fhat":
                points.append(({"use_separate_Fhat": v}, point("g2-gcn", s, use_separate_Fhat=v)))
            elif args.axis == "single-rate":
                points.append(({"mode": v}, point("g2-gcn", s, mode=v)))
            else:
                for m in ("gcn", "g2-gcn"):
                    points.append(({"width": v, "model": m}, point(m, s, width=v)))
    return _emit_sweep(args, f"ablate-{args.axis}", points)


def cmd_gradcheck(args) -> int:
    config = {"model": args.model, "p": args.p, "seed": args.seed, "aggregation": args.aggregation}
    report, ms = _timed(lambda: run_gradcheck(tolerance=args.tolerance, **config))
    metrics = {
        "passed": report.passed,
        "max_rel_err": report.max_rel_err,
        "checked": report.checked,
        "skipped": [[name, list(idx)] for name, idx in report.skipped],
        "worst": None if report.worst is None else [report.worst[0], list(report.worst[1]), report.worst[2], report.worst[3]],
    }
    record = {"experiment": "gradcheck", "seed": args.seed, "config": config, "metrics": metrics}
    if args.timing:
        record["wall_time_ms"] = ms
    print(_dumps(record))
    return EXIT_OK if report.passed else EXIT_CHECK


# -- replay ------------------------------------------------------------------------

def replay_record(record: dict) -> dict:
    """Recompute a record's metrics from its config echo."""
    exp, config = record["experiment"], record["config"]
    if exp == "energy":
        return _energy_metrics(energy_curve(**config))
    if exp == "stability":
        return _stability(config)[2]
    if exp == "gradcheck":
        r = run_gradcheck(**config)
        return {"passed": r.passed, "max_rel_err": r.max_rel_err}
    return run_point(config)


def _same(a, b) -> bool:
    if isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b):
        return True
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(_same(a[k], b[k]) for k in a)
    if isinstance(a, (list, tuple)) and isinstance(b, (list, tuple)):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    return a == b


def cmd_replay(args) -> int:
    with open(args.records, encoding="utf-8") as fh:
        records = [json.loads(ln) for ln in fh if ln.strip()]
    mismatches = 0
    for k, rec in enumerate(records):
        fresh = json.loads(_dumps(replay_record(rec)))
        expected = {key: rec["metrics"][key] for key in fresh if key in rec["metrics"]}
        if not _same(fresh, expected) or len(expected) != len(fresh):
            mismatches += 1
            print(f"record {k} ({rec['experiment']}): metrics differ", file=sys.stderr)
    print(_dumps({"experiment": "replay", "records": len(records), "mismatches": mismatches}))
    return EXIT_OK if mismatches == 0 else EXIT_CHECK


# -- parser ------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_common(p, out_help="output file (default stdout)"):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help=out_help)
    p.add_argument("--timing", action="store_true", help="include wall_time_ms in records")


def _add_train(p, models="g2-gcn", layers=True):
    p.add_argument("--models", default=models, help="comma list of model families")
    p.add_argument("--num-seeds", type=int, default=1, help="replicates use seeds seed, seed+1, ...")
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--p", type=float, default=2.0)
    p.add_argument("--nodes", type=int, default=None)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--jobs", type=int, default=None, help="worker processes (env G2_JOBS, default 1)")
    if layers:
        p.add_argument("--layers", type=int, default=2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gradgate", description="Gradient gating experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("energy", help="per-layer smoothing metric of untrained stacks")
    p.add_argument("--model", required=True, choices=ENERGY_MODELS)
    p.add_argument("--layers", type=int, default=1000)
    p.add_argument("--grid-side", type=int, default=10)
    p.add_argument("--metric", choices=sorted(METRICS), default="dirichlet")
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--p", type=float, default=2.0)
    p.add_argument("--expect", choices=("exponential_decay", "algebraic_decay", "non_decaying"))
    _add_common(p, "CSV file for the per-layer series (default stdout)")
    p.set_defaults(func=cmd_energy)

    p = sub.add_parser("stability", help="perturbation decay around a steady state")
    p.add_argument("--p", type=float, required=True)
    p.add_argument("--graph", default="cycle:6", help="cycle:N, grid:S, path:N, complete:N or edges:FILE")
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--horizon", type=float, default=50.0)
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--coupling", choices=("uniform", "random"), default="uniform")
    p.add_argument("--clamp", type=int, default=0)
    p.add_argument("--check-envelope", action="store_true")
    p.add_argument("--slack", type=float, default=1.05)
    _add_common(p, "CSV file for the energy series; fits go next to it as .fit.json")
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("depth", help="accuracy against number of layers")
    _add_train(p, layers=False)
    p.add_argument("--layers", default="4,8,16,32,64", help="comma list")
    p.add_argument("--homophily", type=float, default=0.8)
    _add_common(p)
    p.set_defaults(func=cmd_depth)

    p = sub.add_parser("homophily", help="accuracy against label homophily")
    _add_train(p)
    p.add_argument("--h", default="0.0,0.3,0.6,0.9", help="comma list")
    p.add_argument("--grid-p", default=None, help="comma list of p values selected on validation")
    _add_common(p)
    p.set_defaults(func=cmd_homophily)

    p = sub.add_parser("regress", help="multi-scale node regression")
    _add_train(p)
    _add_common(p)
    p.set_defaults(func=cmd_regress)

    p = sub.add_parser("ablate", help="sweeps over alpha, p, width, Fhat, single rate")
    _add_train(p)
    p.add_argument("--axis", required=True, choices=sorted(ABLATE_AXES))
    p.add_argument("--points", default=None, help="comma list or a..b range")
    p.add_argument("--num-points", type=int, default=5, help="points in an a..b range")
    p.add_argument("--task", choices=("regress", "classify"), default=None)
    p.add_argument("--homophily", type=float, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of a model's gradients")
    p.add_argument("--model", required=True, choices=GRADCHECK_MODELS)
    p.add_argument("--p", type=float, default=2.0)
    p.add_argument("--aggregation", choices=("sum", "mean", "max"), default="mean")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--timing", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("replay", help="re-run JSON-lines records from their config echo")
    p.add_argument("records")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gradgate {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RUNTIME_ERRORS as exc:
        print(f"gradgate {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"gradgate {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
