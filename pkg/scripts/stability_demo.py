"""Perturbation decay around a steady state on a 6-cycle.

Part 1 runs the linear (p=0) and gated (p=2, p=4) instances with eps=1e-3 and
prints their fits. Part 2 runs p=2 from a larger perturbation over a much
longer horizon, where the energy is far enough into its tail for the
last-decade power-law slope to approach -1.

    python3 scripts/stability_demo.py [--skip-long] [--out results/stability]
"""

import argparse
import json
from pathlib import Path

from gradgate.dynamics import write_fit_json, write_series_csv
from gradgate.experiments import stability_run
from gradgate.graph import cycle


def show(tag, summary):
    fits = summary["fits"]
    line = f"{tag:28s} verdict={summary['verdict']:18s} envelope max={summary['envelope_max_ratio']:.3f}"
    line += f" exp r2={fits['exponential']['r_squared']:.4f}"
    if "power_law_last_decade" in fits:
        pw, ex = fits["power_law_last_decade"], fits["exponential_last_decade"]
        line += f" last decade: slope={pw['rate']:.4f} r2 pow={pw['r_squared']:.4f} exp={ex['r_squared']:.4f}"
    print(line)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/stability")
    ap.add_argument("--skip-long", action="store_true", help="skip the long-horizon runs")
    ap.add_argument("--seeds", type=int, default=2)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs = [("p0_h50", 0.0, dict(horizon=50.0)), ("p2_h1e4", 2.0, dict(horizon=1e4)), ("p4_h1e4", 4.0, dict(horizon=1e4))]
    if not args.skip_long:
        runs += [
            (f"p2_long_seed{s}", 2.0, dict(horizon=1e9, dt=20.0, epsilon=1e-2, seed=s)) for s in range(args.seeds)
        ]
    for tag, p, kw in runs:
        _, series, summary = stability_run(p, cycle(6), **kw)
        write_series_csv(series, out / f"{tag}.csv")
        write_fit_json(summary, out / f"{tag}.fit.json")
        show(tag, summary)
    print(json.dumps({"written": str(out)}))


if __name__ == "__main__":
    main()
