"""Per-layer Dirichlet energy and MAD of untrained deep stacks on a 10x10 grid.

Writes one CSV per (model, metric) plus a verdict table to stdout.

    python3 scripts/energy_curves.py --layers 1000 --out results/energy
"""

import argparse
from pathlib import Path

from gradgate.dynamics import oversmoothing_verdict, write_series_csv
from gradgate.experiments import ENERGY_MODELS, METRICS, energy_curve


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--layers", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--width", type=int, default=16)
    ap.add_argument("--out", default="results/energy")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print(f"{'model':8s} {'metric':10s} {'ratio@10':>10s} {'ratio@end':>10s}  verdict")
    for model in ENERGY_MODELS:
        for metric in sorted(METRICS):
            curve = energy_curve(model, args.layers, seed=args.seed, metric=metric, width=args.width)
            write_series_csv(curve, out / f"{model}_{metric}.csv", "layer", metric)
            r = curve[:, 1] / curve[0, 1]
            at10 = r[min(10, args.layers)]
            print(f"{model:8s} {metric:10s} {at10:10.2e} {r[-1]:10.2e}  {oversmoothing_verdict(curve)}")


if __name__ == "__main__":
    main()
