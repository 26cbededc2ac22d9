"""Median test metric per sweep point from JSON-lines records.

    python3 scripts/summarize.py results/depth.jsonl [more.jsonl ...]
"""

import json
import sys
from collections import defaultdict

import numpy as np


def summarize(path):
    groups = defaultdict(list)
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            r = json.loads(line)
            key = json.dumps(r["point"], sort_keys=True)
            groups[key].append(r["metrics"]["test_metric"])
    print(f"== {path}")
    for key, vals in groups.items():
        print(f"  {key:45s} median={np.median(vals):.4f} n={len(vals)} values={[round(v, 4) for v in vals]}")


if __name__ == "__main__":
    for p in sys.argv[1:]:
        summarize(p)
