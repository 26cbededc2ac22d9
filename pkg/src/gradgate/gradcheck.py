"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Parameter, Tape, Value


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    checked: int
    skipped: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)
    worst: tuple[str, tuple[int, ...], float, float] | None = None

    @property
    def pass_(self) -> bool:
        return self.passed


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def grad_check(
    forward: Callable[[Tape | None], Value],
    params: Sequence[Parameter],
    tolerance: float = 1e-4,
    h: float = 1e-6,
    fraction: float = 0.05,
    min_components: int = 50,
    seed: int = 0,
    kink_tol: float = 1e-2,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    ``forward(tape)`` must build a 1x1 loss, recording on ``tape`` when one is
    given, and be deterministic. A random sample of parameter components
    (``fraction`` of all, at least ``min_components``) is checked. Components
    whose one-sided differences disagree by more than ``kink_tol`` sit on a
    kink (ReLU zero, max tie) and are reported as skipped instead.
    """
    for p in params:
        p.zero_grad()
    tape = Tape()
    loss = forward(tape)
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]

    def f() -> float:
        return float(forward(None).data[0, 0])

    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    k = min(total, max(min_components, int(np.ceil(fraction * total))))
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(total, size=k, replace=False))
    bounds = np.cumsum(sizes)

    f0 = f()
    report = GradCheckReport(0.0, True, 0)
    for flat in picks:
        pi = int(np.searchsorted(bounds, flat, side="right"))
        local = int(flat - (bounds[pi - 1] if pi else 0))
        p = params[pi]
        idx = np.unravel_index(local, p.shape)
        orig = p.value[idx]
        p.value[idx] = orig + h
        fp = f()
        p.value[idx] = orig - h
        fm = f()
        p.value[idx] = orig
        right, left = (fp - f0) / h, (f0 - fm) / h
        if abs(right - left) > kink_tol * max(abs(right), abs(left), 1e-3):
            report.skipped.append((p.name, tuple(int(i) for i in idx)))
            continue
        numeric = (fp - fm) / (2 * h)
        a = float(analytic[pi][idx])
        err = rel_err(a, numeric)
        report.checked += 1
        if err > report.max_rel_err:
            report.max_rel_err = err
            report.worst = (p.name, tuple(int(i) for i in idx), a, numeric)
    report.passed = report.max_rel_err < tolerance
    return report
