"""Continuous-time view of gated message passing and perturbation decay.

A gated layer ``X <- (1 - tau) X + tau sigma(F(X))`` is one forward Euler
step (``dt = 1``) of ``dX/dt = tau * (sigma(F(X)) - X)``. Around a constant
steady state the perturbations obey

* without gating:  ``dx_i/dt = sum_j A_ij (x_j - x_i)``
* with gating:     ``dx_i/dt = taubar_i sum_j A_ij (x_j - x_i)``,
  ``taubar_i = sum_j |x_j - x_i|^p``

The first decays exponentially, the second only algebraically.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numba
import numpy as np
from scipy import stats

from .coupling import StochasticMatrix
from .diagnostics import eccentricity
from .gating import G2Config, LayerParams, compute_rates, _activation
from .coupling import coupling_forward
from .graph import DomainError, Graph
from . import autodiff as ad

MAX_EPSILON = 1e-2


class IntegrationError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite state at step {step}")
        self.step = step


class FitError(ValueError):
    pass


@dataclass
class OdeState:
    t: float
    X: np.ndarray


def euler_step(state: OdeState, dt: float, rhs: Callable, step: int = 0) -> OdeState:
    """One forward Euler step.

    ``rhs(t, X)`` returns either the time derivative, or a pair
    ``(tau, target)`` for the gated form, which is advanced as
    ``(1 - dt tau) X + dt tau target`` so that ``dt = 1`` reproduces a layer.
    """
    if not 0.0 < dt <= 1.0:
        raise ValueError("dt must lie in (0, 1]")
    out = rhs(state.t, state.X)
    if isinstance(out, tuple):
        tau, target = out
        dtau = tau if dt == 1.0 else tau * dt
        X = (1.0 - dtau) * state.X + dtau * target
    else:
        X = state.X + dt * out
    if not np.all(np.isfinite(X)):
        raise IntegrationError(step)
    return OdeState(state.t + dt, X)


def gated_rhs(config: G2Config, params: LayerParams, graph: Graph) -> Callable:
    """Right-hand side of the gated ODE in ``(tau, target)`` form."""

    def rhs(_t, X):
        Xv = ad.const(X)
        F_out = coupling_forward(config.coupling, params.F, graph, Xv)
        target = _activation(config.activation, F_out)
        if config.mode in ("plain", "residual"):
            tau = np.ones_like(X)
        else:
            _, tau_v = compute_rates(config, params, graph, Xv, F_out=F_out)
            tau = tau_v.data
        return tau, target.data

    return rhs


def integrate(X0: np.ndarray, dt: float, steps: int, rhs: Callable) -> OdeState:
    state = OdeState(0.0, np.asarray(X0, dtype=np.float64))
    for k in range(steps):
        state = euler_step(state, dt, rhs, k)
    return state


# -- perturbation laboratory -------------------------------------------------------

@dataclass
class PerturbationRun:
    graph: Graph
    A: StochasticMatrix
    p: float = 0.0
    clamped_node: int = 0
    epsilon: float = 1e-3
    dt: float = 1e-3
    horizon: float = 50.0
    seed: int = 0
    c: float = 0.0
    energy_series: np.ndarray | None = field(default=None, repr=False)
    t1_series: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 0 < self.epsilon <= MAX_EPSILON:
            raise ValueError(f"epsilon must lie in (0, {MAX_EPSILON}]")
        if self.p < 0:
            raise ValueError("p must be >= 0")
        if self.c < 0:
            raise ValueError("steady-state level c must be >= 0")

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def initial_perturbation(self) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        x = rng.uniform(-self.epsilon, self.epsilon, size=self.graph.num_nodes)
        x[self.clamped_node] = 0.0
        return x

    def constants(self) -> dict:
        """``min entry``, max degree, eccentricity of the clamped node, v."""
        return {
            "a_min": self.A.min_entry,
            "d_max": self.graph.max_degree,
            "ecc": eccentricity(self.graph, self.clamped_node),
            "v": self.graph.num_nodes,
        }


def sample_steps(total_steps: int, n_samples: int = 2000) -> np.ndarray:
    """Step indices to record: ``n_samples`` equal intervals, endpoints included."""
    return np.unique(np.linspace(0, total_steps, n_samples + 1).round().astype(np.int64))


@numba.njit(cache=True)
def _perturbation_kernel(x, offsets, cols, weights, p, clamp, dt, total_steps, record_at, energy, t1):
    n = x.size
    flux = np.zeros(n)
    taubar = np.zeros(n)
    k = 0
    for step in range(total_steps + 1):
        if k < record_at.size and record_at[k] == step:
            e = 0.0
            for i in range(n):
                e += x[i] * x[i]
            energy[k] = e
            # indefinite-sign term of the energy balance, reported only
            s = 0.0
            if p > 0.0:
                for i in range(n):
                    tb = 0.0
                    for q in range(offsets[i], offsets[i + 1]):
                        tb += abs(x[cols[q]] - x[i]) ** p
                    taubar[i] = tb
                for i in range(n):
                    for q in range(offsets[i], offsets[i + 1]):
                        j = cols[q]
                        s += weights[q] * (taubar[i] - taubar[j]) * (x[j] * x[j] - x[i] * x[i])
            t1[k] = 0.5 * s
            k += 1
        if step == total_steps:
            break
        for i in range(n):
            f = 0.0
            tb = 0.0
            for q in range(offsets[i], offsets[i + 1]):
                d = x[cols[q]] - x[i]
                f += weights[q] * d
                if p > 0.0:
                    tb += abs(d) ** p
            flux[i] = f * tb if p > 0.0 else f
        for i in range(n):
            x[i] += dt * flux[i]
        x[clamp] = 0.0
        for i in range(n):
            if not np.isfinite(x[i]):
                return step
    return -1


def _simulate(run: PerturbationRun, x0: np.ndarray | None = None) -> np.ndarray:
    g = run.graph
    if not g.is_connected():
        raise DomainError("perturbation runs need a connected graph")
    if not run.A.is_symmetric(atol=1e-12):
        raise ValueError("coupling matrix must be symmetric on the edges")
    x = run.initial_perturbation() if x0 is None else np.array(x0, dtype=np.float64)
    x[run.clamped_node] = 0.0
    record_at = sample_steps(run.steps)
    energy = np.zeros(record_at.size)
    t1 = np.zeros(record_at.size)
    bad = _perturbation_kernel(
        x, g.row_offsets, g.col_indices, run.A.weights, float(run.p), run.clamped_node,
        run.dt, run.steps, record_at, energy, t1,
    )
    if bad >= 0:
        raise IntegrationError(int(bad))
    series = np.stack([record_at * run.dt, energy], axis=1)
    run.energy_series = series
    run.t1_series = np.stack([record_at * run.dt, t1], axis=1)
    return series


def simulate_linearized(run: PerturbationRun, x0=None) -> np.ndarray:
    """Euler-integrate the ungated perturbation system; returns ``(t, sum x^2)`` rows."""
    if run.p != 0:
        raise ValueError("simulate_linearized needs p = 0")
    return _simulate(run, x0)


def simulate_quasilinear(run: PerturbationRun, x0=None) -> np.ndarray:
    """Euler-integrate the gradient-gated perturbation system."""
    if not run.p > 0:
        raise ValueError("simulate_quasilinear needs p > 0")
    return _simulate(run, x0)


def linear_envelope(run: PerturbationRun, t: np.ndarray, e0: float) -> np.ndarray:
    """``e0 * exp(-a_min t / (d_max ecc))``."""
    c = run.constants()
    return e0 * np.exp(-c["a_min"] * np.asarray(t) / (c["d_max"] * c["ecc"]))


def quasilinear_rate_constant(run: PerturbationRun) -> float:
    c = run.constants()
    p = run.p
    return c["a_min"] / (c["d_max"] ** (p + 1) * c["v"] ** (p / 2) * c["ecc"] ** ((p + 2) / 2))


def quasilinear_envelope(run: PerturbationRun, t: np.ndarray, e0: float) -> np.ndarray:
    """Solution of ``dE/dt = -K E^((p+2)/2)`` from ``E(0) = e0``.

    ``E(t) = e0 (1 + (p/2) K t e0^(p/2))^(-2/p)``, which decays like
    ``t^(-2/p)`` for large ``t``.
    """
    p = run.p
    K = quasilinear_rate_constant(run)
    return e0 * (1.0 + 0.5 * p * K * np.asarray(t) * e0 ** (p / 2)) ** (-2.0 / p)


# -- decay fitting --------------------------------------------------------------------

@dataclass
class DecayFit:
    model: str
    rate: float
    intercept: float
    r_squared: float
    fit_window: tuple[float, float]
    n_points: int

    @property
    def fitted_rate(self) -> float:
        return self.rate

    @property
    def fitted_exponent(self) -> float:
        return self.rate

    def to_dict(self) -> dict:
        return asdict(self)


def fit_decay(series, model: str, window: tuple[float, float] | None = None) -> DecayFit:
    """Least squares in log space.

    ``exponential`` fits ``log E = b - rate * t``; ``power_law`` fits
    ``log E = b + exponent * log t`` (``rate`` holds the exponent).
    """
    series = np.asarray(series, dtype=np.float64)
    t, e = series[:, 0], series[:, 1]
    lo, hi = (t.min(), t.max()) if window is None else window
    sel = (t >= lo) & (t <= hi)
    if model == "power_law":
        sel &= t > 0
    t, e = t[sel], e[sel]
    if t.size < 10:
        raise FitError(f"need at least 10 samples in window, got {t.size}")
    if np.any(e <= 0) or not np.all(np.isfinite(e)):
        raise FitError("energies in the fit window must be positive and finite")
    y = np.log(e)
    if model == "exponential":
        res = stats.linregress(t, y)
        rate = -res.slope
    elif model == "power_law":
        res = stats.linregress(np.log(t), y)
        rate = res.slope
    else:
        raise ValueError(f"unknown model {model!r}")
    r2 = float(min(1.0, max(0.0, res.rvalue ** 2)))
    return DecayFit(model, float(rate), float(res.intercept), r2, (float(lo), float(hi)), int(t.size))


def last_decade(series) -> tuple[float, float]:
    t_max = float(np.asarray(series)[:, 0].max())
    return t_max / 10.0, t_max


EXP_R2 = 0.95
EXP_RATIO = 1e-4
FLAT_RANGE = (1e-1, 10.0)
POWER_R2 = 0.9
UNDERFLOW = 1e-12


def decay_window(series) -> np.ndarray:
    """Leading part of a series, cut where it first falls below ``UNDERFLOW`` x start."""
    series = np.asarray(series, dtype=np.float64)
    e = series[:, 1]
    below = np.flatnonzero(~(e > UNDERFLOW * e[0]))
    end = below[0] + 1 if below.size else e.size
    out = series[:end]
    return out[out[:, 1] > 0]


def oversmoothing_verdict(series) -> str:
    """Classify a decay curve as ``exponential_decay``, ``algebraic_decay`` or ``non_decaying``.

    ``exponential_decay``: exponential r^2 >= 0.95 over the decay window and
    final/initial < 1e-4. ``non_decaying``: final/initial within [0.1, 10].
    ``algebraic_decay``: power-law r^2 >= 0.9 over the last decade. Anything
    else falls back to ``algebraic_decay`` when it has decayed below 0.1 and
    ``non_decaying`` otherwise.
    """
    series = np.asarray(series, dtype=np.float64)
    e = series[:, 1]
    if e[0] <= 0:
        return "non_decaying"
    ratio = e[-1] / e[0]
    if ratio < EXP_RATIO:
        win = decay_window(series)
        if win.shape[0] >= 10 and fit_decay(win, "exponential").r_squared >= EXP_R2:
            return "exponential_decay"
    if FLAT_RANGE[0] <= ratio <= FLAT_RANGE[1]:
        return "non_decaying"
    try:
        if fit_decay(series, "power_law", last_decade(series)).r_squared >= POWER_R2:
            return "algebraic_decay"
    except FitError:
        pass
    return "algebraic_decay" if ratio < FLAT_RANGE[0] else "non_decaying"


def write_series_csv(series, path, time_label: str = "t", value_label: str = "energy") -> None:
    """Two-column CSV; ``path`` may also be an open text stream.

    Values use ``repr`` so they round-trip exactly; a ``layer`` column is
    written as integers.
    """
    if hasattr(path, "write"):
        _write_series(series, path, time_label, value_label)
        return
    with open(path, "w", encoding="utf-8", newline="") as fh:
        _write_series(series, fh, time_label, value_label)


def _write_series(series, fh, time_label, value_label) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow([time_label, value_label])
    for t, e in np.asarray(series):
        w.writerow([int(t) if time_label == "layer" else repr(float(t)), repr(float(e))])


def write_fit_json(fits: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(fits, fh, indent=2, sort_keys=True)
        fh.write("\n")
