import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from gradgate import autodiff as ad
from gradgate.coupling import CouplingConfig, make_right_stochastic
from gradgate.dynamics import (
    DecayFit,
    FitError,
    IntegrationError,
    OdeState,
    PerturbationRun,
    decay_window,
    euler_step,
    fit_decay,
    gated_rhs,
    integrate,
    last_decade,
    linear_envelope,
    oversmoothing_verdict,
    quasilinear_envelope,
    quasilinear_rate_constant,
    sample_steps,
    simulate_linearized,
    simulate_quasilinear,
    write_fit_json,
    write_series_csv,
)
from gradgate.gating import G2Config, init_layer, layer_step
from gradgate.graph import DomainError, Graph, cycle, path, random_connected


def _run(p=0.0, graph=None, **kw):
    g = graph if graph is not None else cycle(6)
    return PerturbationRun(g, make_right_stochastic(g), p=p, **kw)


# -- Euler view of a layer ---------------------------------------------------------------

@pytest.mark.parametrize("mode", ["g2", "multirate", "g2_alpha", "g2_single_rate", "plain"])
@pytest.mark.parametrize("kind", ["gcn", "gat", "sage"])
def test_unit_step_equals_layer(mode, kind):
    rng = np.random.default_rng(0)
    g = random_connected(10, 0.3, rng)
    cfg = G2Config(mode=mode, coupling=CouplingConfig(kind, 4, 4), alpha=0.5)
    lp = init_layer(cfg, rng)
    X = rng.normal(size=(10, 4))
    a = euler_step(OdeState(0.0, X), 1.0, gated_rhs(cfg, lp, g)).X
    b = layer_step(cfg, lp, g, ad.const(X)).data
    assert a.tobytes() == b.tobytes()


def test_small_steps_converge_to_ode_solution():
    # scalar linear ODE x' = -x: Euler error at t=1 is O(dt)
    rhs = lambda t, x: -x
    errs = []
    for n in (10, 100, 1000):
        st_ = integrate(np.array([[1.0]]), 1.0 / n, n, rhs)
        assert st_.t == pytest.approx(1.0)
        errs.append(abs(st_.X[0, 0] - np.exp(-1.0)))
    assert errs[1] < errs[0] / 5 and errs[2] < errs[1] / 5


def test_euler_step_errors():
    with pytest.raises(ValueError):
        euler_step(OdeState(0.0, np.ones((1, 1))), 0.0, lambda t, x: x)
    with pytest.raises(ValueError):
        euler_step(OdeState(0.0, np.ones((1, 1))), 1.5, lambda t, x: x)
    with pytest.raises(IntegrationError) as exc, np.errstate(over="ignore"):
        integrate(np.ones((1, 1)), 1.0, 5, lambda t, x: x * 1e300)
    assert exc.value.step == 1


# -- perturbation runs -------------------------------------------------------------------

def test_run_validation():
    with pytest.raises(ValueError):
        _run(epsilon=0.1)
    with pytest.raises(ValueError):
        _run(p=-1.0)
    with pytest.raises(ValueError):
        simulate_linearized(_run(p=2.0))
    with pytest.raises(ValueError):
        simulate_quasilinear(_run(p=0.0))


def test_disconnected_graph_is_a_domain_error():
    g = Graph.from_edges(4, [(0, 1), (2, 3)])
    with pytest.raises(DomainError):
        simulate_linearized(_run(graph=g))


def test_asymmetric_coupling_rejected():
    with pytest.raises(ValueError, match="symmetric"):
        simulate_linearized(_run(graph=path(3)))


def test_sample_steps():
    s = sample_steps(50_000)
    assert s[0] == 0 and s[-1] == 50_000 and s.size == 2001
    assert np.all(np.diff(s) == 25)
    assert np.array_equal(sample_steps(7), np.arange(8))


def _euler_matrix(run):
    A = run.A.dense()
    M = A - np.diag(A.sum(axis=1))
    P = np.eye(run.graph.num_nodes)
    P[run.clamped_node, run.clamped_node] = 0.0
    return P @ (np.eye(run.graph.num_nodes) + run.dt * M)


def test_linear_run_matches_matrix_power_oracle():
    run = _run(horizon=5.0, dt=1e-2)
    series = simulate_linearized(run)
    step = _euler_matrix(run)
    x0 = run.initial_perturbation()
    for k, (t, e) in zip(sample_steps(run.steps), series):
        x = np.linalg.matrix_power(step, int(k)) @ x0
        assert e == pytest.approx(np.sum(x * x), rel=1e-10)


def test_linear_run_close_to_exact_exponential():
    run = _run(horizon=20.0)
    series = simulate_linearized(run)
    A = run.A.dense()
    M = A - np.diag(A.sum(axis=1))
    keep = np.arange(6) != run.clamped_node
    Mr = M[np.ix_(keep, keep)]
    x0 = run.initial_perturbation()[keep]
    for t, e in series[::200]:
        x = expm(Mr * t) @ x0
        assert e == pytest.approx(np.sum(x * x), rel=1e-2)


def test_quasilinear_run_close_to_ode_solution():
    run = _run(p=2.0, epsilon=1e-2, dt=1e-1, horizon=2000.0)
    series = simulate_quasilinear(run)
    g, w = run.graph, run.A.weights

    def f(_t, x):
        d = x[g.col_indices] - x[g.row_indices]
        flux = np.zeros_like(x)
        tb = np.zeros_like(x)
        np.add.at(flux, g.row_indices, w * d)
        np.add.at(tb, g.row_indices, np.abs(d) ** run.p)
        out = flux * tb
        out[run.clamped_node] = 0.0
        return out

    ts = series[::100, 0]
    sol = solve_ivp(f, (0, ts[-1]), run.initial_perturbation(), t_eval=ts, rtol=1e-10, atol=1e-16)
    exact = np.sum(sol.y ** 2, axis=0)
    assert np.allclose(series[::100, 1], exact, rtol=1e-2)


def test_energy_nonincreasing_and_t1_recorded():
    run = _run(p=2.0, epsilon=1e-2, dt=0.1, horizon=500.0)
    e = simulate_quasilinear(run)[:, 1]
    assert np.all(np.diff(e) <= 1e-18)
    assert run.t1_series.shape == run.energy_series.shape
    lin = _run()
    simulate_linearized(lin)
    assert np.all(lin.t1_series[:, 1] == 0.0)


def test_clamped_node_stays_zero():
    run = _run(graph=cycle(9), clamped_node=4, horizon=1.0)
    series = simulate_linearized(run, np.ones(9))
    assert series[0, 1] == 8.0
    assert run.initial_perturbation()[4] == 0.0


def test_constants_on_cycle():
    c = _run().constants()
    assert c == {"a_min": 0.5, "d_max": 2, "ecc": 3, "v": 6}


# -- envelopes ---------------------------------------------------------------------------

def test_linear_envelope_formula():
    run = _run()
    t = np.array([0.0, 6.0])
    env = linear_envelope(run, t, 2.0)
    assert env[0] == 2.0 and env[1] == pytest.approx(2.0 * np.exp(-0.5 * 6 / 6))


@pytest.mark.parametrize("p", [1.0, 2.0, 4.0])
def test_quasilinear_envelope_solves_its_ode(p):
    run = _run(p=p)
    K = quasilinear_rate_constant(run)
    e0 = 3e-6
    t = np.linspace(0, 1e6, 101)
    E = quasilinear_envelope(run, t, e0)
    assert E[0] == e0
    h = 1e-3 * t[1:-1]
    dE = (quasilinear_envelope(run, t[1:-1] + h, e0) - quasilinear_envelope(run, t[1:-1] - h, e0)) / (2 * h)
    assert np.allclose(dE, -K * E[1:-1] ** ((p + 2) / 2), rtol=1e-5)


def test_quasilinear_envelope_tail_exponent():
    run = _run(p=2.0)
    t = np.array([1e20, 1e21])
    E = quasilinear_envelope(run, t, 1e-6)
    assert np.log(E[1] / E[0]) / np.log(10) == pytest.approx(-1.0, abs=1e-6)


def test_rate_constant_on_cycle():
    # a_min / (d^(p+1) v^(p/2) ecc^((p+2)/2)) with 0.5, 2, 6, 3 at p = 2
    assert quasilinear_rate_constant(_run(p=2.0)) == pytest.approx(0.5 / (8 * 6 * 9))


# -- fits and verdicts -------------------------------------------------------------------

def test_exponential_fit_exact():
    t = np.linspace(0, 10, 200)
    fit = fit_decay(np.stack([t, 3 * np.exp(-0.5 * t)], 1), "exponential")
    assert fit.rate == pytest.approx(0.5, abs=1e-12) and fit.r_squared == pytest.approx(1.0)
    assert fit.intercept == pytest.approx(np.log(3))


def test_power_fit_exact_and_window():
    t = np.linspace(0, 1e4, 1001)
    e = np.where(t > 0, 7.0 / np.maximum(t, 1e-300), 1.0)
    fit = fit_decay(np.stack([t, e], 1), "power_law", last_decade(np.stack([t, e], 1)))
    assert fit.fitted_exponent == pytest.approx(-1.0, abs=1e-12)
    assert fit.fit_window == (1e3, 1e4) and fit.n_points == 901


def test_fit_errors():
    with pytest.raises(FitError):
        fit_decay(np.stack([np.arange(5.0), np.ones(5)], 1), "exponential")
    t = np.arange(20.0)
    with pytest.raises(FitError):
        fit_decay(np.stack([t, np.zeros(20)], 1), "exponential")
    with pytest.raises(ValueError):
        fit_decay(np.stack([t, np.ones(20)], 1), "cubic")


def test_verdicts_on_synthetic_curves():
    t = np.arange(0, 1001, dtype=float)
    assert oversmoothing_verdict(np.stack([t, np.exp(-0.3 * t)], 1)) == "exponential_decay"
    assert oversmoothing_verdict(np.stack([t, 1.0 + 0.1 * np.sin(t)], 1)) == "non_decaying"
    assert oversmoothing_verdict(np.stack([t, 1.0 / (1.0 + t)], 1)) == "algebraic_decay"
    assert oversmoothing_verdict(np.stack([t, np.zeros_like(t)], 1)) == "non_decaying"


def test_verdict_with_underflow_to_zero():
    t = np.arange(0, 100, dtype=float)
    e = np.exp(-2 * t)
    e[40:] = 0.0
    assert oversmoothing_verdict(np.stack([t, e], 1)) == "exponential_decay"
    assert decay_window(np.stack([t, e], 1)).shape[0] <= 40


def test_series_csv_roundtrip(tmp_path):
    series = np.stack([np.linspace(0, 1, 7), np.random.default_rng(0).uniform(size=7)], 1)
    write_series_csv(series, tmp_path / "s.csv")
    with open(tmp_path / "s.csv", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "energy"]
    assert np.array_equal(np.array(rows[1:], dtype=float), series)
    write_fit_json({"x": DecayFit("exponential", 1.0, 0.0, 1.0, (0.0, 1.0), 10).to_dict()}, tmp_path / "f.json")
    assert '"model": "exponential"' in (tmp_path / "f.json").read_text()


@settings(max_examples=20, deadline=None)
@given(st.integers(3, 12), st.integers(0, 2**32 - 1))
def test_linear_decay_bounded_by_envelope_on_regular_graphs(n, seed):
    run = _run(graph=cycle(n), seed=seed, horizon=20.0, dt=1e-2)
    series = simulate_linearized(run)
    env = linear_envelope(run, series[:, 0], series[0, 1])
    assert np.all(series[:, 1] <= 1.05 * env)
