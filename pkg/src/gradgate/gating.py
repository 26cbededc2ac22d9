"""Gradient-gated multi-rate message passing layers.

One layer maps ``X_prev`` (v x m) to ``X_next`` (v x m). The update modes are

* ``plain``          ``sigma(F(X))``
* ``residual``       ``X + sigma(F(X))``
* ``multirate``      ``(1 - tau) * X + tau * sigma(F(X))`` with ``tau = logistic(Fhat(X))``
* ``g2``             same convex update, ``tau_ik = tanh(agg_j |tauhat_jk - tauhat_ik|^p)``
* ``g2_alpha``       ``g2`` with ``tau`` replaced by ``tau**alpha``
* ``g2_single_rate`` one rate per node, ``tau_i = tanh(sum_j ||tauhat_j - tauhat_i||_p)``

``tauhat = logistic(Fhat(X))`` throughout. Without a separate ``Fhat`` the
layer reuses ``F(X)`` for it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Value
from .coupling import CouplingConfig, coupling_forward, init_coupling
from .graph import Graph

MODES = ("plain", "residual", "multirate", "g2", "g2_alpha", "g2_single_rate")
GATED_MODES = ("g2", "g2_alpha", "g2_single_rate")
CONVEX_MODES = ("multirate",) + GATED_MODES


class PropagationError(RuntimeError):
    def __init__(self, layer: int, message: str = "non-finite values"):
        super().__init__(f"layer {layer}: {message}")
        self.layer = layer


@dataclass(frozen=True)
class G2Config:
    mode: str
    coupling: CouplingConfig
    p: float = 2.0
    alpha: float = 1.0
    aggregation: str = "sum"
    use_separate_Fhat: bool = False
    activation: str = "relu"
    num_layers: int = 1
    coupling_hat: CouplingConfig | None = None
    share_weights: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode in GATED_MODES and not self.p > 0:
            raise ValueError("p must be > 0 in gated modes")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.aggregation not in ("sum", "mean", "max"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.coupling.in_dim != self.coupling.out_dim:
            raise ValueError("hidden layers need equal in/out width")
        if self.use_separate_Fhat and self.coupling_hat is None:
            object.__setattr__(self, "coupling_hat", self.coupling)

    @property
    def width(self) -> int:
        return self.coupling.out_dim

    @property
    def needs_rates(self) -> bool:
        return self.mode in CONVEX_MODES

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "G2Config":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("coupling", "coupling_hat"):
            sub = d.get(key)
            if isinstance(sub, dict):
                ck = {f.name for f in fields(CouplingConfig)}
                bad = set(sub) - ck
                if bad:
                    raise ValueError(f"unknown {key} keys: {sorted(bad)}")
                d[key] = CouplingConfig(**sub)
        return cls(**d)


def load_config(path) -> G2Config:
    with open(path, encoding="utf-8") as fh:
        return G2Config.from_dict(json.load(fh))


def save_config(config: G2Config, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass
class LayerParams:
    F: dict[str, Parameter]
    Fhat: dict[str, Parameter] | None = None

    def all(self) -> list[Parameter]:
        out = list(self.F.values())
        if self.Fhat is not None:
            out += list(self.Fhat.values())
        return out


def init_layer(config: G2Config, rng: np.random.Generator, prefix: str = "layer0.") -> LayerParams:
    F = init_coupling(config.coupling, rng, prefix + "F.")
    Fhat = None
    if config.use_separate_Fhat and config.needs_rates:
        Fhat = init_coupling(config.coupling_hat, rng, prefix + "Fhat.")
    return LayerParams(F, Fhat)


def _activation(name: str, x: Value) -> Value:
    return ad.relu(x) if name == "relu" else ad.tanh(x)


def rates_from_tau_hat(config: G2Config, graph: Graph, tau_hat: Value) -> Value:
    """Gate ``tau_hat`` by its graph gradient; returns ``tau`` (v x m, or v x 1)."""
    diff = ad.row_gather(tau_hat, graph.col_indices) - ad.row_gather(tau_hat, graph.row_indices)
    if config.mode == "g2_single_rate":
        ones = ad.const(np.ones((tau_hat.shape[1], 1)))
        norms = ad.abs_pow(ad.abs_pow(diff, config.p) @ ones, 1.0 / config.p)
        return ad.tanh(ad.segment_reduce(norms, graph.row_offsets, "sum"))
    agg = ad.segment_reduce(ad.abs_pow(diff, config.p), graph.row_offsets, config.aggregation)
    tau = ad.tanh(agg)
    if config.mode == "g2_alpha":
        if config.alpha == 0.0:
            return ad.const(np.ones(tau.shape))
        if config.alpha != 1.0:
            tau = ad.abs_pow(tau, config.alpha)
    return tau


def compute_rates(
    config: G2Config,
    params: LayerParams,
    graph: Graph,
    X_prev: Value,
    tape: Tape | None = None,
    F_out: Value | None = None,
) -> tuple[Value, Value]:
    """Return ``(tau_hat, tau)`` for one layer.

    ``F_out`` may pass an already computed ``F(X_prev)`` for reuse when
    ``Fhat`` is shared with ``F``.
    """
    if config.mode not in CONVEX_MODES:
        raise ValueError(f"mode {config.mode!r} has no rates")
    if params.Fhat is not None:
        pre = coupling_forward(config.coupling_hat, params.Fhat, graph, X_prev, tape)
    else:
        pre = F_out if F_out is not None else coupling_forward(config.coupling, params.F, graph, X_prev, tape)
    tau_hat = ad.sigmoid(pre)
    if config.mode == "multirate":
        return tau_hat, tau_hat
    return tau_hat, rates_from_tau_hat(config, graph, tau_hat)


def convex_update(X_prev: Value, tau: Value, target: Value) -> Value:
    return ad.mul(ad.one_minus(tau), X_prev) + ad.mul(tau, target)


def layer_step(
    config: G2Config,
    params: LayerParams,
    graph: Graph,
    X_prev: Value,
    tape: Tape | None = None,
    tau_override=None,
    dt: float | None = None,
) -> Value:
    """Advance one layer.

    ``tau_override`` replaces the learned rates (limit checks). ``dt`` rescales
    the rates as in the forward Euler view; ``dt=None`` means no rescaling.
    """
    if not isinstance(X_prev, Value):
        X_prev = ad.const(X_prev)
    if X_prev.shape[1] != config.width:
        raise ValueError(f"width mismatch: X has {X_prev.shape[1]} columns, layer expects {config.width}")
    F_out = coupling_forward(config.coupling, params.F, graph, X_prev, tape)
    target = _activation(config.activation, F_out)
    if config.mode == "plain" and tau_override is None:
        return target
    if config.mode == "residual" and tau_override is None:
        return X_prev + target
    if tau_override is not None:
        tau = ad.const(tau_override) if not isinstance(tau_override, Value) else tau_override
    else:
        _, tau = compute_rates(config, params, graph, X_prev, tape, F_out=F_out)
    if dt is not None:
        tau = ad.scale(tau, dt)
    return convex_update(X_prev, tau, target)


LayerSource = Sequence[LayerParams] | Callable[[int], LayerParams]


def _layer_getter(layer_params: LayerSource) -> Callable[[int], LayerParams]:
    if callable(layer_params):
        return layer_params
    seq = list(layer_params)
    if len(seq) == 1:
        return lambda n: seq[0]
    return lambda n: seq[n]


def propagate(
    config: G2Config,
    layer_params: LayerSource,
    graph: Graph,
    X0,
    layers: int | None = None,
    callback: Callable[[int, np.ndarray], None] | None = None,
    return_all: bool = False,
    tape: Tape | None = None,
):
    """Iterate ``layer_step``.

    ``layer_params`` is one shared ``LayerParams``, a per-layer list, or a
    callable ``n -> LayerParams`` (fresh weights drawn lazily). ``callback``
    sees ``(layer_number, X)`` after every layer, counting from 1.
    """
    layers = config.num_layers if layers is None else layers
    if layers < 1:
        raise ValueError("layers must be >= 1")
    get = _layer_getter(layer_params)
    X = X0 if isinstance(X0, Value) else ad.const(X0)
    history = []
    for n in range(layers):
        X = layer_step(config, get(n), graph, X, tape)
        if not np.all(np.isfinite(X.data)):
            raise PropagationError(n + 1)
        if callback is not None:
            callback(n + 1, X.data)
        if return_all:
            history.append(X.data)
    return history if return_all else X


def fresh_layers(config: G2Config, seed: int) -> Callable[[int], LayerParams]:
    """Independent Glorot weights per layer, reproducible from ``seed``."""
    cache: dict[int, LayerParams] = {}

    def get(n: int) -> LayerParams:
        if n not in cache:
            cache.clear()
            cache[n] = init_layer(config, np.random.default_rng([seed, n]), f"layer{n}.")
        return cache[n]

    return get


@dataclass
class MaxPrincipleReport:
    min_seen: float
    max_seen: float
    lower: float
    upper: float
    holds: bool


def max_principle_check(
    config: G2Config,
    layer_params: LayerSource,
    graph: Graph,
    X0,
    layers: int,
    slack: float = 1e-12,
) -> MaxPrincipleReport:
    """Track global extrema over a propagation and compare with ``[-1, 1]``.

    The bound is ``[min(-1, inf sigma), max(1, sup sigma)]``, which is
    ``[-1, 1]`` for tanh. Non-convex modes are tracked but not guaranteed.
    """
    if config.activation != "tanh":
        raise ValueError("the [-1, 1] bound needs a tanh activation")
    X0 = np.asarray(X0, dtype=np.float64)
    lo, hi = [float(X0.min())], [float(X0.max())]

    def track(_n, X):
        lo[0] = min(lo[0], float(X.min()))
        hi[0] = max(hi[0], float(X.max()))

    propagate(config, layer_params, graph, X0, layers, callback=track)
    holds = lo[0] >= -1.0 - slack and hi[0] <= 1.0 + slack
    return MaxPrincipleReport(lo[0], hi[0], -1.0, 1.0, holds)


# -- full model: encoder -> hidden stack -> decoder ------------------------------

@dataclass
class G2Model:
    """Linear encoder, ``num_layers`` hidden layers of constant width, linear decoder."""

    config: G2Config
    in_dim: int
    out_dim: int
    encoder: dict[str, Parameter]
    decoder: dict[str, Parameter]
    layers: list[LayerParams] = field(default_factory=list)

    @classmethod
    def create(cls, config: G2Config, in_dim: int, out_dim: int, seed: int) -> "G2Model":
        rng = np.random.default_rng([seed, 7919])
        from .coupling import glorot

        m = config.width
        enc = {"W": Parameter("enc.W", glorot(rng, in_dim, m)), "b": Parameter("enc.b", np.zeros((1, m)))}
        dec = {"W": Parameter("dec.W", glorot(rng, m, out_dim)), "b": Parameter("dec.b", np.zeros((1, out_dim)))}
        n_sets = 1 if config.share_weights else config.num_layers
        layers = [init_layer(config, rng, f"layer{n}.") for n in range(n_sets)]
        return cls(config, in_dim, out_dim, enc, dec, layers)

    def parameters(self) -> list[Parameter]:
        out = list(self.encoder.values())
        for lp in self.layers:
            out += lp.all()
        out += list(self.decoder.values())
        return out

    def param_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def hidden(self, graph: Graph, X, tape: Tape | None = None, dropout: float = 0.0, rng=None, train=False) -> Value:
        X = X if isinstance(X, Value) else ad.const(X)
        X = ad.dropout(X, dropout, rng, train)
        H = ad.relu(X @ ad.param(tape, self.encoder["W"]) + ad.param(tape, self.encoder["b"]))
        return propagate(self.config, self.layers, graph, H, self.config.num_layers, tape=tape)

    def forward(
        self,
        graph: Graph,
        X,
        tape: Tape | None = None,
        train: bool = False,
        dropout_in: float = 0.0,
        dropout_out: float = 0.0,
        rng: np.random.Generator | None = None,
    ) -> Value:
        H = self.hidden(graph, X, tape, dropout_in, rng, train)
        H = ad.dropout(H, dropout_out, rng, train)
        return H @ ad.param(tape, self.decoder["W"]) + ad.param(tape, self.decoder["b"])


FAMILIES = {
    "gcn": ("plain", "gcn"),
    "gat": ("plain", "gat"),
    "sage": ("plain", "sage"),
    "res-gcn": ("residual", "gcn"),
    "mr-gcn": ("multirate", "gcn"),
    "g2-gcn": ("g2", "gcn"),
    "g2-gat": ("g2", "gat"),
    "g2-sage": ("g2", "sage"),
}


def family_config(family: str, width: int, num_layers: int, **overrides) -> G2Config:
    """Config for a named model family such as ``gcn`` or ``g2-gat``."""
    if family not in FAMILIES:
        raise ValueError(f"unknown model family {family!r}; choose from {sorted(FAMILIES)}")
    mode, kind = FAMILIES[family]
    mode = overrides.pop("mode", mode)
    agg = overrides.pop("coupling_aggregation", "mean")
    coupling = CouplingConfig(kind, width, width, aggregation=agg)
    return G2Config(mode=mode, coupling=coupling, num_layers=num_layers, **overrides)
