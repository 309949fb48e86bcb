"""Model assembly: ODE vector-field nets, GRU cell, ODE-RNN encoder,
and the encoder/decoder latent model for irregularly sampled series.

The vector-field nets come in two flavors sharing one interface: static
layers apply stored weights, temporal layers rebuild their weights at
every evaluation time the solver chooses. The encoder walks observations
latest-first, evolving its hidden state through the gaps and applying a
masked GRU update at each observed time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import (
    EmptySeriesError,
    InvalidSpecError,
    NoTaskHeadError,
    ShapeMismatchError,
)
from .solver import SolverConfig, evolve
from .temporal import (
    DEFAULT_FULL_CAP,
    DEFAULT_STREAM_THRESHOLD,
    StaticLayer,
    TemporalWeightLayer,
)
from .tensor import (
    Parameter,
    Tensor,
    add,
    concat_cols,
    matmul,
    mul,
    sigmoid,
    softplus,
    sub,
    tanh,
)

SIGMA_FLOOR = 1e-4

Layer = Union[TemporalWeightLayer, StaticLayer]


@dataclass
class LayerOptions:
    """Knobs shared by every temporal layer in a model."""

    coupling_mode: str = "rank1"
    range_mode: str = "signed"
    residual: bool = False
    per_weight_freq: bool = False
    coupling_cap: int = DEFAULT_FULL_CAP
    stream_threshold: int = DEFAULT_STREAM_THRESHOLD


class OdeFuncNet:
    """Stack of affine layers with tanh after every layer.

    Input and output widths equal the state width, so the net is a vector
    field on the state space; interior layers share `hidden_width`.
    """

    def __init__(self, prefix: str, state_width: int, hidden_width: int,
                 n_layers: int, temporal: bool, rng: np.random.Generator,
                 options: Optional[LayerOptions] = None):
        if n_layers < 1:
            raise InvalidSpecError("an ODE net needs at least one layer")
        options = options or LayerOptions()
        dims = [state_width]
        dims += [hidden_width] * (n_layers - 1)
        dims += [state_width]
        self.state_width = state_width
        self.temporal = temporal
        self.layers: list[Layer] = []
        for i, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
            name = f"{prefix}.layer{i}"
            if temporal:
                self.layers.append(TemporalWeightLayer(
                    name, d_in, d_out, rng,
                    coupling_mode=options.coupling_mode,
                    range_mode=options.range_mode,
                    residual=options.residual,
                    per_weight_freq=options.per_weight_freq,
                    coupling_cap=options.coupling_cap,
                    stream_threshold=options.stream_threshold,
                ))
            else:
                self.layers.append(StaticLayer(name, d_in, d_out, rng))

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, t: float, h: Tensor) -> Tensor:
        return ode_func_forward(self, t, h)

    def rhs(self, t: float, h: Tensor) -> Tensor:
        return ode_func_forward(self, t, h)


def ode_func_forward(net: OdeFuncNet, t: float, h: Tensor) -> Tensor:
    """dh/dt at time t; temporal layers rebuild weights at this exact t."""
    if h.data.ndim != 2 or h.data.shape[1] != net.state_width:
        raise ShapeMismatchError(
            f"state width {h.data.shape} does not match net input {net.state_width}"
        )
    out = h
    for layer in net.layers:
        out = tanh(layer.forward(out, t))
    return out


class GruCell:
    """Gated recurrent update over masked features.

    The input presented to the gates is [x * mask, mask], so the cell can
    distinguish a true zero from a missing value. Rows whose mask is all
    zero pass their hidden state through unchanged.
    """

    def __init__(self, prefix: str, input_width: int, hidden_width: int,
                 rng: np.random.Generator, temporal: bool = False,
                 options: Optional[LayerOptions] = None):
        self.input_width = input_width  # feature width before mask concat
        self.hidden_width = hidden_width
        self.temporal = temporal
        gate_in = 2 * input_width
        self._maps = {}
        for gate in ("update", "reset", "cand"):
            if temporal:
                opts = options or LayerOptions()
                w = TemporalWeightLayer(f"{prefix}.{gate}.input", gate_in,
                                        hidden_width, rng, with_bias=False,
                                        coupling_mode=opts.coupling_mode,
                                        range_mode=opts.range_mode,
                                        residual=opts.residual,
                                        per_weight_freq=opts.per_weight_freq,
                                        coupling_cap=opts.coupling_cap,
                                        stream_threshold=opts.stream_threshold)
                u = TemporalWeightLayer(f"{prefix}.{gate}.hidden", hidden_width,
                                        hidden_width, rng, with_bias=False,
                                        coupling_mode=opts.coupling_mode,
                                        range_mode=opts.range_mode,
                                        residual=opts.residual,
                                        per_weight_freq=opts.per_weight_freq,
                                        coupling_cap=opts.coupling_cap,
                                        stream_threshold=opts.stream_threshold)
            else:
                bound_w = 1.0 / math.sqrt(gate_in)
                bound_u = 1.0 / math.sqrt(hidden_width)
                w = Parameter(f"{prefix}.{gate}.input",
                              rng.uniform(-bound_w, bound_w, size=(gate_in, hidden_width)))
                u = Parameter(f"{prefix}.{gate}.hidden",
                              rng.uniform(-bound_u, bound_u, size=(hidden_width, hidden_width)))
            b = Parameter(f"{prefix}.{gate}.bias", np.zeros(hidden_width))
            self._maps[gate] = (w, u, b)

    def parameters(self) -> list[Parameter]:
        ps = []
        for w, u, b in self._maps.values():
            for m in (w, u):
                if isinstance(m, Parameter):
                    ps.append(m)
                else:
                    ps.extend(m.parameters())
            ps.append(b)
        return ps

    def _apply(self, gate: str, u_in: Tensor, h: Tensor, t: float) -> Tensor:
        w, uu, b = self._maps[gate]
        if isinstance(w, Parameter):
            lin = add(matmul(u_in, w.value), matmul(h, uu.value))
        else:
            lin = add(w.forward(u_in, t), uu.forward(h, t))
        return add(lin, b.value)


def gru_update(cell: GruCell, h: Tensor, x, mask, t: float = 0.0) -> Tensor:
    """Standard GRU step on [x * mask, mask]; fully masked rows keep h."""
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
        mask = mask[None, :]
    if x.shape != mask.shape or x.shape[1] != cell.input_width:
        raise ShapeMismatchError(f"gru input {x.shape} / mask {mask.shape}")
    if h.data.shape != (x.shape[0], cell.hidden_width):
        raise ShapeMismatchError(f"gru hidden {h.data.shape}")
    if not mask.any():
        return h

    u_in = concat_cols(Tensor(x * mask), Tensor(mask))
    z = sigmoid(cell._apply("update", u_in, h, t))
    r = sigmoid(cell._apply("reset", u_in, h, t))
    w, uu, b = cell._maps["cand"]
    rh = mul(r, h)
    if isinstance(w, Parameter):
        lin = add(matmul(u_in, w.value), matmul(rh, uu.value))
    else:
        lin = add(w.forward(u_in, t), uu.forward(rh, t))
    c = tanh(add(lin, b.value))
    h_new = add(mul(z, h), mul(sub(1.0, z), c))

    row_live = mask.any(axis=1).astype(np.float64)
    if row_live.all():
        return h_new
    blend = np.repeat(row_live[:, None], cell.hidden_width, axis=1)
    return add(mul(h_new, Tensor(blend)), mul(h, Tensor(1.0 - blend)))


class OdeRnnEncoder:
    """Recurrent encoder that evolves its hidden state through time gaps."""

    def __init__(self, prefix: str, feature_width: int, hidden_width: int,
                 latent_width: int, dynamics: OdeFuncNet, rng: np.random.Generator,
                 gru_temporal: bool = False, options: Optional[LayerOptions] = None):
        self.feature_width = feature_width
        self.hidden_width = hidden_width
        self.latent_width = latent_width
        self.gru = GruCell(f"{prefix}.gru", feature_width, hidden_width, rng,
                           temporal=gru_temporal, options=options)
        self.dynamics = dynamics
        bound = 1.0 / math.sqrt(hidden_width)
        self.mu_weight = Parameter(f"{prefix}.mu_head.weight",
                                   rng.uniform(-bound, bound, size=(hidden_width, latent_width)))
        self.mu_bias = Parameter(f"{prefix}.mu_head.bias", np.zeros(latent_width))
        self.sigma_weight = Parameter(f"{prefix}.sigma_head.weight",
                                      rng.uniform(-bound, bound, size=(hidden_width, latent_width)))
        self.sigma_bias = Parameter(f"{prefix}.sigma_head.bias", np.zeros(latent_width))

    def parameters(self) -> list[Parameter]:
        return (self.gru.parameters() + self.dynamics.parameters()
                + [self.mu_weight, self.mu_bias, self.sigma_weight, self.sigma_bias])


class LatentOdeModel:
    """Encoder/decoder model over a continuous latent trajectory."""

    def __init__(self, feature_width: int, latent_width: int,
                 encoder: OdeRnnEncoder, decoder_dynamics: OdeFuncNet,
                 rng: np.random.Generator, n_classes: Optional[int] = None):
        self.feature_width = feature_width
        self.latent_width = latent_width
        self.encoder = encoder
        self.decoder_dynamics = decoder_dynamics
        bound = 1.0 / math.sqrt(latent_width)
        self.proj_weight = Parameter("decoder.output_proj.weight",
                                     rng.uniform(-bound, bound, size=(latent_width, feature_width)))
        self.proj_bias = Parameter("decoder.output_proj.bias", np.zeros(feature_width))
        if n_classes is not None:
            self.head_weight = Parameter("task_head.weight",
                                         rng.uniform(-bound, bound, size=(latent_width, n_classes)))
            self.head_bias = Parameter("task_head.bias", np.zeros(n_classes))
        else:
            self.head_weight = None
            self.head_bias = None

    def parameters(self) -> list[Parameter]:
        ps = self.encoder.parameters() + self.decoder_dynamics.parameters()
        ps += [self.proj_weight, self.proj_bias]
        if self.head_weight is not None:
            ps += [self.head_weight, self.head_bias]
        return ps


def encode(model: LatentOdeModel, times, values, mask,
           solver: SolverConfig, t0: Optional[float] = None) -> tuple[Tensor, Tensor]:
    """Posterior (mu, sigma) over the initial latent state.

    Walks the observed times latest-first: GRU update at each time with at
    least one observed feature, ODE evolution across the gaps, then an
    optional final evolution back to `t0` (default: times[0]) so the
    returned posterior refers to the trajectory's start time.
    """
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if values.ndim == 2:
        values = values[None]
        mask = mask[None]
    n_batch, n_times, width = values.shape
    if width != model.encoder.feature_width:
        raise ShapeMismatchError(f"feature width {width}")
    if n_times != times.size:
        raise ShapeMismatchError("times/values length mismatch")

    order = np.argsort(times, kind="stable")  # encoder sorts for itself
    times = times[order]
    values = values[:, order, :]
    mask = mask[:, order, :]

    observed = [i for i in range(n_times) if mask[:, i, :].any()]
    if not observed:
        raise EmptySeriesError("series has no observed points")
    if t0 is None:
        t0 = float(times[0])

    enc = model.encoder
    rhs = enc.dynamics.rhs
    h = Tensor(np.zeros((n_batch, enc.hidden_width)))
    t_cur: Optional[float] = None
    for i in reversed(observed):
        t_i = float(times[i])
        if t_cur is not None and t_cur != t_i:
            h = evolve(rhs, h, t_cur, t_i, solver)
        h = gru_update(enc.gru, h, values[:, i, :], mask[:, i, :], t=t_i)
        t_cur = t_i
    if t_cur != t0:
        h = evolve(rhs, h, t_cur, t0, solver)

    mu = add(matmul(h, enc.mu_weight.value), enc.mu_bias.value)
    sigma = add(softplus(add(matmul(h, enc.sigma_weight.value), enc.sigma_bias.value)),
                SIGMA_FLOOR)
    return mu, sigma


def sample_z0(mu: Tensor, sigma: Tensor, noise) -> Tensor:
    """Reparameterized draw z0 = mu + sigma * noise."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != mu.data.shape:
        raise ShapeMismatchError(f"noise shape {noise.shape} != {mu.data.shape}")
    return add(mu, mul(sigma, Tensor(noise)))


def decode(model: LatentOdeModel, z0: Tensor, times,
           solver: SolverConfig) -> list[Tensor]:
    """Latent trajectory from z0 projected to feature space at each time.

    `times[0]` is the time z0 refers to; the solver integrates forward
    and the affine projection is applied at every requested time.
    """
    from .solver import OdeProblem, odesolve_at

    times = [float(t) for t in times]
    problem = OdeProblem(model.decoder_dynamics.rhs, z0, (times[0], times[-1]))
    states = odesolve_at(problem, times, solver)
    return [add(matmul(s, model.proj_weight.value), model.proj_bias.value)
            for s in states]


def classify(model: LatentOdeModel, z: Tensor) -> Tensor:
    """Affine logits from a latent vector; no softmax."""
    if model.head_weight is None:
        raise NoTaskHeadError("model was built without a task head")
    return add(matmul(z, model.head_weight.value), model.head_bias.value)


def param_count(obj) -> tuple[int, dict[str, int]]:
    """Total scalar parameter count plus a per-component breakdown.

    The breakdown groups parameter paths by their first two segments
    (e.g. "encoder.gru", "decoder.dynamics").
    """
    if hasattr(obj, "parameters"):
        params = obj.parameters()
    else:
        params = list(obj)
    breakdown: dict[str, int] = {}
    total = 0
    for p in params:
        total += p.size
        key = ".".join(p.name.split(".")[:2])
        breakdown[key] = breakdown.get(key, 0) + p.size
    return total, breakdown
