"""Time-varying weight construction from coupled-oscillator synchronization.

A temporal layer never applies its stored weights directly. At every
evaluation time t it rebuilds an effective weight matrix from pairwise
interactions between its base weights:

    w'_i = sum_j (K_ij / N) * sin(f(t) * (w_i - w_j) + phi(t))

with f(t) = freq_scale * t and phi(t) = phase_rate * t + phase_offset.
The whole construction is differentiable w.r.t. the base weights, the
coupling coefficients, the three time parameters, and t itself.

The pairwise interaction is implemented as one fused tape op: the N x N
intermediate is never exposed to the tape, and above `stream_threshold`
it is processed one row at a time instead of materialized.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .errors import InvalidSpecError, ShapeMismatchError
from .tensor import Parameter, Tensor, _make, add, matmul, mul

COUPLING_MODES = ("scalar", "rank1", "full")
RANGE_MODES = ("signed", "unit")

DEFAULT_FULL_CAP = 4096
DEFAULT_STREAM_THRESHOLD = 4096


class CouplingParams:
    """Learned coupling strengths between the N flattened weights.

    scalar: one shared coefficient. rank1: one coefficient per row
    (K_ij = k_i). full: a dense N x N matrix, rejected above `cap`
    because the matrix itself is a parameter and cannot be streamed.
    """

    def __init__(self, name: str, mode: str, n: int, cap: int = DEFAULT_FULL_CAP,
                 init: float = 1.0):
        if mode not in COUPLING_MODES:
            raise InvalidSpecError(f"unknown coupling mode '{mode}'")
        if mode == "full" and n > cap:
            raise InvalidSpecError(
                f"full coupling needs an {n}x{n} parameter matrix; cap is {cap}"
            )
        self.mode = mode
        self.n = n
        if mode == "scalar":
            shape = ()
        elif mode == "rank1":
            shape = (n,)
        else:
            shape = (n, n)
        self.values = Parameter(name, np.full(shape, init, dtype=np.float64))


def _sync_weights(base: Tensor, k: Tensor, freq: Tensor, rate: Tensor,
                  offset: Tensor, t, mode: str, streamed: bool,
                  d_in: int, d_out: int) -> Tensor:
    """Fused op: W'[i] = sum_j (K_ij/N) sin(freq_i t (w_i - w_j) + rate t + offset).

    One tape node covers the whole construction, so the N x N pairwise
    buffer never reaches the tape; the backward pass recomputes it from
    the saved inputs (row by row when `streamed`). Gradients flow to the
    base weights, the coupling, all three time parameters, and t itself
    when t is a tracked tensor.
    """
    t_tensor = t if isinstance(t, Tensor) else None
    tt = float(t.data) if t_tensor is not None else float(t)
    wd = base.data.ravel()
    kd = k.data
    n = wd.size
    fd = freq.data
    per_weight = fd.ndim == 1
    if per_weight and fd.size != n:
        raise ShapeMismatchError(f"per-weight frequency length {fd.size} != {n}")
    ft = fd * tt  # effective frequency, scalar or per-weight vector
    ph = float(rate.data) * tt + float(offset.data)
    rate_val = float(rate.data)

    def rows(i0, i1):
        d = wd[i0:i1, None] - wd[None, :]
        a = (ft[i0:i1, None] * d if per_weight else ft * d)
        a += ph
        return d, a

    def coupling_rows(i0, i1):
        if mode == "scalar":
            return kd / n
        if mode == "rank1":
            return kd[i0:i1, None] / n
        return kd[i0:i1] / n

    if not streamed:
        _, a = rows(0, n)
        s = np.sin(a)
        m = coupling_rows(0, n)
        out = (m * s).sum(axis=1) if mode != "scalar" else m * s.sum(axis=1)
    else:
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            _, a_i = rows(i, i + 1)
            s_i = np.sin(a_i)
            m_i = coupling_rows(i, i + 1)
            out[i] = (m_i * s_i).sum() if mode != "scalar" else m_i * s_i.sum()

    def backward(g2d):
        g = g2d.ravel()
        dw = np.zeros(n, dtype=np.float64)
        if mode == "scalar":
            dk = 0.0
        elif mode == "rank1":
            dk = np.zeros(n, dtype=np.float64)
        else:
            dk = np.zeros((n, n), dtype=np.float64)
        dfreq = np.zeros(n, dtype=np.float64) if per_weight else 0.0
        g_total = 0.0   # sum of dL/dA, drives rate/offset/t gradients
        gd_total = 0.0  # sum of dL/dA * (w_i - w_j), drives freq and t

        step = 1 if streamed else n
        for i0 in range(0, n, step):
            i1 = min(i0 + step, n)
            d, a = rows(i0, i1)
            s = np.sin(a)
            c = np.cos(a, out=a)
            m = coupling_rows(i0, i1)
            gi = g[i0:i1, None]
            gmc = gi * m * c  # dL/dA for this row block
            # dA_ij/dw_p = freq_i t (delta_pi - delta_pj)
            frow = ft[i0:i1, None] if per_weight else ft
            gf = gmc * frow
            dw[i0:i1] += gf.sum(axis=1)
            dw -= gf.sum(axis=0)
            if mode == "scalar":
                dk += float((gi * s).sum()) / n
            elif mode == "rank1":
                dk[i0:i1] += (gi * s).sum(axis=1) / n
            else:
                dk[i0:i1] += gi * s / n
            gd = gmc * d
            if per_weight:
                dfreq[i0:i1] += tt * gd.sum(axis=1)
                gd_total += float((gd * fd[i0:i1, None]).sum())
            else:
                block = float(gd.sum())
                dfreq += tt * block
                gd_total += fd * block
            g_total += float(gmc.sum())

        contribs = [
            dw.reshape(d_in, d_out),
            np.asarray(dk, dtype=np.float64),
            np.asarray(dfreq, dtype=np.float64),
            np.asarray(tt * g_total, dtype=np.float64),
            np.asarray(g_total, dtype=np.float64),
        ]
        if t_tensor is not None:
            contribs.append(np.asarray(gd_total + rate_val * g_total,
                                       dtype=np.float64))
        return contribs

    inputs = (base, k, freq, rate, offset)
    if t_tensor is not None:
        inputs = inputs + (t_tensor,)
    return _make("sync_weights", out.reshape(d_in, d_out), inputs, backward)


class TemporalWeightLayer:
    """Affine layer whose weight matrix is rebuilt from time at every call.

    The bias (when present) is ordinary and time-independent; only the
    d_in x d_out weight block goes through the synchronization scaling.
    """

    def __init__(
        self,
        prefix: str,
        d_in: int,
        d_out: int,
        rng: np.random.Generator,
        coupling_mode: str = "rank1",
        range_mode: str = "signed",
        residual: bool = False,
        per_weight_freq: bool = False,
        with_bias: bool = True,
        coupling_cap: int = DEFAULT_FULL_CAP,
        stream_threshold: int = DEFAULT_STREAM_THRESHOLD,
    ):
        if d_in <= 0 or d_out <= 0:
            raise InvalidSpecError("layer dimensions must be positive")
        if range_mode not in RANGE_MODES:
            raise InvalidSpecError(f"unknown range mode '{range_mode}'")
        self.d_in = d_in
        self.d_out = d_out
        self.n = d_in * d_out
        self.range_mode = range_mode
        self.residual = residual
        self.per_weight_freq = per_weight_freq
        self.stream_threshold = stream_threshold

        bound = 1.0 / math.sqrt(d_in)
        self.base = Parameter(
            f"{prefix}.base", rng.uniform(-bound, bound, size=(d_in, d_out))
        )
        self.coupling = CouplingParams(f"{prefix}.coupling", coupling_mode, self.n,
                                       cap=coupling_cap)
        freq_shape = (self.n,) if per_weight_freq else ()
        # start at the top of the sine (gamma = pi/2) so the layer is not
        # born into the zero-output symmetry at t = 0
        self.freq_scale = Parameter(f"{prefix}.freq_scale", np.ones(freq_shape))
        self.phase_rate = Parameter(f"{prefix}.phase_rate", 0.0)
        self.phase_offset = Parameter(f"{prefix}.phase_offset", math.pi / 2.0)
        self.bias = Parameter(f"{prefix}.bias", np.zeros(d_out)) if with_bias else None

    def parameters(self) -> list[Parameter]:
        ps = [self.base, self.coupling.values, self.freq_scale,
              self.phase_rate, self.phase_offset]
        if self.bias is not None:
            ps.append(self.bias)
        return ps

    def forward(self, h: Tensor, t) -> Tensor:
        out = matmul(h, scale(self, t))
        if self.bias is not None:
            out = add(out, self.bias.value)
        return out


class StaticLayer:
    """Plain affine layer; the time-independent baseline."""

    def __init__(self, prefix: str, d_in: int, d_out: int, rng: np.random.Generator,
                 with_bias: bool = True):
        if d_in <= 0 or d_out <= 0:
            raise InvalidSpecError("layer dimensions must be positive")
        self.d_in = d_in
        self.d_out = d_out
        bound = 1.0 / math.sqrt(d_in)
        self.weight = Parameter(
            f"{prefix}.weight", rng.uniform(-bound, bound, size=(d_in, d_out))
        )
        self.bias = Parameter(f"{prefix}.bias", np.zeros(d_out)) if with_bias else None

    def parameters(self) -> list[Parameter]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, h: Tensor, t=None) -> Tensor:
        return static_forward(self, h)


def scale(layer: TemporalWeightLayer, t) -> Tensor:
    """Effective d_in x d_out weights of `layer` at time `t`.

    `t` may be a float or a (possibly tracked) scalar Tensor. Output range
    is [-1, 1]-ish in signed mode (bounded by the coupling magnitudes) or
    mapped affinely onto [0, 1] in unit mode.
    """
    if isinstance(t, Tensor) and t.data.shape != ():
        raise ShapeMismatchError("time must be scalar")
    streamed = layer.n > layer.stream_threshold
    out = _sync_weights(layer.base.value, layer.coupling.values.value,
                        layer.freq_scale.value, layer.phase_rate.value,
                        layer.phase_offset.value, t, layer.coupling.mode,
                        streamed, layer.d_in, layer.d_out)
    if layer.range_mode == "unit":
        out = mul(add(out, 1.0), 0.5)
    if layer.residual:
        out = add(layer.base.value, out)
    return out


def static_forward(layer: StaticLayer, h: Tensor) -> Tensor:
    out = matmul(h, layer.weight.value)
    if layer.bias is not None:
        out = add(out, layer.bias.value)
    return out


def scale_complexity_probe(layer: TemporalWeightLayer, t=None) -> tuple[int, int]:
    """(flop count, peak pairwise-buffer entries) for one scale() call.

    Flop convention, chosen to match an instrumented naive double loop:
    setup costs 2 flops for the phase (rate*t + offset) plus one multiply
    per frequency entry; each (i, j) pair costs 7 flops (difference,
    frequency multiply, phase add, sine, coupling divide, coupling
    multiply, accumulate); unit-range mapping adds 2 flops per output.
    """
    n = layer.n
    setup = 2 + (n if layer.per_weight_freq else 1)
    flops = setup + 7 * n * n
    if layer.range_mode == "unit":
        flops += 2 * n
    buffer = n if n > layer.stream_threshold else n * n
    return flops, buffer
