import math

import numpy as np
import pytest

from tempo_ode.errors import InvalidSpecError
from tempo_ode.temporal import (
    CouplingParams,
    StaticLayer,
    TemporalWeightLayer,
    scale,
    scale_complexity_probe,
    static_forward,
)
from tempo_ode.tensor import Parameter, Tape, Tensor

from conftest import assert_grads_close, finite_difference_grads


def naive_scale(w_flat, k, mode, f, phase, range_mode="signed"):
    """Direct double-loop evaluation of the synchronization sum."""
    n = w_flat.size
    out = np.zeros(n)
    for i in range(n):
        for j in range(n):
            if mode == "scalar":
                kij = k
            elif mode == "rank1":
                kij = k[i]
            else:
                kij = k[i, j]
            out[i] += (kij / n) * math.sin(f * (w_flat[i] - w_flat[j]) + phase)
    if range_mode == "unit":
        out = (out + 1.0) / 2.0
    return out


def naive_scale_flops(n, per_weight_freq=False, range_mode="signed"):
    """Instrumented flop count of the naive loop, mirroring the probe docs."""
    flops = 2 + (n if per_weight_freq else 1)  # phase; frequency multiplies
    flops += 7 * n * n  # diff, f-mul, phase-add, sin, k-div, k-mul, accumulate
    if range_mode == "unit":
        flops += 2 * n
    return flops


def make_layer(rng, d_in=2, d_out=2, **kw):
    return TemporalWeightLayer("layer", d_in, d_out, rng, **kw)


def layer_scale_np(layer, t):
    return scale(layer, t).data


def test_equal_base_gives_zero_output(rng):
    layer = make_layer(rng, 3, 2)
    layer.base.assign(np.full((3, 2), 0.7))
    layer.phase_rate.assign(np.array(0.0))
    layer.phase_offset.assign(np.array(0.0))
    out = layer_scale_np(layer, 1.3)
    assert np.allclose(out, 0.0, atol=1e-15)


def test_hand_summed_two_weight_case(rng):
    # w = [0, 1], K = 1 everywhere, f*t = pi/2, phase = 0:
    # out = [ (sin0 + sin(-pi/2))/2, (sin(pi/2) + sin0)/2 ] = [-0.5, 0.5]
    layer = make_layer(rng, 1, 2, coupling_mode="scalar")
    layer.base.assign(np.array([[0.0, 1.0]]))
    layer.coupling.values.assign(np.array(1.0))
    layer.freq_scale.assign(np.array(math.pi / 2.0))
    layer.phase_rate.assign(np.array(0.0))
    layer.phase_offset.assign(np.array(0.0))
    out = layer_scale_np(layer, 1.0)
    assert np.allclose(out.ravel(), [-0.5, 0.5], atol=1e-12)


def test_matches_naive_double_loop_all_modes(rng):
    for mode in ("scalar", "rank1", "full"):
        for range_mode in ("signed", "unit"):
            layer = make_layer(rng, 4, 4, coupling_mode=mode, range_mode=range_mode)
            layer.base.assign(rng.uniform(-1, 1, size=(4, 4)))
            layer.coupling.values.assign(
                rng.uniform(0.2, 2.0, size=layer.coupling.values.shape)
            )
            layer.freq_scale.assign(np.array(1.7))
            layer.phase_rate.assign(np.array(0.3))
            layer.phase_offset.assign(np.array(0.9))
            t = 0.8
            f = 1.7 * t
            phase = 0.3 * t + 0.9
            want = naive_scale(
                layer.base.value.data.ravel(),
                layer.coupling.values.value.data,
                mode,
                f,
                phase,
                range_mode,
            )
            got = layer_scale_np(layer, t)
            assert np.max(np.abs(got.ravel() - want)) <= 1e-12


def test_translation_invariance(rng):
    layer = make_layer(rng, 3, 3)
    base = rng.uniform(-1, 1, size=(3, 3))
    layer.base.assign(base)
    ref = layer_scale_np(layer, 2.1)
    for c in (-3.0, 0.25, 5.0):
        layer.base.assign(base + c)
        shifted = layer_scale_np(layer, 2.1)
        assert np.max(np.abs(shifted - ref)) <= 1e-12


def test_phase_periodicity(rng):
    layer = make_layer(rng, 2, 3)
    ref = layer_scale_np(layer, 1.1)
    layer.phase_offset.assign(layer.phase_offset.value.data + 2.0 * math.pi)
    shifted = layer_scale_np(layer, 1.1)
    assert np.max(np.abs(shifted - ref)) <= 1e-12


def test_boundedness(rng):
    for range_mode in ("signed", "unit"):
        layer = make_layer(rng, 4, 4, coupling_mode="rank1", range_mode=range_mode)
        layer.base.assign(rng.uniform(-2, 2, size=(4, 4)))
        k = rng.uniform(-2, 2, size=16)
        layer.coupling.values.assign(k)
        out = layer_scale_np(layer, 3.7).ravel()
        if range_mode == "signed":
            bound = np.abs(k).sum() / 16.0
            assert np.all(np.abs(out) <= bound + 1e-12)
        else:
            assert np.all(out >= -1e-12) and np.all(out <= 1.0 + 1e-12)


def test_coupling_mode_consistency(rng):
    kval = 1.37
    outs = []
    for mode in ("scalar", "rank1", "full"):
        layer = make_layer(rng, 3, 2, coupling_mode=mode)
        layer.base.assign(np.arange(6, dtype=float).reshape(3, 2) / 3.0)
        layer.coupling.values.assign(
            np.full(layer.coupling.values.shape, kval)
        )
        outs.append(layer_scale_np(layer, 0.6))
    assert np.max(np.abs(outs[0] - outs[1])) <= 1e-12
    assert np.max(np.abs(outs[0] - outs[2])) <= 1e-12


def test_time_dependence(rng):
    layer = make_layer(rng, 3, 3)
    times = rng.uniform(0.0, 4.0, size=8)
    outs = [layer_scale_np(layer, t) for t in times]
    diffs = [np.max(np.abs(outs[0] - o)) for o in outs[1:]]
    assert sum(d > 1e-6 for d in diffs) >= 2


def test_scale_gradients_match_finite_differences(rng):
    for mode in ("scalar", "rank1", "full"):
        layer = make_layer(rng, 2, 3, coupling_mode=mode)
        layer.base.assign(rng.uniform(-1, 1, size=(2, 3)))
        layer.coupling.values.assign(
            rng.uniform(0.5, 1.5, size=layer.coupling.values.shape)
        )
        params = [layer.base, layer.coupling.values, layer.freq_scale,
                  layer.phase_rate, layer.phase_offset]
        weights = rng.normal(size=(2, 3))
        t = 0.9

        def loss_tensor(ps):
            return (scale(layer, t) * Tensor(weights)).sum()

        tape = Tape()
        with tape.recording():
            loss = loss_tensor(params)
        tape.backward(loss, params)
        analytic = [p.grad.data.copy() for p in params]

        def loss_value(ps):
            return scale(layer, t).data.ravel().dot(weights.ravel())

        numeric = finite_difference_grads(loss_value, params)
        assert_grads_close(analytic, numeric, rtol=1e-5)


def test_gradient_flows_to_time(rng):
    layer = make_layer(rng, 2, 2)
    t = Parameter("t", 0.75)
    tape = Tape()
    with tape.recording():
        loss = scale(layer, t.value).sum()
    tape.backward(loss, [t])
    eps = 1e-6
    up = scale(layer, 0.75 + eps).data.sum()
    down = scale(layer, 0.75 - eps).data.sum()
    fd = (up - down) / (2 * eps)
    assert abs(t.grad.item() - fd) < 1e-5 * max(1.0, abs(fd))


def test_per_weight_frequency_gradients(rng):
    layer = make_layer(rng, 2, 2, per_weight_freq=True)
    layer.freq_scale.assign(rng.uniform(0.5, 1.5, size=4))
    params = [layer.base, layer.freq_scale]
    t = 1.2

    tape = Tape()
    with tape.recording():
        loss = scale(layer, t).sum()
    tape.backward(loss, params)
    analytic = [p.grad.data.copy() for p in params]

    def loss_value(ps):
        return scale(layer, t).data.sum()

    numeric = finite_difference_grads(loss_value, params)
    assert_grads_close(analytic, numeric, rtol=1e-5)


def test_streamed_matches_materialized(rng):
    layer = make_layer(rng, 3, 3, coupling_mode="rank1")
    dense = layer_scale_np(layer, 1.4)
    layer.stream_threshold = 1  # force row streaming
    streamed = layer_scale_np(layer, 1.4)
    assert np.max(np.abs(dense - streamed)) <= 1e-12

    params = [layer.base, layer.coupling.values]
    tape = Tape()
    with tape.recording():
        loss = scale(layer, 1.4).sum()
    tape.backward(loss, params)
    streamed_grads = [p.grad.data.copy() for p in params]
    layer.stream_threshold = 4096
    tape = Tape()
    with tape.recording():
        loss = scale(layer, 1.4).sum()
    tape.backward(loss, params)
    dense_grads = [p.grad.data.copy() for p in params]
    for a, b in zip(dense_grads, streamed_grads):
        assert np.max(np.abs(a - b)) <= 1e-12


def test_residual_adds_base(rng):
    layer = make_layer(rng, 2, 2)
    plain = layer_scale_np(layer, 0.5)
    layer.residual = True
    res = layer_scale_np(layer, 0.5)
    assert np.allclose(res, plain + layer.base.value.data)


def test_full_mode_capped():
    with pytest.raises(InvalidSpecError):
        CouplingParams("k", "full", 4097)


def test_probe_buffer_sizes(rng):
    layer = make_layer(rng, 25, 25)  # N = 625
    flops, buf = scale_complexity_probe(layer)
    assert buf == 625 * 625
    layer.stream_threshold = 100
    _, buf = scale_complexity_probe(layer)
    assert buf == 625
    assert flops == naive_scale_flops(625)


def test_probe_flops_match_instrumented_loop(rng):
    for mode in ("scalar", "rank1", "full"):
        for range_mode in ("signed", "unit"):
            layer = make_layer(rng, 2, 2, coupling_mode=mode, range_mode=range_mode)
            flops, _ = scale_complexity_probe(layer)
            counted = 0
            n = 4
            counted += 2 + 1  # phase = rate*t + offset; f = alpha*t
            w = layer.base.value.data.ravel()
            acc = np.zeros(n)
            for i in range(n):
                for j in range(n):
                    _ = w[i] - w[j]
                    counted += 7
            if range_mode == "unit":
                counted += 2 * n
            assert flops == counted


def test_static_layer_forward(rng):
    layer = StaticLayer("s", 2, 2, rng)
    layer.weight.assign(np.eye(2))
    layer.bias.assign(np.zeros(2))
    h = Tensor([[1.0, 2.0]])
    assert np.array_equal(static_forward(layer, h).data, [[1.0, 2.0]])
    layer.bias.assign(np.array([0.5, -0.5]))
    assert np.array_equal(static_forward(layer, Tensor([[0.0, 0.0]])).data, [[0.5, -0.5]])


def test_static_layer_matches_naive(rng):
    layer = StaticLayer("s", 3, 2, rng)
    h = rng.normal(size=(1, 3))
    want = np.zeros((1, 2))
    for j in range(2):
        for k in range(3):
            want[0, j] += h[0, k] * layer.weight.value.data[k, j]
        want[0, j] += layer.bias.value.data[j]
    got = static_forward(layer, Tensor(h)).data
    assert np.allclose(got, want, atol=1e-12)
