import numpy as np
import pytest

from tempo_ode.tensor import Parameter, Tape


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def finite_difference_grads(build_loss, params, eps=1e-6):
    """Central-difference gradient of a scalar loss for each Parameter.

    `build_loss(params) -> float` must rerun the full forward pass from
    the parameters' current values; it is the independent oracle for the
    tape's analytic gradients.
    """
    grads = []
    for p in params:
        flat = p.value.data.ravel().copy()
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            p.assign(flat.reshape(p.value.shape))
            up = build_loss(params)
            flat[i] = orig - eps
            p.assign(flat.reshape(p.value.shape))
            down = build_loss(params)
            flat[i] = orig
            p.assign(flat.reshape(p.value.shape))
            g[i] = (up - down) / (2.0 * eps)
        grads.append(g.reshape(p.value.shape))
    return grads


def analytic_grads(build_loss_tensor, params):
    """Tape gradients of a scalar loss tensor for each Parameter."""
    tape = Tape()
    with tape.recording():
        loss = build_loss_tensor(params)
    tape.backward(loss, params)
    return [p.grad.data.copy() for p in params]


def assert_grads_close(analytic, numeric, rtol=1e-5):
    for a, n in zip(analytic, numeric):
        denom = np.maximum(1e-8, np.abs(a))
        rel = np.abs(a - n) / denom
        assert np.max(rel) < rtol, f"max rel err {np.max(rel):.3e}"


def make_param(name, data):
    return Parameter(name, np.asarray(data, dtype=np.float64))
