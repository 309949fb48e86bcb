import numpy as np
import pytest

from tempo_ode import tensor as T
from tempo_ode.errors import (
    EmptyReductionError,
    NonFiniteError,
    NotScalarError,
    NotTrackedError,
    ShapeMismatchError,
)
from tempo_ode.tensor import Parameter, Tape, Tensor

from conftest import analytic_grads, assert_grads_close, finite_difference_grads


def test_elementwise_exact_values():
    assert np.allclose(T.sin(Tensor([0.0, np.pi / 2])).data, [0.0, 1.0])
    assert T.tanh(Tensor([0.0])).data[0] == 0.0
    assert np.array_equal(T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])


def test_elementwise_dispatcher():
    a = Tensor([1.0, -1.0])
    assert np.allclose(T.elementwise("sigmoid", a).data, 1.0 / (1.0 + np.exp([-1.0, 1.0])))
    assert np.allclose(T.elementwise("scale", a, 3.0).data, [3.0, -3.0])
    assert np.allclose(T.elementwise("sub", a, Tensor([1.0, 1.0])).data, [0.0, -2.0])
    with pytest.raises(ValueError):
        T.elementwise("cosh", a)


def test_elementwise_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        T.mul(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_div_by_zero_raises_nonfinite():
    with pytest.raises(NonFiniteError):
        T.div(Tensor([1.0]), Tensor([0.0]))


def test_matmul_identity_and_hand_value():
    eye = Tensor(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(eye, m).data, m.data)
    out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data[0, 0] == 11.0


def test_matmul_matches_naive_triple_loop(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    want = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                want[i, j] += a[i, k] * b[k, j]
    assert np.allclose(T.matmul(Tensor(a), Tensor(b)).data, want, atol=1e-12)


def test_matmul_shape_error():
    with pytest.raises(ShapeMismatchError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_reduce_values():
    assert T.reduce("sum", Tensor([1.0, 2.0, 3.0])).item() == 6.0
    m = Tensor([[1.0, 3.0], [3.0, 5.0]])
    assert np.array_equal(T.reduce("mean", m, axis=0).data, [2.0, 4.0])
    assert T.reduce("max", Tensor([-1.0, -5.0])).item() == -1.0
    with pytest.raises(EmptyReductionError):
        T.reduce("sum", Tensor(np.zeros((0,))))


def test_backward_square_and_sin():
    w = Parameter("w", [1.0, 2.0])
    tape = Tape()
    with tape.recording():
        loss = T.reduce("sum", T.mul(w.value, w.value))
    tape.backward(loss, [w])
    assert np.allclose(w.grad.data, [2.0, 4.0])

    w2 = Parameter("w2", [0.0])
    tape = Tape()
    with tape.recording():
        loss = T.reduce("sum", T.sin(w2.value))
    tape.backward(loss, [w2])
    assert np.allclose(w2.grad.data, [1.0])


def test_backward_requires_scalar_tracked_root():
    w = Parameter("w", [1.0, 2.0])
    tape = Tape()
    with tape.recording():
        vec = T.mul(w.value, 2.0)
        loss = vec.sum()
    with pytest.raises(NotScalarError):
        tape.backward(vec, [w])
    other = Tensor(1.0)
    with pytest.raises(NotTrackedError):
        tape.backward(other, [w])
    tape.backward(loss, [w])
    assert np.allclose(w.grad.data, [2.0, 2.0])


def test_backward_unreached_parameter_gets_zeros():
    w = Parameter("w", [1.0])
    unused = Parameter("unused", [[1.0, 2.0]])
    tape = Tape()
    with tape.recording():
        loss = T.mul(w.value, w.value).sum()
    tape.backward(loss, [w, unused])
    assert np.array_equal(unused.grad.data, [[0.0, 0.0]])


def test_backward_repeatable():
    w = Parameter("w", [1.5, -0.5])
    tape = Tape()
    with tape.recording():
        loss = T.exp(w.value).sum()
    tape.backward(loss, [w])
    first = w.grad.data.copy()
    tape.backward(loss, [w])
    assert np.array_equal(first, w.grad.data)


def test_backward_linearity():
    x = Parameter("x", [0.3, -0.7, 1.1])

    def f(v):
        return T.sin(v).sum()

    def g(v):
        return T.mul(v, v).sum()

    a, b = 2.5, -1.25
    tape = Tape()
    with tape.recording():
        loss = T.add(T.mul(f(x.value), a), T.mul(g(x.value), b))
    tape.backward(loss, [x])
    combined = x.grad.data.copy()

    tape = Tape()
    with tape.recording():
        lf = f(x.value)
    tape.backward(lf, [x])
    gf = x.grad.data.copy()
    tape = Tape()
    with tape.recording():
        lg = g(x.value)
    tape.backward(lg, [x])
    gg = x.grad.data.copy()
    assert np.max(np.abs(combined - (a * gf + b * gg))) <= 1e-12


def _composite_loss(params):
    (w, b, k) = params
    h = T.tanh(T.add(T.matmul(w.value, b.value), k.value))
    s = T.sigmoid(h)
    p = T.softplus(T.mul(s, h))
    return T.div(p, 3.0).sum()


def test_composite_graph_matches_finite_differences(rng):
    w = Parameter("w", rng.uniform(-2, 2, size=(3, 4)))
    b = Parameter("b", rng.uniform(-2, 2, size=(4, 2)))
    k = Parameter("k", rng.uniform(-2, 2, size=(2,)))
    params = [w, b, k]

    analytic = analytic_grads(_composite_loss, params)

    def scalar_loss(ps):
        tape = Tape()
        with tape.recording():
            out = _composite_loss(ps)
        return out.item()

    numeric = finite_difference_grads(scalar_loss, params)
    assert_grads_close(analytic, numeric, rtol=1e-5)


def test_row_vector_bias_broadcast_backward():
    w = Parameter("w", np.ones((3, 2)))
    b = Parameter("b", [1.0, -1.0])
    tape = Tape()
    with tape.recording():
        loss = T.add(w.value, b.value).sum()
    tape.backward(loss, [w, b])
    assert np.array_equal(w.grad.data, np.ones((3, 2)))
    assert np.array_equal(b.grad.data, [3.0, 3.0])


def test_disallowed_broadcast_rejected():
    with pytest.raises(ShapeMismatchError):
        T.add(Tensor(np.ones((3, 2))), Tensor(np.ones((3,))))


def test_stack_and_concat_backward():
    a = Parameter("a", [[1.0, 2.0]])
    b = Parameter("b", [[3.0, 4.0]])
    tape = Tape()
    with tape.recording():
        s = T.stack([a.value, b.value])
        loss = T.mul(s, s).sum()
    tape.backward(loss, [a, b])
    assert np.allclose(a.grad.data, [[2.0, 4.0]])
    assert np.allclose(b.grad.data, [[6.0, 8.0]])

    tape = Tape()
    with tape.recording():
        c = T.concat_cols(a.value, b.value)
        loss = T.mul(c, Tensor([[1.0, 2.0, 3.0, 4.0]])).sum()
    tape.backward(loss, [a, b])
    assert np.array_equal(a.grad.data, [[1.0, 2.0]])
    assert np.array_equal(b.grad.data, [[3.0, 4.0]])


def test_untracked_ops_leave_tape_empty():
    tape = Tape()
    with tape.recording():
        out = T.mul(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    assert len(tape) == 0
    assert out._node is None


def test_reduce_max_backward_first_winner():
    x = Parameter("x", [[1.0, 5.0, 5.0], [2.0, 0.0, 7.0]])
    tape = Tape()
    with tape.recording():
        loss = T.reduce("max", x.value, axis=1).sum()
    tape.backward(loss, [x])
    assert np.array_equal(x.grad.data, [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
