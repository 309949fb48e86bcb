"""Dense float64 tensors with reverse-mode autodiff on a recorded tape.

The tape is define-by-run: while a `Tape.recording()` context is active,
every operation appends a node holding its input node ids and a backward
rule. `Tape.backward` replays the nodes in reverse insertion order, so
gradients are exact for whatever computation actually ran (including a
solver that called the network a data-dependent number of times).

Broadcasting is deliberately narrow: scalar-with-tensor for the binary
ops, plus row-vector bias addition. Anything else raises ShapeMismatch.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import (
    EmptyReductionError,
    NonFiniteError,
    NotScalarError,
    NotTrackedError,
    ShapeMismatchError,
)

Array = np.ndarray

_ACTIVE_TAPES: list["Tape"] = []


def active_tape() -> Optional["Tape"]:
    """The innermost recording tape, or None when gradients are off."""
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _as_f64(data) -> Array:
    arr = np.asarray(data, dtype=np.float64)
    return arr


def _check_finite(data: Array, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by '{op}'")


class Tensor:
    """A float64 array, optionally attached to the active tape.

    Untracked tensors are plain immutable values. A tensor becomes part of
    a graph either because `requires_grad` is set (parameters, leaf inputs)
    or because it is the output of an op whose inputs were tracked.
    """

    __slots__ = ("data", "requires_grad", "_tape", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        _check_finite(self.data, "tensor")
        self.requires_grad = requires_grad
        self._tape: Optional[Tape] = None
        self._node: Optional[int] = None

    @classmethod
    def _raw(cls, data: Array) -> "Tensor":
        # trusted fast path for op outputs; data is already float64 and checked
        obj = cls.__new__(cls)
        obj.data = data
        obj.requires_grad = False
        obj._tape = None
        obj._node = None
        return obj

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def tracked_on(self, tape: "Tape") -> bool:
        return self._tape is tape and self._node is not None

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; constants (python numbers) stay off the tape
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return reduce("sum", self, axis)

    def mean(self, axis=None):
        return reduce("mean", self, axis)

    def max(self, axis=None):
        return reduce("max", self, axis)

    def reshape(self, shape):
        return reshape(self, shape)


class Parameter:
    """A named, tracked tensor whose gradient is filled in by backward."""

    def __init__(self, name: str, value):
        self.name = name
        self.value = Tensor(value, requires_grad=True)
        self.grad: Optional[Tensor] = None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def assign(self, data: Array) -> None:
        data = _as_f64(data)
        if data.shape != self.value.shape:
            raise ShapeMismatchError(
                f"parameter '{self.name}': cannot assign {data.shape} over {self.value.shape}"
            )
        _check_finite(data, f"assign {self.name}")
        # fresh Tensor so stale tape node ids never leak into the next pass
        self.value = Tensor(data, requires_grad=True)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


# backward rule: g -> sequence of contributions aligned with the node's inputs
BackwardFn = Callable[[Array], Sequence[Optional[Array]]]


class Tape:
    """Append-only op log; inputs always reference earlier nodes."""

    def __init__(self):
        self._nodes: list[tuple[tuple, Optional[BackwardFn]]] = []
        self._grads: list[Optional[Array]] = []

    def __len__(self) -> int:
        return len(self._nodes)

    @contextmanager
    def recording(self):
        _ACTIVE_TAPES.append(self)
        try:
            yield self
        finally:
            _ACTIVE_TAPES.pop()

    def _leaf(self) -> int:
        self._nodes.append(((), None))
        return len(self._nodes) - 1

    def _record(self, input_ids: tuple, backward: BackwardFn) -> int:
        self._nodes.append((input_ids, backward))
        return len(self._nodes) - 1

    def node_id(self, t: Tensor) -> Optional[int]:
        """Node id of `t` on this tape, registering a leaf for tracked tensors."""
        if t._tape is self and t._node is not None:
            return t._node
        if t.requires_grad:
            nid = self._leaf()
            t._tape = self
            t._node = nid
            return nid
        return None

    def backward(self, root: Tensor, parameters: Iterable[Parameter] = ()) -> None:
        """Populate gradients of `root` w.r.t. every listed parameter.

        Gradients are recomputed from scratch on each call, so repeated
        calls yield identical results. Parameters the root does not reach
        get zero gradients.
        """
        if root.data.shape != ():
            raise NotScalarError(f"backward root must be scalar, got shape {root.data.shape}")
        if not root.tracked_on(self):
            raise NotTrackedError("backward root is not tracked on this tape")

        grads: list[Optional[Array]] = [None] * len(self._nodes)
        grads[root._node] = np.ones((), dtype=np.float64)
        for i in range(root._node, -1, -1):
            g = grads[i]
            if g is None:
                continue
            ids, fn = self._nodes[i]
            if fn is None:
                continue
            for j, contrib in zip(ids, fn(g)):
                if j is None or contrib is None:
                    continue
                if grads[j] is None:
                    grads[j] = contrib
                else:
                    grads[j] = grads[j] + contrib
        self._grads = grads

        for p in parameters:
            v = p.value
            g = None
            if v.tracked_on(self):
                g = grads[v._node]
            if g is None:
                p.grad = Tensor(np.zeros(v.shape, dtype=np.float64))
            else:
                p.grad = Tensor(np.broadcast_to(g, v.shape).copy())

    def grad(self, t: Tensor) -> Optional[Array]:
        """Gradient of the last backward root w.r.t. `t`, or None."""
        if t.tracked_on(self) and t._node < len(self._grads):
            return self._grads[t._node]
        return None


def backward(root: Tensor, parameters: Iterable[Parameter] = ()) -> None:
    """Run backward on the tape the root was recorded on."""
    if root._tape is None:
        raise NotTrackedError("root was not recorded on any tape")
    root._tape.backward(root, parameters)


def _make(op: str, data, inputs: tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    # any NaN/Inf makes the sum non-finite, so one reduction checks all cells
    if not math.isfinite(float(data.sum())):
        raise NonFiniteError(f"non-finite values produced by '{op}'")
    out = Tensor._raw(data)
    tape = active_tape()
    if tape is None:
        return out
    ids = tuple(tape.node_id(t) for t in inputs)
    if all(i is None for i in ids):
        return out
    out._tape = tape
    out._node = tape._record(ids, backward_fn)
    return out


def _coerce(x) -> tuple[Optional[Tensor], Optional[float]]:
    """Split an operand into (tensor, None) or (None, python scalar)."""
    if isinstance(x, Tensor):
        return x, None
    if isinstance(x, (int, float, np.floating, np.integer)):
        return None, float(x)
    raise TypeError(f"unsupported operand type {type(x).__name__}")


def _binary_shapes(op: str, a: Array, b: Array) -> None:
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def _unbroadcast(g: Array, shape: tuple) -> Array:
    """Sum `g` down to `shape` (covers the scalar and row-vector cases)."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.array(g.sum())
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    ta, sa = _coerce(a)
    tb, sb = _coerce(b)
    if ta is None and tb is None:
        raise TypeError("add needs at least one Tensor operand")
    if ta is None or tb is None:
        t = ta if ta is not None else tb
        s = sb if ta is not None else sa
        return _make("add", t.data + s, (t,), lambda g: (g,))
    da, db = ta.data, tb.data
    if da.shape != db.shape:
        # allow row-vector bias addition onto a matrix
        ok_scalar = da.size == 1 or db.size == 1
        ok_bias = (
            da.ndim == 2
            and db.ndim in (1, 2)
            and db.shape[-1] == da.shape[1]
            and (db.ndim == 1 or db.shape[0] == 1)
        ) or (
            db.ndim == 2
            and da.ndim in (1, 2)
            and da.shape[-1] == db.shape[1]
            and (da.ndim == 1 or da.shape[0] == 1)
        )
        if not (ok_scalar or ok_bias):
            raise ShapeMismatchError(f"add: shapes {da.shape} and {db.shape} are not compatible")
    sha, shb = da.shape, db.shape
    return _make(
        "add",
        da + db,
        (ta, tb),
        lambda g: (_unbroadcast(g, sha), _unbroadcast(g, shb)),
    )


def sub(a, b) -> Tensor:
    ta, sa = _coerce(a)
    tb, sb = _coerce(b)
    if ta is None and tb is None:
        raise TypeError("sub needs at least one Tensor operand")
    if ta is None:
        return _make("sub", sa - tb.data, (tb,), lambda g: (-g,))
    if tb is None:
        return _make("sub", ta.data - sb, (ta,), lambda g: (g,))
    _binary_shapes("sub", ta.data, tb.data)
    sha, shb = ta.data.shape, tb.data.shape
    return _make(
        "sub",
        ta.data - tb.data,
        (ta, tb),
        lambda g: (_unbroadcast(g, sha), _unbroadcast(-g, shb)),
    )


def mul(a, b) -> Tensor:
    ta, sa = _coerce(a)
    tb, sb = _coerce(b)
    if ta is None and tb is None:
        raise TypeError("mul needs at least one Tensor operand")
    if ta is None or tb is None:
        t = ta if ta is not None else tb
        s = sb if ta is not None else sa
        return _make("scale", t.data * s, (t,), lambda g: (g * s,))
    _binary_shapes("mul", ta.data, tb.data)
    da, db = ta.data, tb.data
    sha, shb = da.shape, db.shape
    return _make(
        "mul",
        da * db,
        (ta, tb),
        lambda g: (_unbroadcast(g * db, sha), _unbroadcast(g * da, shb)),
    )


def div(a, b) -> Tensor:
    ta, sa = _coerce(a)
    tb, sb = _coerce(b)
    if ta is None and tb is None:
        raise TypeError("div needs at least one Tensor operand")
    if tb is None:
        return _make("div", ta.data / sb, (ta,), lambda g: (g / sb,))
    if ta is None:
        db = tb.data
        out = sa / db
        return _make("div", out, (tb,), lambda g: (-g * out / db,))
    _binary_shapes("div", ta.data, tb.data)
    da, db = ta.data, tb.data
    sha, shb = da.shape, db.shape
    with np.errstate(divide="ignore", invalid="ignore"):
        out = da / db
    return _make(
        "div",
        out,
        (ta, tb),
        lambda g: (_unbroadcast(g / db, sha), _unbroadcast(-g * out / db, shb)),
    )


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def sin(a: Tensor) -> Tensor:
    d = a.data
    return _make("sin", np.sin(d), (a,), lambda g: (g * np.cos(d),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _make("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make("exp", y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    d = a.data
    return _make("log", np.log(d), (a,), lambda g: (g / d,))


def softplus(a: Tensor) -> Tensor:
    d = a.data
    y = np.logaddexp(0.0, d)
    return _make("softplus", y, (a,), lambda g: (g * _sigmoid(d),))


_ELEMENTWISE_KINDS = {
    "add",
    "sub",
    "mul",
    "div",
    "sin",
    "tanh",
    "sigmoid",
    "exp",
    "softplus",
    "neg",
    "scale",
}

_UNARY = {"sin": sin, "tanh": tanh, "sigmoid": sigmoid, "exp": exp, "softplus": softplus, "neg": neg}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch an elementwise op by name.

    `scale` multiplies by a python scalar; the other binary kinds accept a
    Tensor of equal shape or a scalar.
    """
    if kind not in _ELEMENTWISE_KINDS:
        raise ValueError(f"unknown elementwise kind '{kind}'")
    if kind in _UNARY:
        if b is not None:
            raise TypeError(f"'{kind}' is unary")
        return _UNARY[kind](a)
    if b is None:
        raise TypeError(f"'{kind}' needs a second operand")
    if kind == "scale":
        _, s = _coerce(b)
        if s is None:
            raise TypeError("'scale' takes a python scalar")
        return mul(a, s)
    return _BINARY[kind](a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    da, db = a.data, b.data
    if da.ndim != 2 or db.ndim != 2 or da.shape[1] != db.shape[0]:
        raise ShapeMismatchError(f"matmul: {da.shape} @ {db.shape}")
    return _make(
        "matmul",
        da @ db,
        (a, b),
        lambda g: (g @ db.T, da.T @ g),
    )


def reduce(kind: str, a: Tensor, axis: Optional[int] = None) -> Tensor:
    d = a.data
    if axis is not None and not (-d.ndim <= axis < d.ndim):
        raise ShapeMismatchError(f"reduce axis {axis} invalid for shape {d.shape}")
    count = d.size if axis is None else d.shape[axis]
    if count == 0:
        raise EmptyReductionError(f"'{kind}' over an empty extent")
    shape = d.shape

    if kind == "sum":
        def back(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

        return _make("sum", d.sum(axis=axis), (a,), back)

    if kind == "mean":
        def back(g):
            if axis is None:
                return (np.broadcast_to(g / count, shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g / count, axis), shape).copy(),)

        return _make("mean", d.mean(axis=axis), (a,), back)

    if kind == "max":
        # gradient routed to the first maximal entry of each reduced slice
        if axis is None:
            idx = int(np.argmax(d))

            def back(g):
                out = np.zeros(shape, dtype=np.float64)
                out.flat[idx] = g
                return (out,)

            return _make("max", d.max(), (a,), back)

        arg = np.expand_dims(np.argmax(d, axis=axis), axis)

        def back(g):
            out = np.zeros(shape, dtype=np.float64)
            np.put_along_axis(out, arg, np.expand_dims(g, axis), axis)
            return (out,)

        return _make("max", d.max(axis=axis), (a,), back)

    raise ValueError(f"unknown reduce kind '{kind}'")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    if not tensors:
        raise ShapeMismatchError("stack of zero tensors")
    sh = tensors[0].data.shape
    for t in tensors[1:]:
        if t.data.shape != sh:
            raise ShapeMismatchError(f"stack: {t.data.shape} != {sh}")
    data = np.stack([t.data for t in tensors], axis=0)
    n = len(tensors)
    return _make("stack", data, tuple(tensors), lambda g: tuple(g[i] for i in range(n)))


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    da, db = a.data, b.data
    if da.ndim != 2 or db.ndim != 2 or da.shape[0] != db.shape[0]:
        raise ShapeMismatchError(f"concat_cols: {da.shape} vs {db.shape}")
    k = da.shape[1]
    return _make(
        "concat_cols",
        np.concatenate([da, db], axis=1),
        (a, b),
        lambda g: (g[:, :k], g[:, k:]),
    )
