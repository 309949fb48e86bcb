"""Differentiable explicit ODE integration between requested output times.

Gradients come from backpropagating through the concrete solver steps
(discretize-then-optimize); there is no adjoint pass. Requested output
times are always hit by clamping the step, never by interpolation, so a
time-dependent right-hand side is evaluated exactly where the caller
asked for states.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    InvalidSpecError,
    MaxStepsExceededError,
    NonFiniteError,
    NonMonotoneTimesError,
    StepUnderflowError,
)
from .tensor import Tensor

Rhs = Callable[[float, Tensor], Tensor]


@dataclass
class OdeProblem:
    rhs: Rhs
    h0: Tensor
    t_span: tuple[float, float]

    def __post_init__(self):
        t0, t1 = self.t_span
        if not (np.isfinite(t0) and np.isfinite(t1)) or t0 > t1:
            raise InvalidSpecError(f"bad time span {self.t_span}")


@dataclass
class SolverConfig:
    method: str = "rk4"
    fixed_step: Optional[float] = None
    rtol: float = 1e-5
    atol: float = 1e-5
    max_steps: int = 100_000
    initial_step: float = 0.01

    def __post_init__(self):
        if self.method not in ("rk4", "dopri5"):
            raise InvalidSpecError(f"unknown solver method '{self.method}'")
        if self.method == "rk4" and (self.fixed_step is None or self.fixed_step <= 0):
            raise InvalidSpecError("rk4 needs a positive fixed_step")
        for name in ("rtol", "atol", "initial_step"):
            if getattr(self, name) <= 0:
                raise InvalidSpecError(f"{name} must be positive")
        if self.max_steps <= 0:
            raise InvalidSpecError("max_steps must be positive")


def _check_state(h: Tensor) -> None:
    if not np.all(np.isfinite(h.data)):
        raise NonFiniteError("solver state became non-finite")


def rk4_step(problem: OdeProblem, t: float, h: Tensor, dt: float) -> Tensor:
    """One classical 4-stage step from t to t + dt.

    Each stage evaluates the rhs at its own intermediate time, which is
    what exposes a time-varying weight construction to times between the
    endpoints.
    """
    if dt <= 0:
        raise InvalidSpecError("rk4 step size must be positive")
    f = problem.rhs
    k1 = f(t, h)
    k2 = f(t + dt / 2.0, h + k1 * (dt / 2.0))
    k3 = f(t + dt / 2.0, h + k2 * (dt / 2.0))
    k4 = f(t + dt, h + k3 * dt)
    out = h + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
    _check_state(out)
    return out


# Dormand-Prince 5(4) tableau
_DP_C = (0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0)
_DP_A = (
    (),
    (1.0 / 5.0,),
    (3.0 / 40.0, 9.0 / 40.0),
    (44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0),
    (19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0),
    (9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0),
    (35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0),
)
_DP_B5 = (35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0)
# b5 - b4: local truncation error estimate weights
_DP_E = (
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
)


def _dp_attempt(problem: OdeProblem, t: float, h: Tensor, dt: float,
                atol: float, rtol: float) -> tuple[Tensor, float]:
    """One trial Dormand-Prince step; returns (5th-order state, error norm)."""
    f = problem.rhs
    ks: list[Tensor] = []
    for i in range(7):
        hi = h
        for j, a in enumerate(_DP_A[i]):
            if a != 0.0:
                hi = hi + ks[j] * (dt * a)
        ks.append(f(t + _DP_C[i] * dt, hi))
    out = h
    for b, k in zip(_DP_B5, ks):
        if b != 0.0:
            out = out + k * (dt * b)
    err = np.zeros_like(h.data)
    for e, k in zip(_DP_E, ks):
        if e != 0.0:
            err = err + k.data * (dt * e)
    sc = np.maximum(atol, rtol * np.maximum(np.abs(h.data), np.abs(out.data)))
    norm = float(np.sqrt(np.mean((err / sc) ** 2))) if err.size else 0.0
    return out, norm


def dopri5_solve(problem: OdeProblem, config: SolverConfig) -> tuple[Tensor, int, int]:
    """Adaptive 5(4) integration over problem.t_span.

    Returns (final state, accepted steps, rejected steps). Step control is
    a PI controller with safety 0.9 and growth factor clamped to
    [0.2, 5.0]; the error norm is a componentwise RMS against
    max(atol, rtol * |state|) scaling.
    """
    t0, t1 = problem.t_span
    h = problem.h0
    _check_state(h)
    span = t1 - t0
    if span == 0.0:
        return h, 0, 0

    t = t0
    dt = min(config.initial_step, span / 10.0)
    evals = 0
    accepted = 0
    rejected = 0
    err_prev = 1.0
    while t < t1:
        dt = min(dt, t1 - t)
        if dt < 1e-12 * span:
            raise StepUnderflowError(f"step size underflow at t={t!r}")
        if evals + 7 > config.max_steps:
            raise MaxStepsExceededError(
                f"exceeded {config.max_steps} rhs evaluations at t={t!r}"
            )
        out, norm = _dp_attempt(problem, t, h, dt, config.atol, config.rtol)
        evals += 7
        if not np.isfinite(norm):
            # treat a blown-up trial step as a hard rejection
            norm = 1e10
        if norm <= 1.0:
            t = t + dt
            h = out
            _check_state(h)
            accepted += 1
            if norm == 0.0 and t < t1:
                # perfect step (e.g. vanishing rhs): jump to the endpoint
                dt = t1 - t
                err_prev = 1.0
                continue
            # PI update (Hairer's beta pair for order 5(4))
            safe = max(norm, 1e-10)
            factor = 0.9 * safe ** (-0.7 / 5.0) * err_prev ** (0.4 / 5.0)
            err_prev = safe
            dt = dt * min(5.0, max(0.2, factor))
        else:
            rejected += 1
            factor = 0.9 * norm ** (-0.2)
            dt = dt * min(1.0, max(0.2, factor))
    return h, accepted, rejected


def _rk4_span(problem: OdeProblem, t0: float, t1: float, h: Tensor,
              fixed_step: float, max_steps: int) -> Tensor:
    seg = t1 - t0
    if seg == 0.0:
        return h
    steps = max(1, int(np.ceil(seg / fixed_step - 1e-12)))
    if steps * 4 > max_steps:
        raise MaxStepsExceededError(f"rk4 would need {steps} steps over [{t0}, {t1}]")
    dt = seg / steps
    for i in range(steps):
        h = rk4_step(problem, t0 + i * dt, h, dt)
    return h


def odesolve_at(problem: OdeProblem, output_times: Sequence[float],
                config: SolverConfig) -> list[Tensor]:
    """States at each requested time, integrating segment by segment.

    `output_times` must be strictly ascending and start at or after the
    problem's t_start; integration extends past t_span's end if asked.
    """
    times = [float(t) for t in output_times]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise NonMonotoneTimesError("output times must be strictly ascending")
    t0 = problem.t_span[0]
    if times and times[0] < t0 - 1e-12:
        raise NonMonotoneTimesError(
            f"first output time {times[0]} precedes span start {t0}"
        )

    out: list[Tensor] = []
    h = problem.h0
    _check_state(h)
    t = t0
    for target in times:
        seg = target - t
        if seg > 0.0:
            if config.method == "rk4":
                h = _rk4_span(problem, t, target, h, config.fixed_step, config.max_steps)
            else:
                sub = OdeProblem(problem.rhs, h, (t, target))
                h, _, _ = dopri5_solve(sub, config)
            t = target
        out.append(h)
    return out


def evolve(rhs: Rhs, h: Tensor, t_from: float, t_to: float,
           config: SolverConfig) -> Tensor:
    """Integrate between two times in either direction.

    Backward motion is handled by the standard negation wrapper: the
    reversed problem runs forward over the mirrored interval.
    """
    if t_to == t_from:
        return h
    if t_to > t_from:
        problem = OdeProblem(rhs, h, (t_from, t_to))
        return odesolve_at(problem, [t_to], config)[-1]
    a, b = t_from, t_to  # a > b

    def rev(s: float, u: Tensor) -> Tensor:
        return -rhs(a + b - s, u)

    problem = OdeProblem(rev, h, (b, a))
    return odesolve_at(problem, [a], config)[-1]
