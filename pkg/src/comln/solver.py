"""ODE integration on flat 64-bit state vectors.

Integrates autonomous systems dy/dt = rhs(y) from t0 to t1 with either a
fixed-step scheme (explicit Euler, classic fourth-order Runge-Kutta) or the
Dormand-Prince 5(4) embedded pair with adaptive step size.  The state is a
single flat float64 vector; a layout of named segments lets callers address
multi-dimensional views of it without copies.

Every right-hand-side evaluation is counted exactly, and exceeding the
configured evaluation budget is an error rather than a silent partial
result.  All arithmetic is in float64 and fully deterministic: identical
inputs produce bit-identical outputs and step statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence, Tuple

import numpy as np


class BudgetExceededError(RuntimeError):
    """The integration would exceed the configured rhs evaluation budget."""


class NonFiniteStateError(ArithmeticError):
    """A NaN or Inf appeared in the state during integration."""


@dataclass(frozen=True)
class FlatState:
    """A flat float64 vector with named, shaped views onto its segments.

    ``layout`` is an ordered tuple of (name, shape) pairs; the segments
    tile the vector in order.  ``view`` returns a reshaped view (no copy)
    of one segment.
    """

    values: np.ndarray
    layout: Tuple[Tuple[str, Tuple[int, ...]], ...]

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError("FlatState values must be one-dimensional")
        object.__setattr__(self, "values", values)
        names = [name for name, _ in self.layout]
        if len(set(names)) != len(names):
            raise ValueError("FlatState segment names must be unique")
        total = sum(int(np.prod(shape, dtype=np.int64)) for _, shape in self.layout)
        if total != values.size:
            raise ValueError(
                f"layout covers {total} entries but values has {values.size}"
            )

    @classmethod
    def pack(cls, segments: Sequence[Tuple[str, np.ndarray]]) -> "FlatState":
        """Concatenate named arrays (C order) into a single flat state."""
        layout = tuple((name, tuple(arr.shape)) for name, arr in segments)
        if segments:
            values = np.concatenate(
                [np.asarray(arr, dtype=np.float64).ravel() for _, arr in segments]
            )
        else:
            values = np.zeros(0)
        return cls(values, layout)

    def view(self, name: str) -> np.ndarray:
        """Shaped view of one segment; writes through to ``values``."""
        offset = 0
        for seg_name, shape in self.layout:
            size = int(np.prod(shape, dtype=np.int64))
            if seg_name == name:
                return self.values[offset : offset + size].reshape(shape)
            offset += size
        raise KeyError(f"no segment named {name!r}")

    def with_values(self, values: np.ndarray) -> "FlatState":
        """Same layout, new underlying vector."""
        return FlatState(values, self.layout)

    @property
    def nbytes(self) -> int:
        return self.values.nbytes

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


@dataclass(frozen=True)
class SolverConfig:
    """Integration scheme and its parameters.

    ``fixed_step`` is consulted only by euler/rk4; ``rtol``/``atol`` only by
    dopri5.  ``max_evals`` bounds rhs evaluations for every method.
    """

    method: str = "dopri5"
    fixed_step: float | None = None
    rtol: float = 1e-6
    atol: float = 1e-8
    max_evals: int = 10_000_000

    def __post_init__(self) -> None:
        if self.method not in ("euler", "rk4", "dopri5"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.method in ("euler", "rk4"):
            if self.fixed_step is None or self.fixed_step <= 0:
                raise ValueError(f"{self.method} requires a positive fixed_step")
        else:
            if self.rtol <= 0 or self.atol <= 0:
                raise ValueError("dopri5 requires positive rtol and atol")
        if self.max_evals < 1:
            raise ValueError("max_evals must be at least 1")


@dataclass
class StepStats:
    """Exact counts of work done by one integrate() call."""

    rhs_evals: int = 0
    accepted_steps: int = 0
    rejected_steps: int = 0


# Dormand-Prince 5(4) tableau.  b5 is the fifth-order weight row (the
# propagated solution); b4 is the embedded fourth-order row used only for
# the error estimate.
_DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_DP_B4 = (
    5179 / 57600,
    0.0,
    7571 / 16695,
    393 / 640,
    -92097 / 339200,
    187 / 2100,
    1 / 40,
)
_DP_ERR = tuple(b5 - b4 for b5, b4 in zip(_DP_B5, _DP_B4))

_SAFETY = 0.9
_FACTOR_MIN = 0.2
_FACTOR_MAX = 5.0
_ORDER_EXP = -1.0 / 5.0


def _fixed_step_count(span: float, step: float) -> int:
    # ceil(span / step), robust against the quotient landing one ulp above
    # an integer when span was produced as (integer * step).
    quotient = span / step
    n = math.ceil(quotient - 1e-12)
    return max(n, 1)


def integrate(
    rhs: Callable[[FlatState], FlatState],
    y0: FlatState,
    t0: float,
    t1: float,
    config: SolverConfig,
) -> Tuple[FlatState, StepStats]:
    """Integrate dy/dt = rhs(y) from t0 to t1 and return (y(t1), stats).

    ``rhs`` must be a pure function mapping a FlatState to a FlatState of
    derivatives in the same layout.  Raises BudgetExceededError if the run
    would need more rhs evaluations than ``config.max_evals`` and
    NonFiniteStateError if any intermediate state stops being finite.
    """
    if t1 < t0:
        raise ValueError("integrate requires t1 >= t0")
    if not y0.is_finite():
        raise NonFiniteStateError("initial state contains NaN or Inf")

    stats = StepStats()
    span = t1 - t0
    if span == 0.0:
        return y0.with_values(y0.values.copy()), stats

    layout = y0.layout

    def f(values: np.ndarray) -> np.ndarray:
        if stats.rhs_evals + 1 > config.max_evals:
            raise BudgetExceededError(
                f"rhs evaluation budget of {config.max_evals} exhausted"
            )
        stats.rhs_evals += 1
        return rhs(FlatState(values, layout)).values

    if config.method == "euler":
        y = _run_fixed(f, y0.values.copy(), span, config.fixed_step, stats, _euler_step)
    elif config.method == "rk4":
        y = _run_fixed(f, y0.values.copy(), span, config.fixed_step, stats, _rk4_step)
    else:
        y = _run_dopri5(f, y0.values.copy(), span, config, stats)
    return y0.with_values(y), stats


def _euler_step(f, y, h):
    return y + h * f(y)


def _rk4_step(f, y, h):
    k1 = f(y)
    k2 = f(y + 0.5 * h * k1)
    k3 = f(y + 0.5 * h * k2)
    k4 = f(y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _run_fixed(f, y, span, step, stats, one_step):
    n = _fixed_step_count(span, step)
    for k in range(n):
        # Final step is shortened to land exactly on the end time.
        h = span - k * step if k == n - 1 else step
        y = one_step(f, y, h)
        if not np.all(np.isfinite(y)):
            raise NonFiniteStateError(f"state became non-finite at step {k + 1}")
        stats.accepted_steps += 1
    return y


def _run_dopri5(f, y, span, config, stats):
    t = 0.0
    h = min(max(span / 100.0, 1e-8), span)
    k = [None] * 7
    while t < span:
        clipped = h >= span - t
        if clipped:
            h = span - t
        k[0] = f(y)
        for stage in range(1, 7):
            a = _DP_A[stage]
            incr = a[0] * k[0]
            for j in range(1, stage):
                if a[j] != 0.0:
                    incr = incr + a[j] * k[j]
            k[stage] = f(y + h * incr)
        y_new = y + h * (
            _DP_B5[0] * k[0]
            + _DP_B5[2] * k[2]
            + _DP_B5[3] * k[3]
            + _DP_B5[4] * k[4]
            + _DP_B5[5] * k[5]
        )
        err = h * (
            _DP_ERR[0] * k[0]
            + _DP_ERR[2] * k[2]
            + _DP_ERR[3] * k[3]
            + _DP_ERR[4] * k[4]
            + _DP_ERR[5] * k[5]
            + _DP_ERR[6] * k[6]
        )
        if not np.all(np.isfinite(y_new)):
            raise NonFiniteStateError("state became non-finite during a trial step")
        scale = config.atol + config.rtol * np.maximum(np.abs(y), np.abs(y_new))
        err_norm = float(np.sqrt(np.mean(np.square(err / scale))))
        if err_norm <= 1.0:
            stats.accepted_steps += 1
            y = y_new
            t = span if clipped else t + h
        else:
            stats.rejected_steps += 1
        if err_norm == 0.0:
            factor = _FACTOR_MAX
        else:
            factor = min(max(_SAFETY * err_norm**_ORDER_EXP, _FACTOR_MIN), _FACTOR_MAX)
        h = h * factor
    return y
