"""Grids, quadrature and RK4 stepping shared by every model.

Time is measured in units of 1/gamma and position in units of the medium
length, so every grid here is dimensionless.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


class UsageError(ValueError):
    """Raised for malformed or inconsistent arguments."""


class NumericalError(ArithmeticError):
    """Raised when an integration produces non-finite or unresolved values."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on ``[t_start, t_end]`` with ``n_nodes`` nodes."""

    t_start: float
    t_end: float
    n_nodes: int

    def __post_init__(self):
        if not self.n_nodes >= 2:
            raise UsageError(f"TimeGrid needs at least 2 nodes, got {self.n_nodes}")
        if not self.t_end > self.t_start:
            raise UsageError(f"t_end ({self.t_end}) must exceed t_start ({self.t_start})")

    @classmethod
    def over(cls, duration: float, n_nodes: int, t_start: float = 0.0) -> "TimeGrid":
        return cls(t_start, t_start + duration, n_nodes)

    @property
    def h(self) -> float:
        return (self.t_end - self.t_start) / (self.n_nodes - 1)

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.t_start, self.t_end, self.n_nodes)

    @property
    def weights(self) -> np.ndarray:
        return trapezoid_weights(self.n_nodes, self.h)

    def refined(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.t_start, self.t_end, (self.n_nodes - 1) * factor + 1)


@dataclass(frozen=True)
class SpaceGrid:
    """Uniform grid on ``z in [0, 1]``."""

    n_nodes: int

    def __post_init__(self):
        if not self.n_nodes >= 2:
            raise UsageError(f"SpaceGrid needs at least 2 nodes, got {self.n_nodes}")

    @property
    def h(self) -> float:
        return 1.0 / (self.n_nodes - 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_nodes)

    @property
    def weights(self) -> np.ndarray:
        return trapezoid_weights(self.n_nodes, self.h)

    def refined(self, factor: int = 2) -> "SpaceGrid":
        return SpaceGrid((self.n_nodes - 1) * factor + 1)


def trapezoid_weights(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    w[0] = w[-1] = 0.5 * h
    return w


def default_time_nodes(duration: float, rate: float = 1.0, minimum: int = 401) -> int:
    """Node count for a window of length ``duration``.

    At least 40 nodes per 1/gamma, at least 8 nodes per 1/rate where ``rate`` is
    the fastest decay or coupling in the problem, and never fewer than
    ``minimum`` nodes across the window.
    """
    per_unit = max(40.0, 8.0 * rate)
    return max(minimum, int(math.ceil(duration * per_unit)) + 1)


def default_space_nodes(d: float) -> int:
    """201 nodes, refined so that d * dz stays at or below 0.1."""
    return max(201, int(math.ceil(10.0 * d)) + 1)


def _check_aligned(f: np.ndarray, n: int, what: str = "series") -> None:
    if f.shape[0] != n:
        raise UsageError(f"{what} has {f.shape[0]} samples but the grid has {n} nodes")


def l2_norm_sq(f, grid: TimeGrid) -> float:
    """Trapezoid approximation of the integral of ``|f|^2`` over ``grid``."""
    f = np.asarray(f)
    _check_aligned(f, grid.n_nodes)
    return float(np.dot(grid.weights, np.abs(f) ** 2))


def normalize(f, grid: TimeGrid) -> np.ndarray:
    f = np.asarray(f, dtype=complex)
    norm = l2_norm_sq(f, grid)
    if norm == 0.0:
        raise UsageError("cannot normalize an all-zero series")
    return f / math.sqrt(norm)


def cumulative_trapezoid(f, initial: complex = 0.0, h: float | None = None) -> np.ndarray:
    """Running trapezoid integral along the first axis, ``F[0] == initial``.

    ``h`` defaults to the spacing of the unit interval sampled by ``len(f)``
    nodes, which is the z grid of the free-space model.
    """
    f = np.asarray(f)
    n = f.shape[0]
    if h is None:
        h = 1.0 / (n - 1)
    out = np.empty(f.shape, dtype=np.result_type(f, complex))
    out[0] = initial
    out[1:] = initial + np.cumsum(0.5 * h * (f[1:] + f[:-1]), axis=0)
    return out


def midpoints(f) -> np.ndarray:
    """Values halfway between consecutive samples by cubic interpolation.

    Fourth-order accurate so RK4 keeps its order with sampled coefficients.
    Arrays shorter than four samples fall back to linear averaging.
    """
    f = np.asarray(f)
    n = f.shape[0]
    if n < 4:
        return 0.5 * (f[1:] + f[:-1])
    mid = np.empty((n - 1,) + f.shape[1:], dtype=f.dtype if f.dtype.kind == "c" else float)
    mid[1:-1] = (-f[:-3] + 9.0 * f[1:-2] + 9.0 * f[2:-1] - f[3:]) / 16.0
    mid[0] = (5.0 * f[0] + 15.0 * f[1] - 5.0 * f[2] + f[3]) / 16.0
    mid[-1] = (f[-4] - 5.0 * f[-3] + 15.0 * f[-2] + 5.0 * f[-1]) / 16.0
    return mid


def midpoints_transpose(v) -> np.ndarray:
    """Adjoint of :func:`midpoints`: maps ``n - 1`` midpoint weights back onto ``n`` nodes."""
    v = np.asarray(v)
    m = v.shape[0]
    n = m + 1
    out = np.zeros((n,) + v.shape[1:], dtype=v.dtype)
    if n < 4:
        out[:-1] += 0.5 * v
        out[1:] += 0.5 * v
        return out
    inner = v[1:-1] / 16.0
    out[:-3] -= inner
    out[1:-2] += 9.0 * inner
    out[2:-1] += 9.0 * inner
    out[3:] -= inner
    head = np.array([5.0, 15.0, -5.0, 1.0]).reshape((4,) + (1,) * (v.ndim - 1)) / 16.0
    out[:4] += head * v[0]
    out[-4:] += head[::-1] * v[-1]
    return out


def node_sensitivity(g, h: float) -> np.ndarray:
    """Map a functional derivative ``g(t)`` to derivatives with respect to node values.

    RK4 with interpolated midpoints samples a control at nodes (Simpson weight
    h/6 per use) and at midpoints (weight 2h/3). Away from the ends the result
    is ``h * g``; at the ends it accounts for the one-sided interpolation, so
    it is the quantity to compare with finite differences taken node by node.
    """
    g = np.asarray(g)
    out = (h / 3.0) * g
    out[0] *= 0.5
    out[-1] *= 0.5
    return out + (2.0 * h / 3.0) * midpoints_transpose(midpoints(g))


def rk4_step(state, rhs: Callable[[float, np.ndarray], np.ndarray], t: float, h: float):
    """One classical fourth-order Runge-Kutta step; ``h`` may be negative."""
    if h == 0:
        raise UsageError("step size must be nonzero")
    y = np.asarray(state, dtype=complex)
    if not np.all(np.isfinite(y)):
        raise NumericalError(f"non-finite state entering rk4_step at t={t}")
    k1 = rhs(t, y)
    k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = rhs(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def ensure_finite(*arrays, where: str = "integration") -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            peak = np.nanmax(np.abs(np.where(np.isfinite(a), a, np.nan))) if np.any(np.isfinite(a)) else float("nan")
            raise NumericalError(
                f"{where} produced non-finite values (max finite |value| = {peak:.3e}); "
                "refine the time grid or reduce the control amplitude"
            )


def check_resolution(omega, h: float, where: str = "integration", limit: float = 2.5) -> None:
    """Reject controls too strong for the step: RK4 needs ``h * |Omega|`` well below 2.8."""
    peak = float(np.max(np.abs(omega))) if np.size(omega) else 0.0
    if peak * h > limit:
        raise NumericalError(
            f"{where}: max |Omega| = {peak:.3e} is unresolved by step h = {h:.3e} "
            f"(h*|Omega| = {peak * h:.2f} > {limit})"
        )
