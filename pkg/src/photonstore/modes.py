"""Input modes on a time grid: Gaussian-like, square, or loaded from file."""

from __future__ import annotations

import logging
import math
from pathlib import Path

import numpy as np
from scipy.special import erf

from .core_numerics import TimeGrid, UsageError, l2_norm_sq

log = logging.getLogger(__name__)

_WIDTH = 30.0
_OFFSET = math.exp(-_WIDTH * 0.25)


def gaussian_like_amplitude() -> float:
    """Closed-form constant A making the Gaussian-like mode unit-normalized (A ~ 2.0922)."""
    # int_0^1 (g - c)^2 du with g = exp(-30 (u - 1/2)^2), c = g(0)
    a = _WIDTH
    g2 = math.sqrt(math.pi / (2 * a)) * erf(math.sqrt(2 * a) * 0.5)
    g1 = math.sqrt(math.pi / a) * erf(math.sqrt(a) * 0.5)
    return 1.0 / math.sqrt(g2 - 2 * _OFFSET * g1 + _OFFSET**2)


def gaussian_like(grid: TimeGrid, T: float | None = None, renormalize: bool = True) -> np.ndarray:
    """``A (exp(-30 (t/T - 1/2)^2) - exp(-7.5)) / sqrt(T)``, vanishing at ``t = 0`` and ``t = T``.

    With ``renormalize`` the trapezoid norm is forced to 1 exactly; otherwise the
    analytic ``A`` is used and the norm is 1 up to quadrature error.
    """
    T = grid.duration if T is None else T
    if T <= 0:
        raise UsageError("mode duration must be positive")
    u = (grid.nodes - grid.t_start) / T
    e = gaussian_like_amplitude() * (np.exp(-_WIDTH * (u - 0.5) ** 2) - _OFFSET) / math.sqrt(T)
    e[(u < 0) | (u > 1)] = 0.0
    e[np.isclose(u, 0.0, atol=1e-14) | np.isclose(u, 1.0, atol=1e-14)] = 0.0
    e = e.astype(complex)
    if renormalize:
        e /= math.sqrt(l2_norm_sq(e, grid))
    return e


def square(grid: TimeGrid, T: float | None = None) -> np.ndarray:
    T = grid.duration if T is None else T
    if T <= 0:
        raise UsageError("mode duration must be positive")
    return np.full(grid.n_nodes, 1.0 / math.sqrt(T), dtype=complex)


def from_file(path, grid: TimeGrid) -> np.ndarray:
    """Load a mode sampled on ``grid`` from a text file.

    One or two columns per row (real part, optional imaginary part). A mode
    whose norm is not 1 is renormalized with a warning.
    """
    path = Path(path)
    if not path.exists():
        raise UsageError(f"input mode file {path} does not exist")
    data = np.atleast_2d(np.loadtxt(path, comments="#", delimiter=None if path.suffix != ".csv" else ","))
    if data.shape[0] == 1 and data.shape[1] == grid.n_nodes:
        data = data.T
    e = data[:, 0] + (1j * data[:, 1] if data.shape[1] > 1 else 0)
    if e.shape[0] != grid.n_nodes:
        raise UsageError(f"{path} holds {e.shape[0]} samples but the grid has {grid.n_nodes} nodes")
    norm = l2_norm_sq(e, grid)
    if norm == 0:
        raise UsageError(f"{path} holds an all-zero mode")
    if abs(norm - 1.0) > 1e-10:
        log.warning("input mode from %s has norm %.6g; renormalizing", path, norm)
        e = e / math.sqrt(norm)
    return e.astype(complex)


def make_input_mode(shape: str, T: float, grid: TimeGrid) -> np.ndarray:
    """Unit-norm input mode by name: ``gaussian_like``, ``square`` or a file path."""
    if T <= 0:
        raise UsageError("mode duration must be positive")
    if shape == "gaussian_like":
        return gaussian_like(grid, T)
    if shape == "square":
        return square(grid, T)
    if isinstance(shape, (str, Path)) and (Path(shape).suffix or Path(shape).exists()):
        return from_file(shape, grid)
    raise UsageError(f"unknown input shape {shape!r}; expected gaussian_like, square or a file path")
