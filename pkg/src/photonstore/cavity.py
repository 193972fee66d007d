"""Bad-cavity storage model: forward and adjoint integration.

Units: time in 1/gamma, rates and detunings in gamma. ``Omega`` is half the
conventional Rabi frequency, so a pi pulse of constant ``Omega`` lasts
``pi / (2 Omega)``.

Simple resonant model (one class, real control)::

    dP/dt = -(1 + C) P + i Omega S + i sqrt(2C) E_in
    dS/dt = i Omega P

Generalized model with frequency classes (Delta_j, x_j), detuning Delta,
spin decay gamma_s and rethermalizing collisions gamma_c::

    dP_j/dt = -[1 + i(Delta + Delta_j)] P_j - C x_j P + i Omega S_j
              + i sqrt(2C) x_j E_in + gamma_c (x_j P - P_j)
    dS_j/dt = -gamma_s S_j + i Omega* P_j + gamma_c (x_j S - S_j)

with P = sum_k x_k P_k and S = sum_k x_k S_k. The storage efficiency is
``|S(T)|^2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ._kernels import cavity_rk4
from .core_numerics import (
    NumericalError,
    TimeGrid,
    UsageError,
    check_resolution,
    cumulative_trapezoid,
    ensure_finite,
    midpoints,
)


@dataclass(frozen=True)
class CavityParams:
    """Cooperativity ``C`` plus optional detuning, spin decay and collisions.

    ``collisions_in_p=False`` drops the collision terms from the optical
    polarization equation, the usual simplification when gamma_c << gamma.
    """

    C: float
    delta: float = 0.0
    gamma_s: float = 0.0
    gamma_c: float = 0.0
    collisions_in_p: bool = True

    def __post_init__(self):
        if self.C < 0:
            raise UsageError(f"cooperativity must be nonnegative, got {self.C}")
        if self.gamma_s < 0 or self.gamma_c < 0:
            raise UsageError("gamma_s and gamma_c must be nonnegative")

    @property
    def is_simple(self) -> bool:
        return self.delta == 0 and self.gamma_s == 0 and self.gamma_c == 0

    @property
    def max_rate(self) -> float:
        return 1.0 + self.C + abs(self.delta) + self.gamma_s + 2 * self.gamma_c


@dataclass(frozen=True)
class InhomProfile:
    """Frequency classes with detunings ``deltas`` and amplitudes ``x_j = sqrt(p_j)``.

    When a dimensionless ``shape`` f_j is given, ``deltas == width * shape``.
    """

    deltas: np.ndarray
    amplitudes: np.ndarray
    shape: np.ndarray | None = None
    width: float | None = None

    def __post_init__(self):
        deltas = np.atleast_1d(np.asarray(self.deltas, dtype=float))
        amps = np.atleast_1d(np.asarray(self.amplitudes, dtype=float))
        object.__setattr__(self, "deltas", deltas)
        object.__setattr__(self, "amplitudes", amps)
        if deltas.shape != amps.shape or deltas.ndim != 1 or deltas.size < 1:
            raise UsageError("deltas and amplitudes must be 1-d arrays of equal nonzero length")
        if np.any(amps < 0):
            raise UsageError("class amplitudes must be nonnegative")
        if abs(np.sum(amps**2) - 1.0) > 1e-10:
            raise UsageError(f"sum of x_j^2 is {np.sum(amps**2)!r}, expected 1")
        if self.shape is not None:
            shape = np.asarray(self.shape, dtype=float)
            object.__setattr__(self, "shape", shape)
            if shape.shape != deltas.shape:
                raise UsageError("shape must match deltas")

    @property
    def n_classes(self) -> int:
        return self.deltas.size

    @classmethod
    def homogeneous(cls) -> "InhomProfile":
        return cls(np.zeros(1), np.ones(1), shape=np.zeros(1), width=0.0)

    @classmethod
    def from_shape(cls, shape, weights, width: float) -> "InhomProfile":
        """Profile with populations proportional to ``weights`` (renormalized)."""
        shape = np.asarray(shape, dtype=float)
        p = np.asarray(weights, dtype=float)
        if np.any(p < 0) or p.sum() <= 0:
            raise UsageError("populations must be nonnegative with a positive sum")
        x = np.sqrt(p / p.sum())
        return cls(width * shape, x, shape=shape, width=float(width))

    @classmethod
    def two_class(cls, width: float, weights=(0.5, 0.5)) -> "InhomProfile":
        return cls.from_shape([-1.0, 1.0], weights, width)

    @classmethod
    def gaussian(cls, width: float, n_classes: int = 32, cutoff: float = 5.0) -> "InhomProfile":
        """Gaussian line with half width at half maximum ``width``, truncated at ``cutoff`` widths."""
        f = np.linspace(-cutoff, cutoff, n_classes)
        return cls.from_shape(f, np.exp(-math.log(2.0) * f**2), width)

    @classmethod
    def lorentzian(cls, width: float, n_classes: int = 32, cutoff: float = 5.0) -> "InhomProfile":
        """Lorentzian line with half width at half maximum ``width``, truncated at ``cutoff`` widths."""
        f = np.linspace(-cutoff, cutoff, n_classes)
        return cls.from_shape(f, 1.0 / (1.0 + f**2), width)

    @classmethod
    def uniform(cls, deltas) -> "InhomProfile":
        deltas = np.asarray(deltas, dtype=float)
        span = np.max(np.abs(deltas))
        shape = deltas / span if span > 0 else np.zeros_like(deltas)
        return cls.from_shape(shape, np.ones_like(deltas), span)

    def with_width(self, width: float) -> "InhomProfile":
        if self.shape is None:
            raise UsageError("profile has no shape descriptor; width is undefined")
        return replace(self, deltas=width * self.shape, width=float(width))

    def with_amplitudes(self, amplitudes) -> "InhomProfile":
        x = np.abs(np.asarray(amplitudes, dtype=float))
        norm = math.sqrt(float(np.sum(x**2)))
        if norm == 0:
            raise UsageError("all class amplitudes vanished")
        return replace(self, amplitudes=x / norm)


@dataclass
class CavityTrajectory:
    """Per-class polarizations ``P_classes``/``S_classes`` of shape (n_t, n_classes)."""

    grid: TimeGrid
    P_classes: np.ndarray
    S_classes: np.ndarray
    amplitudes: np.ndarray = field(default_factory=lambda: np.ones(1))

    @property
    def P(self) -> np.ndarray:
        return self.P_classes @ self.amplitudes

    @property
    def S(self) -> np.ndarray:
        return self.S_classes @ self.amplitudes

    @property
    def efficiency(self) -> float:
        return float(abs(self.S[-1]) ** 2)


@dataclass
class CavityAdjoint:
    grid: TimeGrid
    P_classes: np.ndarray
    S_classes: np.ndarray
    amplitudes: np.ndarray = field(default_factory=lambda: np.ones(1))

    @property
    def P(self) -> np.ndarray:
        return self.P_classes @ self.amplitudes

    @property
    def S(self) -> np.ndarray:
        return self.S_classes @ self.amplitudes


def _series(values, grid: TimeGrid, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=complex)
    if arr.ndim == 0:
        arr = np.full(grid.n_nodes, complex(arr))
    if arr.shape != (grid.n_nodes,):
        raise UsageError(f"{name} has shape {arr.shape}, expected ({grid.n_nodes},)")
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} contains non-finite values")
    return arr


def _coefficients(params: CavityParams, profile: InhomProfile):
    gc = params.gamma_c
    gc_p = gc if params.collisions_in_p else 0.0
    a = 1.0 + gc_p + 1j * (params.delta + profile.deltas)
    coup = gc_p - params.C
    return a.astype(complex), complex(coup), params.gamma_s + gc, complex(gc)


def integrate(a, coup, x, gs, gcs, src, omega, drive, grid: TimeGrid, p0, s0, where="cavity"):
    """Run the compiled cavity kernel on ``grid`` (forward in time)."""
    check_resolution(omega, grid.h, where)
    om = np.ascontiguousarray(omega, dtype=complex)
    e = np.ascontiguousarray(drive, dtype=complex)
    P, S = cavity_rk4(
        np.ascontiguousarray(a, dtype=complex), complex(coup),
        np.ascontiguousarray(x, dtype=float), float(gs), complex(gcs), complex(src),
        om, np.ascontiguousarray(midpoints(om)), e, np.ascontiguousarray(midpoints(e)),
        float(grid.h), np.ascontiguousarray(p0, dtype=complex), np.ascontiguousarray(s0, dtype=complex),
    )
    ensure_finite(P, S, where=where)
    return P, S


def _check_simple(omega, params: CavityParams, grid: TimeGrid):
    if not params.is_simple:
        raise UsageError("the simple model needs delta = gamma_s = gamma_c = 0; use generalized_forward")
    om = _series(omega, grid, "Omega")
    if np.any(om.imag != 0):
        raise UsageError("the simple model takes a real control; use generalized_forward")
    return om


def storage_forward(omega, e_in, params: CavityParams, grid: TimeGrid, p0=0.0, s0=0.0) -> CavityTrajectory:
    """Integrate the resonant storage equations from ``P(0)=p0``, ``S(0)=s0``."""
    om = _check_simple(omega, params, grid)
    return generalized_forward(om, e_in, params, InhomProfile.homogeneous(), grid, p0=p0, s0=s0)


def generalized_forward(omega, e_in, params: CavityParams, profile: InhomProfile, grid: TimeGrid,
                        p0=None, s0=None) -> CavityTrajectory:
    om = _series(omega, grid, "Omega")
    e = _series(e_in, grid, "E_in")
    m = profile.n_classes
    x = profile.amplitudes
    p0 = np.zeros(m, complex) if p0 is None else np.broadcast_to(np.asarray(p0, complex) * np.ones(m), (m,))
    s0 = np.zeros(m, complex) if s0 is None else np.broadcast_to(np.asarray(s0, complex) * np.ones(m), (m,))
    a, coup, gs, gcs = _coefficients(params, profile)
    src = 1j * math.sqrt(2.0 * params.C)
    P, S = integrate(a, coup, x, gs, gcs, src, om, e, grid, p0, s0, where="cavity forward")
    return CavityTrajectory(grid, P, S, x.copy())


def _adjoint(om, params, profile, grid, pbar_T, sbar_T, source=None, where="cavity adjoint"):
    """Backward integration of the costates as a forward run in reversed time."""
    a, coup, gs, gcs = _coefficients(params, profile)
    drive = np.zeros(grid.n_nodes, complex) if source is None else np.asarray(source, complex)[::-1]
    src = 1j * math.sqrt(2.0 * params.C) if params.C > 0 else 0j
    Pr, Sr = integrate(np.conj(a), coup, profile.amplitudes, gs, gcs, src, -om[::-1], drive,
                       grid, pbar_T, sbar_T, where=where)
    return CavityAdjoint(grid, Pr[::-1].copy(), Sr[::-1].copy(), profile.amplitudes.copy())


def adjoint_backward(omega, s_final: complex, params: CavityParams, grid: TimeGrid) -> CavityAdjoint:
    """Costates with ``Pbar(T) = 0`` and ``Sbar(T) = s_final``.

    For real controls this equals retrieval driven by the time-reversed
    control: ``Pbar(T - tau) = -P_ret(tau)`` and ``Sbar(T - tau) = S_ret(tau)``.
    """
    om = _check_simple(omega, params, grid)
    return generalized_adjoint(om, s_final, params, InhomProfile.homogeneous(), grid)


def generalized_adjoint(omega, s_final: complex, params: CavityParams, profile: InhomProfile,
                        grid: TimeGrid) -> CavityAdjoint:
    """Costates with ``Pbar_j(T) = 0`` and ``Sbar_j(T) = x_j S(T)``."""
    om = _series(omega, grid, "Omega")
    x = profile.amplitudes
    return _adjoint(om, params, profile, grid, np.zeros(x.size, complex), complex(s_final) * x)


def complex_control_gradient(traj: CavityTrajectory, adj: CavityAdjoint) -> np.ndarray:
    """``G(t) = i sum_j (Sbar_j* P_j - Pbar_j S_j*)``.

    A complex control variation changes the efficiency by
    ``2 Re int conj(G) dOmega dt``, so ``Omega + G / lambda`` moves uphill.
    """
    if traj.P_classes.shape != adj.P_classes.shape:
        raise UsageError("trajectory and adjoint are not aligned")
    return 1j * np.sum(np.conj(adj.S_classes) * traj.P_classes - adj.P_classes * np.conj(traj.S_classes), axis=1)


def control_gradient(traj: CavityTrajectory, adj: CavityAdjoint) -> np.ndarray:
    """Functional derivative with respect to a real control: ``-2 Im[Sbar* P - Pbar S*]``."""
    return 2.0 * complex_control_gradient(traj, adj).real


def storage_efficiency(omega, e_in, params: CavityParams, grid: TimeGrid,
                       profile: InhomProfile | None = None) -> float:
    if profile is None and params.is_simple and np.all(np.imag(omega) == 0):
        return storage_forward(omega, e_in, params, grid).efficiency
    return generalized_forward(omega, e_in, params, profile or InhomProfile.homogeneous(), grid).efficiency


def adiabatic_storage_control(e_in, C: float, grid: TimeGrid) -> np.ndarray:
    """Adiabatic control ``sqrt((1 + C) / 2) E_in(t) / sqrt(int_0^t |E_in|^2)`` for a real input.

    It impedance-matches the input so that ``|S(t)|^2 = C / (1 + C) int_0^t |E_in|^2``
    whenever ``T C >> 1``. The integrable singularity at ``t = 0`` is replaced
    by the value at the first interior node.
    """
    if not C > 0:
        raise UsageError("adiabatic shaping needs C > 0")
    e = _series(e_in, grid, "E_in")
    if np.any(np.abs(e.imag) > 1e-14 * max(np.max(np.abs(e)), 1.0)):
        raise UsageError("adiabatic shaping is implemented for real input modes")
    e = e.real
    h = cumulative_trapezoid(e**2, 0.0, grid.h).real
    om = np.zeros(grid.n_nodes)
    pos = h > 0
    om[pos] = math.sqrt((1.0 + C) / 2.0) * e[pos] / np.sqrt(h[pos])
    first = int(np.argmax(pos))
    om[:first] = om[first]
    return om


def composite_offresonant_control(omega0, delta: float, delta2: float, grid: TimeGrid,
                                  min_nodes_per_period: int = 20) -> np.ndarray:
    """``Omega2 exp(-i Delta2 t) + Omega0(t) exp(i Delta t)`` with ``Omega2 = sqrt(Delta Delta2)``.

    The far-detuned first term Stark-shifts the excited state into resonance
    with an input at detuning ``delta``; feed the result to
    :func:`generalized_forward` with ``CavityParams(delta=delta)``.
    """
    if delta < 0 or delta2 <= 0:
        raise UsageError("construction needs delta >= 0 and delta2 > 0")
    if delta > 0 and delta2 < 10.0 * delta:
        raise UsageError(f"delta2 = {delta2} must be at least 10 * delta = {10 * delta}")
    nodes_per_period = 2.0 * math.pi / delta2 / grid.h
    if nodes_per_period < min_nodes_per_period:
        raise UsageError(
            f"grid step {grid.h:.3g} gives {nodes_per_period:.1f} nodes per 2*pi/delta2; "
            f"need at least {min_nodes_per_period}"
        )
    t = grid.nodes - grid.t_start
    omega2 = math.sqrt(delta * delta2)
    om0 = _series(omega0, grid, "Omega0")
    return omega2 * np.exp(-1j * delta2 * t) + om0 * np.exp(1j * delta * t)
