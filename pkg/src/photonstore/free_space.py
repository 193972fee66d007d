"""Free-space storage in the co-moving frame: forward, adjoint and retrieval.

Dimensionless time is measured in 1/gamma (co-moving frame) and position
``z`` in units of the medium length. ``d`` is half the usual optical depth,
so a weak resonant probe is attenuated as ``exp(-2 d)`` in intensity::

    dE/dz = i sqrt(d) P
    dP/dt = -P + i sqrt(d) E + i Omega S
    dS/dt = i Omega P

E carries no time derivative, so it is rebuilt from the boundary value by
trapezoid quadrature over z at every Runge-Kutta stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.linalg import solve_continuous_lyapunov
from scipy.special import i0e

from ._kernels import free_space_rk4
from .core_numerics import (
    NumericalError,
    SpaceGrid,
    TimeGrid,
    UsageError,
    check_resolution,
    cumulative_trapezoid,
    ensure_finite,
    midpoints,
)

MAX_OPTICAL_DEPTH = 100.0


@dataclass(frozen=True)
class FreeSpaceParams:
    d: float

    def __post_init__(self):
        if not self.d > 0:
            raise UsageError(f"optical depth must be positive, got {self.d}")

    @property
    def sqrt_d(self) -> float:
        return math.sqrt(self.d)


@dataclass
class FreeSpaceFields:
    """Fields on the time x space grid; arrays have shape (n_t, n_z).

    ``P_classes``/``S_classes`` (n_t, n_classes, n_z) are kept for
    multi-class runs; ``P`` and ``S`` are the collective sums.
    """

    tgrid: TimeGrid
    zgrid: SpaceGrid
    E: np.ndarray
    P_classes: np.ndarray
    S_classes: np.ndarray
    amplitudes: np.ndarray = field(default_factory=lambda: np.ones(1))

    @property
    def P(self) -> np.ndarray:
        return np.einsum("tjz,j->tz", self.P_classes, self.amplitudes)

    @property
    def S(self) -> np.ndarray:
        return np.einsum("tjz,j->tz", self.S_classes, self.amplitudes)

    @property
    def output(self) -> np.ndarray:
        """Transmitted field ``E(1, t)``."""
        return self.E[:, -1]


@dataclass
class FreeSpaceAdjoint(FreeSpaceFields):
    """Costates ``Ebar, Pbar, Sbar``; ``E`` holds ``Ebar``."""


@dataclass(frozen=True)
class RetrievalWindow:
    """Retrieval on ``[t_r, t_f]`` with control ``omega`` sampled on ``grid``.

    ``direction='backward'`` retrieves through the input face (the spin wave
    is mirrored in z before the forward solver runs).
    """

    grid: TimeGrid
    omega: np.ndarray
    direction: str = "forward"

    def __post_init__(self):
        om = np.asarray(self.omega, dtype=float)
        object.__setattr__(self, "omega", om)
        if om.shape != (self.grid.n_nodes,):
            raise UsageError("retrieval control must be aligned to the retrieval grid")
        if self.direction not in ("forward", "backward"):
            raise UsageError(f"direction must be 'forward' or 'backward', got {self.direction!r}")

    @classmethod
    def constant(cls, amplitude: float, duration: float, t_r: float, n_nodes: int | None = None,
                 direction: str = "forward") -> "RetrievalWindow":
        n = n_nodes or max(401, int(math.ceil(duration * max(40.0, 8 * amplitude))) + 1)
        grid = TimeGrid.over(duration, n, t_start=t_r)
        return cls(grid, np.full(n, float(amplitude)), direction)

    @property
    def t_r(self) -> float:
        return self.grid.t_start

    @property
    def t_f(self) -> float:
        return self.grid.t_end


@dataclass
class RetrievalResult:
    storage: FreeSpaceFields
    retrieval: FreeSpaceFields
    efficiency: float
    stored: float
    residual: float
    window_too_short: bool
    direction: str = "forward"


def _real_control(omega, grid: TimeGrid) -> np.ndarray:
    om = np.asarray(omega)
    if om.ndim == 0:
        om = np.full(grid.n_nodes, om)
    if om.shape != (grid.n_nodes,):
        raise UsageError(f"control has shape {om.shape}, expected ({grid.n_nodes},)")
    if np.iscomplexobj(om):
        if np.any(om.imag != 0):
            raise UsageError("the free-space model takes a real control")
        om = om.real
    if not np.all(np.isfinite(om)):
        raise NumericalError("control contains non-finite values")
    return om.astype(complex)


def _boundary(e, grid: TimeGrid) -> np.ndarray:
    e = np.asarray(e, dtype=complex)
    if e.ndim == 0:
        e = np.full(grid.n_nodes, complex(e))
    if e.shape != (grid.n_nodes,):
        raise UsageError(f"input field has shape {e.shape}, expected ({grid.n_nodes},)")
    if not np.all(np.isfinite(e)):
        raise NumericalError("input field contains non-finite values")
    return e


def integrate(a, x, d: float, omega, e0, tgrid: TimeGrid, zgrid: SpaceGrid, p0, s0, where="free space"):
    """Run the compiled kernel: classes ``a_j`` with amplitudes ``x_j``, boundary ``E(0, t) = e0``."""
    check_resolution(omega, tgrid.h, where)
    om = np.ascontiguousarray(omega, dtype=complex)
    e0 = np.ascontiguousarray(e0, dtype=complex)
    P, S, E = free_space_rk4(
        np.ascontiguousarray(a, dtype=complex), np.ascontiguousarray(x, dtype=float),
        math.sqrt(d), zgrid.h, om, np.ascontiguousarray(midpoints(om)), e0,
        np.ascontiguousarray(midpoints(e0)), tgrid.h,
        np.ascontiguousarray(p0, dtype=complex), np.ascontiguousarray(s0, dtype=complex),
    )
    ensure_finite(P, S, E, where=where)
    return P, S, E


def run(omega, e_boundary, params: FreeSpaceParams, tgrid: TimeGrid, zgrid: SpaceGrid,
        p0=None, s0=None, where="free space") -> FreeSpaceFields:
    """Single-class forward solve from arbitrary initial atomic state."""
    nz = zgrid.n_nodes
    p0 = np.zeros((1, nz), complex) if p0 is None else np.asarray(p0, complex).reshape(1, nz)
    s0 = np.zeros((1, nz), complex) if s0 is None else np.asarray(s0, complex).reshape(1, nz)
    om = _real_control(omega, tgrid)
    e0 = _boundary(e_boundary, tgrid)
    P, S, E = integrate(np.ones(1, complex), np.ones(1), params.d, om, e0, tgrid, zgrid, p0, s0, where)
    return FreeSpaceFields(tgrid, zgrid, E, P, S)


def storage_forward(omega, e_in, params: FreeSpaceParams, tgrid: TimeGrid, zgrid: SpaceGrid) -> FreeSpaceFields:
    """Storage run from an empty medium with ``E(0, t) = e_in(t)``."""
    return run(omega, e_in, params, tgrid, zgrid, where="free-space storage")


def storage_efficiency(fields: FreeSpaceFields) -> float:
    """``int_0^1 |S(z, T)|^2 dz``."""
    return float(np.dot(fields.zgrid.weights, np.abs(fields.S[-1]) ** 2))


def spin_norm(s, zgrid: SpaceGrid) -> float:
    return float(np.dot(zgrid.weights, np.abs(s) ** 2))


def adjoint_fields(omega, ebar_end, params: FreeSpaceParams, tgrid: TimeGrid, zgrid: SpaceGrid,
                   pbar_final=None, sbar_final=None, a=None, x=None, where="free-space adjoint"):
    """Costates integrated backward from ``t_end``.

    Solves ``dEbar/dz = i sqrt(d) sum_j x_j Pbar_j`` with ``Ebar(1, t) = ebar_end(t)`` and
    ``dPbar_j/dt = conj(a_j) Pbar_j + i sqrt(d) x_j Ebar + i Omega Sbar_j``,
    ``dSbar_j/dt = i Omega Pbar_j`` backward from the given terminal data.
    Internally this is the forward kernel in ``tau = t_end - t`` and ``z' = 1 - z``
    with the field sign flipped.
    """
    a = np.ones(1, complex) if a is None else np.asarray(a, complex)
    x = np.ones(1) if x is None else np.asarray(x, float)
    m, nz = a.size, zgrid.n_nodes
    pbar_final = np.zeros((m, nz), complex) if pbar_final is None else np.asarray(pbar_final, complex).reshape(m, nz)
    sbar_final = np.zeros((m, nz), complex) if sbar_final is None else np.asarray(sbar_final, complex).reshape(m, nz)
    om = _real_control(omega, tgrid)
    eb = _boundary(ebar_end, tgrid)
    P, S, E = integrate(np.conj(a), x, params.d, -om[::-1], -eb[::-1], tgrid, zgrid,
                        pbar_final[:, ::-1], sbar_final[:, ::-1], where)
    return FreeSpaceAdjoint(tgrid, zgrid, -E[::-1, ::-1].copy(), P[::-1, :, ::-1].copy(),
                            S[::-1, :, ::-1].copy(), x.copy())


def adjoint_backward(omega, s_final, params: FreeSpaceParams, tgrid: TimeGrid, zgrid: SpaceGrid) -> FreeSpaceAdjoint:
    """Costates with ``Ebar(1, t) = 0``, ``Pbar(z, T) = 0`` and ``Sbar(z, T) = s_final(z)``.

    With a real control these equations describe backward retrieval driven by
    the time-reversed control; ``Ebar(0, t)`` is the retrieved output.
    """
    s_final = np.asarray(s_final, complex)
    if s_final.shape != (zgrid.n_nodes,):
        raise UsageError("s_final must be sampled on the z grid")
    return adjoint_fields(omega, 0.0, params, tgrid, zgrid, sbar_final=s_final)


def control_gradient(fields: FreeSpaceFields, adj: FreeSpaceAdjoint) -> np.ndarray:
    """Functional derivative ``-2 int_0^1 Im[Sbar* P - Pbar S*] dz`` of the objective."""
    if fields.P_classes.shape != adj.P_classes.shape:
        raise UsageError("fields and adjoint are not aligned")
    z = np.conj(adj.S_classes) * fields.P_classes - adj.P_classes * np.conj(fields.S_classes)
    integrand = np.einsum("tjz->tz", z.imag)
    return -2.0 * (integrand @ fields.zgrid.weights)


# -- retrieval ---------------------------------------------------------------


def retrieve(s_stored, window: RetrievalWindow, params: FreeSpaceParams, zgrid: SpaceGrid) -> FreeSpaceFields:
    """Retrieval from spin wave ``s_stored`` (P = 0, no input) under ``window``'s control."""
    s0 = np.asarray(s_stored, complex)
    if window.direction == "backward":
        s0 = s0[::-1]
    return run(window.omega, 0.0, params, window.grid, zgrid, s0=s0, where="free-space retrieval")


def storage_then_forward_retrieval(omega_s, window: RetrievalWindow, e_in, params: FreeSpaceParams,
                                   tgrid: TimeGrid, zgrid: SpaceGrid, residual_tol: float = 1e-3) -> RetrievalResult:
    """Store on ``[0, T]``, map (P -> 0, S -> S), then retrieve on the window.

    The interval between ``T`` and ``t_r`` is lossless. The result is flagged
    when more than ``residual_tol`` of the stored excitation is still in the
    medium at ``t_f``.
    """
    if window.t_r < tgrid.t_end:
        raise UsageError(f"retrieval starts at {window.t_r}, before storage ends at {tgrid.t_end}")
    store = storage_forward(omega_s, e_in, params, tgrid, zgrid)
    stored = storage_efficiency(store)
    ret = retrieve(store.S[-1], window, params, zgrid)
    eta = float(np.dot(window.grid.weights, np.abs(ret.output) ** 2))
    residual = spin_norm(ret.S[-1], zgrid) + spin_norm(ret.P[-1], zgrid)
    short = stored > 0 and residual > residual_tol * stored
    return RetrievalResult(store, ret, eta, stored, residual, bool(short), window.direction)


def storage_retrieval_adjoint(result: RetrievalResult, omega_s, window: RetrievalWindow,
                              params: FreeSpaceParams):
    """Costates for ``eta_tot = int |E(1, t)|^2`` over the retrieval window.

    Retrieval window: ``Ebar(1, t) = E(1, t)`` and zero terminal atomic costates.
    Storage window: ``Ebar(1, t) = 0``, ``Pbar(T) = 0`` and ``Sbar(T) = Sbar(t_r)``
    (mirrored in z for backward retrieval). Returns ``(storage_adjoint, retrieval_adjoint)``.
    """
    zgrid = result.storage.zgrid
    radj = adjoint_fields(window.omega, result.retrieval.output, params, window.grid, zgrid,
                          where="retrieval adjoint")
    sbar = radj.S[0]
    if window.direction == "backward":
        sbar = sbar[::-1]
    sadj = adjoint_fields(omega_s, 0.0, params, result.storage.tgrid, zgrid, sbar_final=sbar,
                          where="storage adjoint")
    return sadj, radj


# -- complete backward retrieval ---------------------------------------------


@lru_cache(maxsize=16)
def _retrieval_form(d: float, n_z: int) -> np.ndarray:
    """Hermitian Q with ``eta = p^H Q p`` for free decay of a polarization p(z) through z = 1.

    The semi-discrete system ``dp/dt = (-1 - d V) p``, ``E(1) = i sqrt(d) (V p)_last``
    (V the cumulative trapezoid matrix) is integrated to infinite time in
    closed form via a Lyapunov equation.
    """
    hz = 1.0 / (n_z - 1)
    V = np.tril(np.full((n_z, n_z), hz))
    V[:, 0] = 0.5 * hz
    np.fill_diagonal(V, 0.5 * hz)
    V[0, :] = 0.0
    A = -np.eye(n_z) - d * V
    c = (1j * math.sqrt(d) * V[-1]).reshape(1, -1)
    Q = solve_continuous_lyapunov(A.conj().T, -(c.conj().T @ c))
    return 0.5 * (Q + Q.conj().T)


def complete_retrieval_form(d: float, n_z: int) -> np.ndarray:
    """Quadratic form of complete backward retrieval acting on a spin wave sampled in z."""
    Q = _retrieval_form(float(d), int(n_z))
    return Q[::-1, ::-1]


def complete_backward_efficiency(s, params: FreeSpaceParams, zgrid: SpaceGrid) -> float:
    """Efficiency of retrieving spin wave ``s(z)`` completely through the input face.

    Complete retrieval does not depend on the retrieval control, so the
    spin wave is mapped to polarization by an ideal pi pulse and left to decay.
    """
    s = np.asarray(s, complex)
    M = complete_retrieval_form(params.d, zgrid.n_nodes)
    return float(np.real(np.conj(s) @ M @ s))


def complete_backward_costate(s, params: FreeSpaceParams, zgrid: SpaceGrid) -> np.ndarray:
    """Terminal ``Sbar(z, T)`` for the objective :func:`complete_backward_efficiency`."""
    M = complete_retrieval_form(params.d, zgrid.n_nodes)
    return (M @ np.asarray(s, complex)) / zgrid.weights


def backward_retrieval_kernel(d: float, z) -> np.ndarray:
    """Continuum kernel ``(d/2) exp(-d (z + z')/2) I0(d sqrt(z z'))`` on nodes ``z``."""
    z = np.asarray(z, float)
    zz = np.add.outer(z, z)
    arg = d * np.sqrt(np.multiply.outer(z, z))
    # i0e(x) = exp(-x) I0(x), keeps the product finite at large d
    return 0.5 * d * np.exp(arg - 0.5 * d * zz) * i0e(arg)


def flux_balance(fields: FreeSpaceFields) -> dict:
    """Integrated excitation balance of a forward run.

    ``int(|P|^2 + |S|^2) dz`` at the end equals the same at the start plus
    input minus transmitted energy minus ``2 int int |P|^2``; the dictionary
    holds each term and the residual.
    """
    zw, tw = fields.zgrid.weights, fields.tgrid.weights
    P, S = fields.P, fields.S
    atoms = (np.abs(P) ** 2 + np.abs(S) ** 2) @ zw
    inflow = float(tw @ np.abs(fields.E[:, 0]) ** 2)
    leaked = float(tw @ np.abs(fields.E[:, -1]) ** 2)
    decayed = float(2.0 * tw @ ((np.abs(P) ** 2) @ zw))
    residual = atoms[-1] - atoms[0] - inflow + leaked + decayed
    return {
        "initial": float(atoms[0]),
        "final_spin": float(np.abs(S[-1]) ** 2 @ zw),
        "final_polarization": float(np.abs(P[-1]) ** 2 @ zw),
        "inflow": inflow,
        "leaked": leaked,
        "decayed": decayed,
        "residual": float(residual),
    }


def field_from_polarization(p, e0, d: float) -> np.ndarray:
    """``E(z) = e0 + i sqrt(d) int_0^z p``; the slaved field at one instant."""
    return cumulative_trapezoid(1j * math.sqrt(d) * np.asarray(p), initial=e0)
