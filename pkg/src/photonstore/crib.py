"""Fast storage and retrieval with controlled reversible inhomogeneous broadening.

The control pulses are ideal pi pulses at ``T`` (storage) and ``t_r``
(retrieval), so only the optical polarizations ``P_j`` of the frequency
classes evolve. Between the pulses the broadening is reversed and nothing
decays; the two pulses compose to a 2 pi rotation, ``P_j(t_r) = -P_j(T)``.

Cavity, storage on ``[0, T]`` then retrieval on ``[t_r, t_f]``::

    dP_j/dt = -(1 + i Delta_j) P_j - C x_j P + i sqrt(2C) x_j E_in
    dP_j/dt = -(1 - i Delta_j) P_j - C x_j P,      E_out = i sqrt(2C) P

Free space (reconstructed by direct analogy with the cavity system; storage
through z = 0, backward retrieval out through z = 0)::

    dE/dz = i sqrt(d) sum_j x_j P_j
    dP_j/dt = -(1 + i Delta_j) P_j + i sqrt(d) x_j E      (storage)
    dP_j/dt = -(1 - i Delta_j) P_j + i sqrt(d) x_j E      (retrieval, z mirrored)

Gradients follow from the costates ``Pbar_j`` (and ``Ebar`` in free space),
integrated as the same kernels in reversed time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize_scalar

from . import cavity as _cavity
from . import free_space as _free
from ._kernels import free_space_rk4_final
from .cavity import InhomProfile
from .core_numerics import (
    SpaceGrid,
    TimeGrid,
    UsageError,
    default_space_nodes,
    ensure_finite,
    midpoints,
)

DEFAULT_TAIL = 5.0


@dataclass(frozen=True)
class CribConfig:
    """Protocol timing, medium and profile.

    ``t_r`` defaults to ``T`` (nothing happens between the pulses) and
    ``t_f`` to ``t_r + T + tail``, long enough for the echo and its decay.
    """

    profile: InhomProfile
    T: float
    model: str = "cavity"
    C: float | None = None
    d: float | None = None
    t_r: float | None = None
    t_f: float | None = None
    tail: float = DEFAULT_TAIL
    nodes_per_unit: float | None = None
    n_z: int | None = None

    def __post_init__(self):
        if self.model not in ("cavity", "free_space"):
            raise UsageError(f"model must be 'cavity' or 'free_space', got {self.model!r}")
        if not self.T > 0:
            raise UsageError("T must be positive")
        if self.model == "cavity" and (self.C is None or self.C < 0):
            raise UsageError("cavity CRIB needs a nonnegative C")
        if self.model == "free_space" and (self.d is None or not self.d > 0):
            raise UsageError("free-space CRIB needs a positive d")
        if self.retrieval_start < self.T:
            raise UsageError("t_r must not precede T")
        if not self.retrieval_end > self.retrieval_start:
            raise UsageError("t_f must exceed t_r")

    @property
    def retrieval_start(self) -> float:
        return self.T if self.t_r is None else self.t_r

    @property
    def retrieval_end(self) -> float:
        return self.retrieval_start + self.T + self.tail if self.t_f is None else self.t_f

    @property
    def coupling(self) -> float:
        return self.C if self.model == "cavity" else self.d

    @property
    def rate(self) -> float:
        return 1.0 + self.coupling + float(np.max(np.abs(self.profile.deltas)))

    def _density(self) -> float:
        if self.nodes_per_unit is not None:
            return float(self.nodes_per_unit)
        return max(40.0, self.steps_per_rate * self.rate)

    @property
    def steps_per_rate(self) -> float:
        # the cavity is cheap, so it gets a finer step that keeps the trapezoid
        # error on the fast-decaying output near 1e-4
        return 20.0 if self.model == "cavity" else 8.0

    def storage_grid(self) -> TimeGrid:
        n = max(201, int(math.ceil(self.T * self._density())) + 1)
        return TimeGrid.over(self.T, n)

    def retrieval_grid(self) -> TimeGrid:
        span = self.retrieval_end - self.retrieval_start
        n = max(201, int(math.ceil(span * self._density())) + 1)
        return TimeGrid(self.retrieval_start, self.retrieval_end, n)

    def space_grid(self) -> SpaceGrid:
        return SpaceGrid(self.n_z or default_space_nodes(self.d))

    def with_profile(self, profile: InhomProfile) -> "CribConfig":
        return replace(self, profile=profile)

    def with_width(self, width: float) -> "CribConfig":
        return replace(self, profile=self.profile.with_width(width))


@dataclass
class CribTrajectory:
    """Forward solution. Cavity arrays are (n_t, n_classes); free-space (n_t, n_classes, n_z)."""

    storage_grid: TimeGrid
    retrieval_grid: TimeGrid
    e_in: np.ndarray
    P_store: np.ndarray
    P_ret: np.ndarray
    E_out: np.ndarray
    efficiency: float
    window_too_short: bool = False
    E_store: np.ndarray | None = None
    E_ret: np.ndarray | None = None

    @property
    def p_at_T(self) -> np.ndarray:
        return self.P_store[-1]


@dataclass
class CribAdjoint:
    Pbar_store: np.ndarray
    Pbar_ret: np.ndarray
    Ebar_store: np.ndarray | None = None
    Ebar_ret: np.ndarray | None = None


def _series(e_in, grid: TimeGrid) -> np.ndarray:
    """Input samples; a callable ``e_in(grid)`` is evaluated on the storage grid.

    Grids follow the profile (wider lines need finer steps), so sweeps over
    the width should pass the mode as a callable such as ``modes.gaussian_like``.
    """
    if callable(e_in):
        e_in = e_in(grid)
    e = np.asarray(e_in, complex)
    if e.shape != (grid.n_nodes,):
        raise UsageError(f"input has shape {e.shape}, expected ({grid.n_nodes},)")
    ensure_finite(e, where="CRIB input")
    return e


def _window_flag(E_out, grid: TimeGrid, eta: float, tol: float = 1e-3) -> bool:
    """True when the second half of the window still carries more than ``tol`` of ``eta``.

    The output tail decays at least as fast as exp(-2 t), so the energy left
    beyond ``t_f`` is bounded by the energy in the last stretch of the window.
    """
    if eta <= 0:
        return False
    w = grid.weights
    tail = float(np.dot(w[-max(2, grid.n_nodes // 10):], np.abs(E_out[-max(2, grid.n_nodes // 10):]) ** 2))
    return tail > tol * eta


# -- cavity --------------------------------------------------------------------


def _cavity_run(a, x, C, drive, grid, p0):
    m = x.size
    zero = np.zeros(grid.n_nodes, complex)
    P, _ = _cavity.integrate(a, -C, x, 0.0, 0.0, 1j * math.sqrt(2.0 * C), zero, drive, grid,
                             p0, np.zeros(m, complex), where="CRIB")
    return P


def fast_storage(e_in, cfg: CribConfig) -> np.ndarray:
    """``P_j(T)`` after absorbing ``e_in`` with the control off."""
    return _storage(e_in, cfg)[-1]


def _storage(e_in, cfg: CribConfig):
    grid = cfg.storage_grid()
    e = _series(e_in, grid)
    prof = cfg.profile
    if cfg.model == "cavity":
        return _cavity_run(1.0 + 1j * prof.deltas, prof.amplitudes, cfg.C, e, grid,
                           np.zeros(prof.n_classes, complex))
    raise UsageError("use free_space_crib for the free-space model")


def fast_retrieval(p_at_T, cfg: CribConfig):
    """Retrieve from ``P_j(T)``; returns ``(E_out, eta_tot, window_too_short, P_j)``.

    The 2 pi handoff ``P_j(t_r) = -P_j(T)`` is applied here.
    """
    grid = cfg.retrieval_grid()
    prof = cfg.profile
    p0 = -np.asarray(p_at_T, complex)
    P = _cavity_run(1.0 - 1j * prof.deltas, prof.amplitudes, cfg.C,
                    np.zeros(grid.n_nodes, complex), grid, p0)
    E_out = 1j * math.sqrt(2.0 * cfg.C) * (P @ prof.amplitudes)
    eta = float(np.dot(grid.weights, np.abs(E_out) ** 2))
    return E_out, eta, _window_flag(E_out, grid, eta), P


def run(e_in, cfg: CribConfig) -> CribTrajectory:
    """Storage followed by retrieval for either model."""
    if cfg.model == "free_space":
        return free_space_crib(e_in, cfg, gradients=False).trajectory
    P_store = _storage(e_in, cfg)
    E_out, eta, short, P_ret = fast_retrieval(P_store[-1], cfg)
    sg = cfg.storage_grid()
    return CribTrajectory(sg, cfg.retrieval_grid(), _series(e_in, sg), P_store, P_ret, E_out, eta, short)


def efficiency(e_in, cfg: CribConfig) -> float:
    if cfg.model == "free_space":
        return free_space_crib_efficiency(e_in, cfg)
    return run(e_in, cfg).efficiency


def crib_adjoint(traj: CribTrajectory, cfg: CribConfig) -> CribAdjoint:
    """Costates for ``eta_tot``.

    Retrieval window, backward from ``Pbar_j(t_f) = 0``:
    ``dPbar_j/dt = (1 + i Delta_j) Pbar_j + C x_j Pbar - 2 C x_j P``.
    Storage window, backward from ``Pbar_j(T) = -Pbar_j(t_r)``:
    ``dPbar_j/dt = (1 - i Delta_j) Pbar_j + C x_j Pbar``.
    """
    if cfg.model == "free_space":
        raise UsageError("use free_space_crib(..., gradients=True) for the free-space adjoint")
    prof = cfg.profile
    m = prof.n_classes
    sg, rg = traj.storage_grid, traj.retrieval_grid
    # in reversed time the source -2 C x_j P reads src * x_j * e with e = -E_out
    Rr = _cavity_run(1.0 + 1j * prof.deltas, prof.amplitudes, cfg.C, -traj.E_out[::-1], rg,
                     np.zeros(m, complex))
    Pbar_ret = Rr[::-1]
    Rs = _cavity_run(1.0 - 1j * prof.deltas, prof.amplitudes, cfg.C, np.zeros(sg.n_nodes, complex), sg,
                     -Pbar_ret[0])
    return CribAdjoint(Rs[::-1].copy(), Pbar_ret.copy())


def _integral(grid: TimeGrid, values) -> np.ndarray:
    return np.tensordot(grid.weights, values, axes=(0, 0))


def weight_gradient(traj: CribTrajectory, adj: CribAdjoint, cfg: CribConfig) -> np.ndarray:
    """Class-weight ascent direction ``A_j``.

    ``A_j = -C Re[int_st + int_ret](Pbar_j* P + Pbar* P_j)
    - sqrt(2C) Im int_st E_in Pbar_j* + 2 C Re int_ret P_j* P``,
    which equals one half of ``d eta_tot / d x_j`` at fixed (unnormalized) x.
    """
    if cfg.model == "free_space":
        raise UsageError("use free_space_crib(..., gradients=True) for free-space weights")
    x, C = cfg.profile.amplitudes, cfg.C
    sg, rg = traj.storage_grid, traj.retrieval_grid
    Ps, Pr = traj.P_store @ x, traj.P_ret @ x
    Pbs, Pbr = adj.Pbar_store @ x, adj.Pbar_ret @ x
    cross_s = np.conj(adj.Pbar_store) * Ps[:, None] + np.conj(Pbs)[:, None] * traj.P_store
    cross_r = np.conj(adj.Pbar_ret) * Pr[:, None] + np.conj(Pbr)[:, None] * traj.P_ret
    A = -C * np.real(_integral(sg, cross_s) + _integral(rg, cross_r))
    A -= math.sqrt(2.0 * C) * np.imag(_integral(sg, traj.e_in[:, None] * np.conj(adj.Pbar_store)))
    A += 2.0 * C * np.real(_integral(rg, np.conj(traj.P_ret) * Pr[:, None]))
    return A


def width_gradient(traj: CribTrajectory, adj: CribAdjoint, cfg: CribConfig) -> float:
    """``Im sum_j [int_st - int_ret] Pbar_j* f_j P_j``, one half of ``d eta_tot / d Delta_I``."""
    f = cfg.profile.shape
    if f is None:
        raise UsageError("width updates need a profile with a shape descriptor")
    sg, rg = traj.storage_grid, traj.retrieval_grid
    zs = _integral(sg, np.conj(adj.Pbar_store) * traj.P_store)
    zr = _integral(rg, np.conj(adj.Pbar_ret) * traj.P_ret)
    if zs.ndim > 1:
        zs, zr = zs @ (cfg.space_grid().weights), zr @ (cfg.space_grid().weights)
    return float(np.imag(np.sum(f * (zs - zr))))


def width_update(traj: CribTrajectory, adj: CribAdjoint, cfg: CribConfig, lambda_inv: float) -> float:
    """New width ``Delta_I + (1/lambda) * width_gradient``, clamped at zero."""
    return max(0.0, cfg.profile.width + lambda_inv * width_gradient(traj, adj, cfg))


def weight_update(A, profile: InhomProfile, lambda_inv: float | None = None) -> InhomProfile:
    """``x_j <- x_j + A_j / lambda`` or, with ``lambda_inv=None``, ``x_j <- A_j``; then renormalize.

    Negative entries are folded to their magnitude, since only ``x_j^2``
    is a population.
    """
    A = np.asarray(A, float)
    new = A if lambda_inv is None else profile.amplitudes + lambda_inv * A
    if not np.any(new != 0):
        raise UsageError("weight update is degenerate: all A_j vanish")
    return profile.with_amplitudes(new)


# -- free space ----------------------------------------------------------------


@dataclass
class FreeCribResult:
    trajectory: CribTrajectory
    adjoint: CribAdjoint | None = None
    weight_gradient: np.ndarray | None = None
    width_gradient: float | None = None


def _free_fields(a, x, d, e0, grid, zgrid, p0):
    m = x.size
    zero = np.zeros(grid.n_nodes, complex)
    P, _, E = _free.integrate(a, x, d, zero, e0, grid, zgrid, p0, np.zeros((m, zgrid.n_nodes), complex),
                              where="free-space CRIB")
    return P, E


def free_space_crib(e_in, cfg: CribConfig, gradients: bool = True) -> FreeCribResult:
    """Fast storage and backward retrieval in free space, with optional gradients.

    Retrieval arrays are stored in the mirrored coordinate ``z' = 1 - z`` in
    which the output leaves at ``z' = 1``. The weight gradient is
    ``A_j = -sqrt(d) Im int dz [int_st + int_ret](Pbar_j* E + Ebar* P_j)`` and
    the width gradient ``Im sum_j int dz [int_st - int_ret] Pbar_j* f_j P_j``;
    as in the cavity, each is one half of the corresponding derivative of eta_tot.
    """
    if cfg.model != "free_space":
        raise UsageError("free_space_crib needs a free-space configuration")
    sg, rg, zg = cfg.storage_grid(), cfg.retrieval_grid(), cfg.space_grid()
    e = _series(e_in, sg)
    prof = cfg.profile
    x, m, d = prof.amplitudes, prof.n_classes, cfg.d
    a_st = 1.0 + 1j * prof.deltas
    a_rt = 1.0 - 1j * prof.deltas
    Ps, Es = _free_fields(a_st, x, d, e, sg, zg, np.zeros((m, zg.n_nodes), complex))
    Pr, Er = _free_fields(a_rt, x, d, np.zeros(rg.n_nodes, complex), rg, zg, -Ps[-1][:, ::-1])
    E_out = Er[:, -1]
    eta = float(np.dot(rg.weights, np.abs(E_out) ** 2))
    traj = CribTrajectory(sg, rg, e, Ps, Pr, E_out, eta, _window_flag(E_out, rg, eta), Es, Er)
    if not gradients:
        return FreeCribResult(traj)
    params = _free.FreeSpaceParams(d)
    zero_r = np.zeros(rg.n_nodes)
    radj = _free.adjoint_fields(zero_r, E_out, params, rg, zg, a=a_rt, x=x, where="CRIB retrieval adjoint")
    sadj = _free.adjoint_fields(np.zeros(sg.n_nodes), 0.0, params, sg, zg,
                                pbar_final=-radj.P_classes[0][:, ::-1], a=a_st, x=x,
                                where="CRIB storage adjoint")
    adj = CribAdjoint(sadj.P_classes, radj.P_classes, sadj.E, radj.E)
    zw = zg.weights

    def a_part(grid, Pb, E, Eb, P):
        integrand = np.conj(Pb) * E[:, None, :] + np.conj(Eb)[:, None, :] * P
        return np.imag(_integral(grid, integrand) @ zw)

    A = -math.sqrt(d) * (a_part(sg, adj.Pbar_store, Es, adj.Ebar_store, Ps)
                         + a_part(rg, adj.Pbar_ret, Er, adj.Ebar_ret, Pr))
    wg = None
    if prof.shape is not None:
        zs = _integral(sg, np.conj(adj.Pbar_store) * Ps) @ zw
        zr = _integral(rg, np.conj(adj.Pbar_ret) * Pr) @ zw
        wg = float(np.imag(np.sum(prof.shape * (zs - zr))))
    return FreeCribResult(traj, adj, A, wg)


def free_space_crib_efficiency(e_in, cfg: CribConfig) -> float:
    """``eta_tot`` of free-space CRIB without storing the time history."""
    sg, rg, zg = cfg.storage_grid(), cfg.retrieval_grid(), cfg.space_grid()
    e = _series(e_in, sg)
    prof = cfg.profile
    x, m, sqd = prof.amplitudes, prof.n_classes, math.sqrt(cfg.d)

    def go(a, e0, grid, p0):
        om = np.zeros(grid.n_nodes, complex)
        p, _, out = free_space_rk4_final(np.ascontiguousarray(a, dtype=complex), x, sqd, zg.h, om, midpoints(om),
                                         np.ascontiguousarray(e0), np.ascontiguousarray(midpoints(e0)), grid.h,
                                         np.ascontiguousarray(p0), np.zeros((m, zg.n_nodes), complex))
        ensure_finite(p, out, where="free-space CRIB")
        return p, out

    p_T, _ = go(1.0 + 1j * prof.deltas, e, sg, np.zeros((m, zg.n_nodes), complex))
    _, out = go(1.0 - 1j * prof.deltas, np.zeros(rg.n_nodes, complex), rg, -p_T[:, ::-1].copy())
    return float(np.dot(rg.weights, np.abs(out) ** 2))


# -- optimization over the profile ----------------------------------------------


@dataclass
class ProfileOptimization:
    efficiency_history: np.ndarray
    profile: InhomProfile
    widths: np.ndarray | None = None
    converged: bool = False


def _eval_with_gradients(e_in, cfg: CribConfig):
    if cfg.model == "free_space":
        res = free_space_crib(e_in, cfg)
        return res.trajectory.efficiency, res.weight_gradient, res.width_gradient
    traj = run(e_in, cfg)
    adj = crib_adjoint(traj, cfg)
    wg = width_gradient(traj, adj, cfg) if cfg.profile.shape is not None else None
    return traj.efficiency, weight_gradient(traj, adj, cfg), wg


def optimize_weights(e_in, cfg: CribConfig, max_iters: int = 50, lambda_inv: float | None = None,
                     tol: float = 1e-6, backtracking: bool = True) -> ProfileOptimization:
    """Iterate the class-weight update (full replacement when ``lambda_inv`` is None).

    With ``backtracking`` a proposal that lowers the efficiency is pulled
    halfway back toward the current weights until it does not; an accepted
    full-size update is the plain iteration.
    """
    prof = cfg.profile
    eta, A, _ = _eval_with_gradients(e_in, cfg.with_profile(prof))
    etas = [eta]
    converged = False
    for _ in range(max_iters - 1):
        target = weight_update(A, prof, lambda_inv).amplitudes
        s = 1.0
        while True:
            trial = prof.with_amplitudes((1.0 - s) * prof.amplitudes + s * target)
            eta_t, A_t, _ = _eval_with_gradients(e_in, cfg.with_profile(trial))
            if not backtracking or eta_t >= etas[-1] or s < 1e-6:
                break
            s *= 0.5
        if backtracking and eta_t < etas[-1]:
            converged = True
            break
        prof, A = trial, A_t
        etas.append(eta_t)
        if abs(etas[-1] - etas[-2]) < tol:
            converged = True
            break
    return ProfileOptimization(np.array(etas), prof, converged=converged)


def optimize_width(e_in, cfg: CribConfig, max_iters: int = 100, lambda_inv: float = 1.0,
                   tol: float = 1e-7, step_growth: float = 2.0, width_max: float | None = None) -> ProfileOptimization:
    """Gradient ascent on ``Delta_I`` starting from the width in ``cfg``.

    The step halves whenever the efficiency would drop and grows by
    ``step_growth`` after each accepted move. The landscape has several local
    maxima, so the result depends on the starting width.

    Unless ``cfg`` pins ``nodes_per_unit``, the time grid is frozen for the
    whole run at the density needed for widths up to ``width_max`` (default
    ``max(4 Delta_I, 40 / T)``); a grid that followed the width would add
    step discontinuities to the objective.
    """
    width = cfg.profile.width
    if cfg.nodes_per_unit is None:
        width_max = width_max or max(4.0 * width, 40.0 / cfg.T)
        span = float(np.max(np.abs(cfg.profile.shape)))
        cfg = replace(cfg, nodes_per_unit=max(40.0, cfg.steps_per_rate * (1.0 + cfg.coupling + span * width_max)))
    eta, _, g = _eval_with_gradients(e_in, cfg)
    etas, widths = [eta], [width]
    step = lambda_inv
    converged = False
    backtracked = False
    for _ in range(max_iters):
        if g == 0.0:
            converged = True
            break
        while step * abs(g) > 1e-12 * max(width, 1.0):
            trial = max(0.0, width + step * g)
            eta_t, _, g_t = _eval_with_gradients(e_in, cfg.with_width(trial))
            if eta_t >= etas[-1]:
                break
            step *= 0.5
            backtracked = True
        else:
            converged = True
            break
        moved = trial != width
        width, g = trial, g_t
        etas.append(eta_t)
        widths.append(width)
        if not moved or (backtracked and abs(etas[-1] - etas[-2]) < tol * max(etas[-1], 1e-300)):
            converged = True
            break
        step *= step_growth
    return ProfileOptimization(np.array(etas), cfg.profile.with_width(width), np.array(widths), converged)


def width_scan(e_in, cfg: CribConfig, widths, refine: bool = True):
    """Sample ``eta_tot`` over ``widths`` and refine the best bracket by a bounded search.

    Returns ``(best_width, best_eta, scanned_etas)``.
    """
    widths = np.asarray(widths, float)
    etas = np.array([efficiency(e_in, cfg.with_width(w)) for w in widths])
    k = int(np.argmax(etas))
    best_w, best_eta = float(widths[k]), float(etas[k])
    if refine and widths.size >= 3:
        lo, hi = widths[max(k - 1, 0)], widths[min(k + 1, widths.size - 1)]
        if hi > lo:
            opt = minimize_scalar(lambda w: -efficiency(e_in, cfg.with_width(w)), bounds=(lo, hi),
                                  method="bounded", options={"xatol": 1e-4 * max(hi, 1e-3)})
            if -opt.fun > best_eta:
                best_w, best_eta = float(opt.x), float(-opt.fun)
    return best_w, best_eta, etas


def homogeneous_fast_efficiency(e_in, cfg: CribConfig) -> float:
    """Fast storage and retrieval without broadening (one class at zero detuning)."""
    return efficiency(e_in, cfg.with_profile(InhomProfile.homogeneous()))
