"""Gradient ascent over control fields and finite-step input-mode iteration.

A problem supplies ``forward(control) -> state``, ``efficiency(state)``,
``adjoint(control, state) -> costate`` and ``gradient(state, costate)``.
The gradient is the representer ``g`` with ``d eta = Re int conj(g) dOmega dt``
(for a real control simply the functional derivative). Each iteration moves
``Omega <- Omega + (1/lambda) g / 2``, which for the cavity reads
``Omega - (1/lambda) Im[Sbar* P - Pbar S*]``.
"""

from __future__ import annotations

import copy
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from . import cavity, free_space
from .core_numerics import NumericalError, SpaceGrid, TimeGrid, UsageError, l2_norm_sq

log = logging.getLogger(__name__)

BOUND_SLACK = 1e-6


@dataclass
class AscentConfig:
    """Step ``lambda_inv = 1/lambda``; stop when ``|d eta| < tol * eta`` for ``patience`` iterations.

    With ``backtracking`` the step is halved until the efficiency does not
    drop. ``step_growth > 1`` lets the step grow again after each accepted
    iteration (capped at ``max_step_ratio * lambda_inv``), which rescues
    initial guesses far from the optimum where the gradient is tiny.
    """

    lambda_inv: float = 2.0
    max_iters: int = 200
    tol: float = 1e-5
    patience: int = 5
    backtracking: bool = True
    multi_start: list = field(default_factory=list)
    min_step_ratio: float = 1e-6
    step_growth: float = 1.0
    max_step_ratio: float = 1e4
    oscillation_window: int = 10

    def __post_init__(self):
        if not self.lambda_inv > 0:
            raise UsageError("lambda_inv must be positive")
        if self.max_iters < 1 or self.patience < 1:
            raise UsageError("max_iters and patience must be at least 1")
        if not self.tol > 0:
            raise UsageError("tol must be positive")
        if self.step_growth < 1.0:
            raise UsageError("step_growth must be at least 1")


def default_lambda_inv(T: float) -> float:
    """Step ``1/lambda = 20/T``; gives the customary lambda = 0.5 at T = 10."""
    return 20.0 / T


@dataclass
class OptimizationResult:
    efficiency_history: np.ndarray
    gradient_norm_history: np.ndarray
    control: np.ndarray
    converged: bool
    iterations_used: int
    mode: np.ndarray | None = None
    diagnostic: str = ""
    oscillating: bool = False
    flags: list = field(default_factory=list)
    energy_history: np.ndarray | None = None
    state: Any = None

    @property
    def efficiency(self) -> float:
        return float(self.efficiency_history[-1])

    def iterations_to_reach(self, target: float) -> int | None:
        hits = np.nonzero(self.efficiency_history >= target)[0]
        return int(hits[0]) if hits.size else None


@dataclass
class ControlProblem:
    grid: TimeGrid
    forward: Callable
    efficiency: Callable
    adjoint: Callable
    gradient: Callable
    complex_control: bool = False
    label: str = ""

    def evaluate(self, control):
        state = self.forward(control)
        return state, float(self.efficiency(state))

    def ascent_direction(self, control, state) -> np.ndarray:
        g = self.gradient(state, self.adjoint(control, state))
        return g if self.complex_control else np.real(g)


def _check_bounds(eta: float, where: str):
    if not (-BOUND_SLACK <= eta <= 1.0 + BOUND_SLACK):
        raise NumericalError(f"{where}: efficiency {eta} outside [0, 1]; the grid is too coarse")


def _oscillating(history: Sequence[float], window: int) -> bool:
    h = np.asarray(history[-(window + 1):])
    if h.size < 4:
        return False
    drops = np.sum(np.diff(h) < -1e-9)
    # an overshoot that never recovers: stuck far below the best value seen
    collapsed = len(history) > window and np.max(h) < 0.5 * np.max(history)
    return drops >= max(2, window // 4) or collapsed


def _energy(control, grid: TimeGrid) -> float:
    return l2_norm_sq(control, grid)


def _run_ascent(problem: ControlProblem, init, cfg: AscentConfig, project=None) -> OptimizationResult:
    grid = problem.grid
    omega = np.asarray(init, dtype=complex if problem.complex_control else float)
    if omega.ndim == 0:
        omega = np.full(grid.n_nodes, omega)
    omega = omega.copy()
    if project is not None:
        omega = project(omega, None)
    state, eta = problem.evaluate(omega)
    _check_bounds(eta, problem.label or "ascent")
    etas, gnorms, energies = [eta], [], [_energy(omega, grid)]
    step = cfg.lambda_inv
    quiet = 0
    backtracked = False
    converged = False
    oscillating = False
    diagnostic = ""
    g = problem.ascent_direction(omega, state)
    gnorms.append(float(np.max(np.abs(g))))
    it = 0
    while it < cfg.max_iters:
        if gnorms[-1] == 0.0:
            converged = True
            diagnostic = "gradient vanishes identically"
            break
        it += 1
        while True:
            trial = omega + 0.5 * step * g
            if project is not None:
                trial = project(trial, g)
            try:
                trial_state, trial_eta = problem.evaluate(trial)
            except NumericalError as exc:
                if not cfg.backtracking:
                    diagnostic = (f"iteration {it}: {exc}. The step 1/lambda = {step:g} is too large; "
                                  "use a smaller 1/lambda or enable backtracking")
                    oscillating = True
                    trial_state = None
                    break
                step *= 0.5
                backtracked = True
                if step < cfg.min_step_ratio * cfg.lambda_inv:
                    trial_state = None
                    break
                continue
            if cfg.backtracking and trial_eta < etas[-1]:
                step *= 0.5
                backtracked = True
                if step < cfg.min_step_ratio * cfg.lambda_inv:
                    trial_state = None
                    break
                continue
            break
        if trial_state is None:
            if not diagnostic:
                converged = True
                diagnostic = "no uphill step above the minimum step size; at a local maximum to grid accuracy"
            break
        _check_bounds(trial_eta, problem.label or "ascent")
        d_eta = trial_eta - etas[-1]
        omega, state = trial, trial_state
        if cfg.backtracking and cfg.step_growth > 1.0:
            step = min(step * cfg.step_growth, cfg.max_step_ratio * cfg.lambda_inv)
        etas.append(trial_eta)
        energies.append(_energy(omega, grid))
        g = problem.ascent_direction(omega, state)
        gnorms.append(float(np.max(np.abs(g))))
        if not cfg.backtracking and _oscillating(etas, cfg.oscillation_window):
            oscillating = True
            diagnostic = (f"efficiency fell in several of the last {cfg.oscillation_window} iterations "
                          f"instead of rising; 1/lambda = {cfg.lambda_inv:g} is too large, reduce it")
            break
        # while the step is still growing toward its natural scale a small change says nothing
        growing = cfg.step_growth > 1.0 and not backtracked and step < cfg.max_step_ratio * cfg.lambda_inv
        quiet = quiet + 1 if abs(d_eta) < cfg.tol * max(trial_eta, 1e-300) and not growing else 0
        if quiet >= cfg.patience:
            converged = True
            break
    if oscillating:
        log.warning("%s", diagnostic)
    return OptimizationResult(
        efficiency_history=np.array(etas),
        gradient_norm_history=np.array(gnorms),
        control=omega,
        converged=converged and not oscillating,
        iterations_used=len(etas) - 1,
        diagnostic=diagnostic,
        oscillating=oscillating,
        energy_history=np.array(energies),
        state=state,
    )


def ascend_control(problem: ControlProblem, init, cfg: AscentConfig) -> OptimizationResult:
    """Plain gradient ascent, halving the step when the efficiency would drop."""
    return _run_ascent(problem, init, cfg)


def ascend_control_energy_constrained(problem: ControlProblem, init, cfg: AscentConfig, E_bound: float,
                                      mode: str = "project") -> OptimizationResult:
    """Gradient ascent with ``int |Omega|^2 dt <= E_bound``.

    ``mode='project'`` takes the usual step and rescales onto the bound when it
    is exceeded. ``mode='replace'`` substitutes the gradient itself, rescaled to
    the bound, for the control (the lambda -> 0 limit of the multiplier form).
    """
    if not E_bound > 0:
        raise UsageError("E_bound must be positive")
    if mode not in ("project", "replace"):
        raise UsageError(f"unknown constraint mode {mode!r}")
    grid = problem.grid

    def project(omega, g):
        if mode == "replace" and g is not None:
            eg = _energy(g, grid)
            if eg > 0:
                return g * math.sqrt(E_bound / eg)
        e = _energy(omega, grid)
        if e > E_bound:
            omega = omega * math.sqrt(E_bound / e)
        return omega

    res = _run_ascent(problem, init, cfg, project=project)
    if res.efficiency < 1e-6:
        res.flags.append("energy bound too small: efficiency stays below 1e-6")
    return res


def multi_start(problem: ControlProblem, inits, cfg: AscentConfig, jobs: int = 1):
    """Run from every initial control; return ``(best, all_results)``.

    The problem must be picklable for ``jobs > 1``.
    """
    inits = list(inits) or list(cfg.multi_start)
    if not inits:
        raise UsageError("no initial controls given")
    if jobs > 1 and len(inits) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(ascend_control, [problem] * len(inits), inits, [cfg] * len(inits)))
    else:
        results = [ascend_control(problem, init, cfg) for init in inits]
    best = max(results, key=lambda r: r.efficiency)
    return best, results


def best_constant_control(problem: ControlProblem, upper: float, n_scan: int = 24):
    """Best time-independent real control on ``[0, upper]``: ``(amplitude, efficiency)``.

    A log-spaced scan brackets the maximum before a bounded scalar search.
    """
    amps = np.geomspace(upper * 1e-3, upper, n_scan)
    vals = []
    for a in amps:
        try:
            vals.append(problem.evaluate(np.full(problem.grid.n_nodes, a))[1])
        except NumericalError:
            vals.append(-np.inf)
    k = int(np.argmax(vals))
    lo, hi = amps[max(k - 1, 0)], amps[min(k + 1, n_scan - 1)]

    def neg(a):
        try:
            return -problem.evaluate(np.full(problem.grid.n_nodes, a))[1]
        except NumericalError:
            return np.inf

    opt = minimize_scalar(neg, bounds=(lo, hi), method="bounded", options={"xatol": 1e-6 * upper})
    if -opt.fun >= vals[k]:
        return float(opt.x), float(-opt.fun)
    return float(amps[k]), float(vals[k])


# -- input-mode updates --------------------------------------------------------


def _normalized_mode(values, grid: TimeGrid, what: str) -> np.ndarray:
    norm = l2_norm_sq(values, grid)
    if not norm > 0:
        raise UsageError(f"{what} vanishes; the input-mode update is degenerate (zero mode)")
    return np.asarray(values, complex) / math.sqrt(norm)


def input_mode_step_cavity(adj: cavity.CavityAdjoint) -> np.ndarray:
    """New input ``-i Pbar(t)`` renormalized to unit norm."""
    return _normalized_mode(-1j * adj.P, adj.grid, "Pbar")


def input_mode_step_free(adj: free_space.FreeSpaceAdjoint) -> np.ndarray:
    """New input ``Ebar(0, t)`` (the backward-retrieved output) renormalized."""
    return _normalized_mode(adj.E[:, 0], adj.tgrid, "Ebar(0, t)")


@dataclass
class ModeIterationResult:
    efficiency_history: np.ndarray
    modes: list
    step_distance: np.ndarray

    @property
    def mode(self) -> np.ndarray:
        return self.modes[-1]


def iterate_input_mode(builder, control, init_mode, step, n_iters: int = 3) -> ModeIterationResult:
    """Alternate forward, adjoint and ``step`` on the input mode.

    ``builder`` is one of the problem builders below (anything with an
    ``e_in`` attribute and a ``problem()`` method); ``step`` maps the costate
    to the next mode. ``efficiency_history[k]`` belongs to ``modes[k]``.
    """
    mode = np.asarray(init_mode, complex)
    modes, etas, dist = [mode], [], []
    for _ in range(n_iters):
        prob = builder.with_input(mode).problem()
        state, eta = prob.evaluate(control)
        etas.append(eta)
        new = step(prob.adjoint(control, state))
        dist.append(math.sqrt(l2_norm_sq(new - mode, prob.grid)))
        mode = new
        modes.append(mode)
    etas.append(builder.with_input(mode).problem().evaluate(control)[1])
    return ModeIterationResult(np.array(etas), modes, np.array(dist))


# -- problem builders ----------------------------------------------------------


def _trajectory_efficiency(traj):
    return traj.efficiency


def _complex_gradient(traj, adj):
    return 2.0 * cavity.complex_control_gradient(traj, adj)


def _retrieval_efficiency(result):
    return result.efficiency


def _retrieval_gradient(result, adj):
    return free_space.control_gradient(result.storage, adj)


class _Builder:
    e_in: np.ndarray

    def with_input(self, e_in):
        other = copy.copy(self)
        other.e_in = np.asarray(e_in, complex)
        return other


class CavityStorage(_Builder):
    """Storage efficiency ``|S(T)|^2`` of the cavity model as a control problem."""

    def __init__(self, params: cavity.CavityParams, e_in, grid: TimeGrid,
                 profile: cavity.InhomProfile | None = None):
        self.params, self.e_in, self.grid = params, np.asarray(e_in, complex), grid
        self.profile = profile
        self.simple = profile is None and params.is_simple

    def forward(self, omega):
        if self.simple:
            return cavity.storage_forward(omega, self.e_in, self.params, self.grid)
        prof = self.profile or cavity.InhomProfile.homogeneous()
        return cavity.generalized_forward(omega, self.e_in, self.params, prof, self.grid)

    def adjoint(self, omega, traj):
        if self.simple:
            return cavity.adjoint_backward(omega, traj.S[-1], self.params, self.grid)
        prof = self.profile or cavity.InhomProfile.homogeneous()
        return cavity.generalized_adjoint(omega, traj.S[-1], self.params, prof, self.grid)

    def problem(self) -> ControlProblem:
        grad = cavity.control_gradient if self.simple else _complex_gradient
        return ControlProblem(self.grid, self.forward, _trajectory_efficiency, self.adjoint, grad,
                              complex_control=not self.simple, label=f"cavity C={self.params.C:g}")


def cavity_storage_problem(params, e_in, grid, profile=None) -> ControlProblem:
    return CavityStorage(params, e_in, grid, profile).problem()


class FreeSpaceStorage(_Builder):
    """Free-space control problem.

    ``objective='storage'`` maximizes ``int |S(z, T)|^2 dz``;
    ``objective='complete_backward'`` maximizes storage followed by complete
    backward retrieval.
    """

    def __init__(self, params: free_space.FreeSpaceParams, e_in, tgrid: TimeGrid, zgrid: SpaceGrid,
                 objective: str = "storage"):
        if objective not in ("storage", "complete_backward"):
            raise UsageError(f"unknown objective {objective!r}")
        self.params, self.e_in, self.grid, self.zgrid = params, np.asarray(e_in, complex), tgrid, zgrid
        self.objective = objective

    def forward(self, omega):
        return free_space.storage_forward(omega, self.e_in, self.params, self.grid, self.zgrid)

    def efficiency(self, fields):
        if self.objective == "storage":
            return free_space.storage_efficiency(fields)
        return free_space.complete_backward_efficiency(fields.S[-1], self.params, self.zgrid)

    def adjoint(self, omega, fields):
        s = fields.S[-1]
        if self.objective == "complete_backward":
            s = free_space.complete_backward_costate(s, self.params, self.zgrid)
        return free_space.adjoint_backward(omega, s, self.params, self.grid, self.zgrid)

    def problem(self) -> ControlProblem:
        return ControlProblem(self.grid, self.forward, self.efficiency, self.adjoint,
                              free_space.control_gradient, label=f"free space d={self.params.d:g}")


def free_space_problem(params, e_in, tgrid, zgrid, objective="storage") -> ControlProblem:
    return FreeSpaceStorage(params, e_in, tgrid, zgrid, objective).problem()


class FreeSpaceStorageRetrieval(_Builder):
    """Storage followed by time-domain retrieval in a fixed window."""

    def __init__(self, params, e_in, tgrid, zgrid, window: free_space.RetrievalWindow):
        self.params, self.e_in, self.grid, self.zgrid = params, np.asarray(e_in, complex), tgrid, zgrid
        self.window = window

    def forward(self, omega):
        return free_space.storage_then_forward_retrieval(omega, self.window, self.e_in, self.params,
                                                         self.grid, self.zgrid)

    def adjoint(self, omega, result):
        return free_space.storage_retrieval_adjoint(result, omega, self.window, self.params)[0]

    def problem(self) -> ControlProblem:
        return ControlProblem(self.grid, self.forward, _retrieval_efficiency, self.adjoint, _retrieval_gradient,
                              label=f"free space retrieval d={self.params.d:g}")


def free_space_retrieval_problem(params, e_in, tgrid, zgrid, window) -> ControlProblem:
    return FreeSpaceStorageRetrieval(params, e_in, tgrid, zgrid, window).problem()
