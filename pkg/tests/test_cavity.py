import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from photonstore.cavity import (
    CavityParams,
    InhomProfile,
    adiabatic_storage_control,
    adjoint_backward,
    complex_control_gradient,
    composite_offresonant_control,
    control_gradient,
    generalized_adjoint,
    generalized_forward,
    storage_efficiency,
    storage_forward,
)
from photonstore.core_numerics import NumericalError, TimeGrid, UsageError, node_sensitivity
from photonstore.modes import gaussian_like


@pytest.fixture
def setup():
    g = TimeGrid.over(10.0, 1001)
    return g, gaussian_like(g), CavityParams(1.0)


def fd_check(f, omega, grad_nodes, idx, step=1e-5, imag=False):
    fd = []
    for k in idx:
        d = np.zeros_like(omega)
        d[k] = 1j * step if imag else step
        fd.append((f(omega + d) - f(omega - d)) / (2 * step))
    fd = np.array(fd)
    return np.linalg.norm(fd - grad_nodes[idx]) / np.linalg.norm(fd)


def test_params_and_profile_validation():
    with pytest.raises(UsageError):
        CavityParams(-1.0)
    with pytest.raises(UsageError):
        CavityParams(1.0, gamma_s=-0.1)
    with pytest.raises(UsageError):
        InhomProfile([0.0, 1.0], [1.0, 1.0])
    with pytest.raises(UsageError):
        InhomProfile([0.0], [-1.0])
    with pytest.raises(UsageError):
        InhomProfile([0.0, 1.0], [1.0])
    p = InhomProfile.gaussian(2.0)
    assert abs(np.sum(p.amplitudes**2) - 1) < 1e-12
    assert p.with_width(4.0).deltas == pytest.approx(2 * p.deltas)
    assert InhomProfile.two_class(3.0).deltas.tolist() == [-3.0, 3.0]
    assert abs(np.sum(p.with_amplitudes(np.arange(32.0)).amplitudes ** 2) - 1) < 1e-12
    with pytest.raises(UsageError):
        InhomProfile([0.0], [1.0]).with_width(1.0)


def test_trivial_solutions(setup):
    g, e, p = setup
    om = np.full(g.n_nodes, 0.7)
    tr = storage_forward(om, np.zeros(g.n_nodes), p, g)
    assert np.all(tr.P == 0) and np.all(tr.S == 0) and tr.efficiency == 0
    tr = storage_forward(np.zeros(g.n_nodes), e, p, g)
    assert np.all(tr.S == 0) and np.max(np.abs(tr.P)) > 0.1
    adj = adjoint_backward(om, 0.0, p, g)
    assert np.all(adj.P == 0) and np.all(adj.S == 0)
    assert np.all(control_gradient(tr, adjoint_backward(om, 0.0, p, g)) == 0)


def test_forward_matches_reference_ode():
    g = TimeGrid.over(4.0, 801)
    C = 3.0
    om = lambda t: 1.0 + 0.5 * np.sin(1.3 * t)
    ein = lambda t: np.exp(-((t - 2.0) ** 2)) * (1 + 0.2j * t)
    tr = generalized_forward(om(g.nodes), ein(g.nodes), CavityParams(C), InhomProfile.homogeneous(), g)

    def rhs(t, y):
        P, S = y[0] + 1j * y[1], y[2] + 1j * y[3]
        dP = -(1 + C) * P + 1j * om(t) * S + 1j * math.sqrt(2 * C) * ein(t)
        dS = 1j * om(t) * P
        return [dP.real, dP.imag, dS.real, dS.imag]

    ref = solve_ivp(rhs, (0, 4), [0, 0, 0, 0], t_eval=g.nodes, rtol=1e-11, atol=1e-13, method="DOP853")
    assert np.max(np.abs(tr.S - (ref.y[2] + 1j * ref.y[3]))) < 1e-7
    assert np.max(np.abs(tr.P - (ref.y[0] + 1j * ref.y[1]))) < 1e-7


def test_fine_step_oracle(setup):
    g, e, p = setup
    om = np.full(g.n_nodes, math.sqrt(1 / 10))
    coarse = storage_forward(om, e, p, g).efficiency
    fine_g = TimeGrid.over(10.0, 10001)
    fine = storage_forward(np.full(fine_g.n_nodes, math.sqrt(1 / 10)), gaussian_like(fine_g), p, fine_g).efficiency
    assert abs(coarse - fine) < 1e-6


@settings(max_examples=15, deadline=None)
@given(st.floats(0.0, 20.0), st.floats(0.0, 5.0), st.integers(0, 2**31 - 1))
def test_efficiency_bounded_and_energy_balanced(C, amp, seed):
    g = TimeGrid.over(5.0, 801)
    rng = np.random.default_rng(seed)
    om = amp * (1 + 0.5 * np.sin(rng.uniform(0.5, 3) * g.nodes))
    e = gaussian_like(g)
    tr = storage_forward(om, e, CavityParams(C), g)
    assert 0 <= tr.efficiency <= 1 + 1e-6
    # d/dt (|P|^2 + |S|^2) = -2 (1 + C) |P|^2 + 2 Re(conj(P) i sqrt(2C) E_in)
    w = g.weights
    lost = np.dot(w, 2 * (1 + C) * np.abs(tr.P) ** 2 - 2 * np.real(np.conj(tr.P) * 1j * math.sqrt(2 * C) * e))
    assert abs(abs(tr.P[-1]) ** 2 + tr.efficiency + lost) < 1e-4


def test_adjoint_is_time_reversed_retrieval(setup):
    g, e, p = setup
    om = 0.4 + 0.3 * np.cos(0.7 * g.nodes)
    tr = storage_forward(om, e, p, g)
    adj = adjoint_backward(om, tr.S[-1], p, g)
    ret = storage_forward(om[::-1], np.zeros(g.n_nodes), p, g, s0=tr.S[-1])
    assert np.max(np.abs(adj.S[::-1] - ret.S)) < 1e-8
    assert np.max(np.abs(adj.P[::-1] + ret.P)) < 1e-8
    assert adj.P[-1] == 0 and adj.S[-1] == tr.S[-1]


def test_gradient_matches_finite_differences(setup):
    g, e, p = setup
    om = np.full(g.n_nodes, math.sqrt(1 / 10)) * (1 + 0.3 * np.sin(g.nodes))
    tr = storage_forward(om, e, p, g)
    grad = node_sensitivity(control_gradient(tr, adjoint_backward(om, tr.S[-1], p, g)), g.h)
    idx = np.random.default_rng(3).choice(g.n_nodes, 20, replace=False)
    assert fd_check(lambda o: storage_forward(o, e, p, g).efficiency, om, grad, idx, 1e-4) < 1e-3


def test_generalized_gradient_three_classes():
    g = TimeGrid.over(5.0, 801)
    e = gaussian_like(g) * np.exp(0.3j * g.nodes)
    prof = InhomProfile.from_shape([-1, 0.2, 1], [0.3, 0.5, 0.2], 1.5)
    p = CavityParams(2.0, delta=0.4, gamma_s=0.05, gamma_c=0.1)
    om = (0.8 + 0.3 * np.sin(g.nodes)) + 0.2j * np.cos(0.7 * g.nodes)
    tr = generalized_forward(om, e, p, prof, g)
    G = complex_control_gradient(tr, generalized_adjoint(om, tr.S[-1], p, prof, g))
    idx = np.random.default_rng(1).choice(np.arange(g.n_nodes), 10, replace=False)
    f = lambda o: generalized_forward(o, e, p, prof, g).efficiency
    assert fd_check(f, om, node_sensitivity(2 * G.real, g.h), idx) < 1e-3
    assert fd_check(f, om, node_sensitivity(2 * G.imag, g.h), idx, imag=True) < 1e-3


def test_generalized_gradient_without_collisions_in_p():
    g = TimeGrid.over(3.0, 601)
    e = gaussian_like(g)
    prof = InhomProfile.two_class(1.0, weights=(0.3, 0.7))
    p = CavityParams(2.0, gamma_c=0.3, collisions_in_p=False)
    om = np.full(g.n_nodes, 1.0 + 0.1j)
    tr = generalized_forward(om, e, p, prof, g)
    G = complex_control_gradient(tr, generalized_adjoint(om, tr.S[-1], p, prof, g))
    idx = np.arange(50, 600, 55)
    f = lambda o: generalized_forward(o, e, p, prof, g).efficiency
    assert fd_check(f, om, node_sensitivity(2 * G.real, g.h), idx) < 1e-3


def test_reduction_to_simple_model(setup):
    g, e, p = setup
    om = np.full(g.n_nodes, 0.3)
    a = storage_forward(om, e, p, g)
    b = generalized_forward(om, e, p, InhomProfile.homogeneous(), g)
    assert np.max(np.abs(a.P - b.P)) < 1e-13 and np.max(np.abs(a.S - b.S)) < 1e-13
    aa = adjoint_backward(om, a.S[-1], p, g)
    bb = generalized_adjoint(om, a.S[-1], p, InhomProfile.homogeneous(), g)
    assert np.max(np.abs(aa.P - bb.P)) < 1e-13
    assert storage_efficiency(om, e, p, g) == a.efficiency


def test_simple_model_rejects_generalized_input(setup):
    g, e, _ = setup
    with pytest.raises(UsageError):
        storage_forward(np.full(g.n_nodes, 0.3), e, CavityParams(1.0, delta=1.0), g)
    with pytest.raises(UsageError):
        storage_forward(np.full(g.n_nodes, 0.3 + 0.1j), e, CavityParams(1.0), g)


def test_two_class_dephasing_matches_matrix_exponential():
    g = TimeGrid.over(3.0, 601)
    C, w = 2.0, 4.0
    prof = InhomProfile.two_class(w)
    p0 = np.array([1.0, 1.0]) / math.sqrt(2)
    tr = generalized_forward(np.zeros(g.n_nodes), np.zeros(g.n_nodes), CavityParams(C), prof, g, p0=p0)
    x = prof.amplitudes
    A = -np.diag(1 + 1j * prof.deltas) - C * np.outer(x, x)
    ref = np.array([x @ (expm(A * t) @ p0) for t in g.nodes])
    assert np.max(np.abs(tr.P - ref)) < 1e-8
    # |P| beats with period pi / width once the collective decay is removed
    free = generalized_forward(np.zeros(g.n_nodes), np.zeros(g.n_nodes), CavityParams(0.0), prof, g, p0=p0)
    envelope = np.abs(free.P) * np.exp(g.nodes)
    assert np.max(np.abs(envelope - np.abs(np.cos(w * g.nodes)))) < 1e-6


def test_overflow_is_reported(setup):
    g, e, p = setup
    with pytest.raises(NumericalError):
        storage_forward(np.full(g.n_nodes, 1e4), e, p, g)


def test_composite_control_construction():
    g = TimeGrid.over(10.0, 4001)
    om0 = np.full(g.n_nodes, 0.5)
    assert np.allclose(composite_offresonant_control(om0, 0.0, 5.0, g), om0)
    om = composite_offresonant_control(om0, 1.0, 20.0, g)
    assert abs(om[0] - (math.sqrt(20.0) + 0.5)) < 1e-12
    with pytest.raises(UsageError):
        composite_offresonant_control(om0, 1.0, 5.0, g)
    with pytest.raises(UsageError):
        composite_offresonant_control(om0, -1.0, 50.0, g)
    with pytest.raises(UsageError):
        composite_offresonant_control(om0, 10.0, 500.0, g)  # 2 pi / 500 needs h < 6.3e-4


def test_adiabatic_control_reaches_bound_when_slow():
    C = 10.0
    g = TimeGrid.over(50.0, 4001)
    e = gaussian_like(g)
    om = adiabatic_storage_control(e, C, g)
    assert abs(storage_forward(om, e, CavityParams(C), g).efficiency - C / (1 + C)) < 1e-3
    with pytest.raises(UsageError):
        adiabatic_storage_control(e * 1j, C, g)
