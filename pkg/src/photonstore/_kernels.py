"""Compiled RK4 time loops for the cavity and free-space equations.

Both kernels integrate forward in time only. Adjoint (backward) runs are
mapped onto them by the callers: time is reversed, decay constants are
conjugated and the control changes sign.

Cavity, one entry per frequency class j (collective P = sum_j x_j P_j)::

    dP_j/dt = -a_j P_j + coup x_j P + i om S_j + src x_j e
    dS_j/dt = -gs S_j + i conj(om) P_j + gcs x_j S

Free space, classes j on z nodes, field slaved to the polarization::

    E(z) = e + i sqrt(d) * cumtrapz_z(sum_j x_j P_j)
    dP_j/dt = -a_j P_j + i sqrt(d) x_j E + i om S_j
    dS_j/dt = i conj(om) P_j
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _cavity_rhs(p, s, a, coup, x, gs, gcs, src, om, e, dp, ds):
    m = p.shape[0]
    pc = 0j
    sc = 0j
    for j in range(m):
        pc += x[j] * p[j]
        sc += x[j] * s[j]
    omc = om.conjugate()
    for j in range(m):
        dp[j] = -a[j] * p[j] + coup * x[j] * pc + 1j * om * s[j] + src * x[j] * e
        ds[j] = -gs * s[j] + 1j * omc * p[j] + gcs * x[j] * sc


@njit(cache=True)
def cavity_rk4(a, coup, x, gs, gcs, src, om, om_mid, e, e_mid, h, p0, s0):
    n = om.shape[0]
    m = a.shape[0]
    P = np.empty((n, m), dtype=np.complex128)
    S = np.empty((n, m), dtype=np.complex128)
    P[0] = p0
    S[0] = s0
    k1p = np.empty(m, dtype=np.complex128)
    k1s = np.empty(m, dtype=np.complex128)
    k2p = np.empty(m, dtype=np.complex128)
    k2s = np.empty(m, dtype=np.complex128)
    k3p = np.empty(m, dtype=np.complex128)
    k3s = np.empty(m, dtype=np.complex128)
    k4p = np.empty(m, dtype=np.complex128)
    k4s = np.empty(m, dtype=np.complex128)
    tp = np.empty(m, dtype=np.complex128)
    ts = np.empty(m, dtype=np.complex128)
    for k in range(n - 1):
        p = P[k]
        s = S[k]
        _cavity_rhs(p, s, a, coup, x, gs, gcs, src, om[k], e[k], k1p, k1s)
        for j in range(m):
            tp[j] = p[j] + 0.5 * h * k1p[j]
            ts[j] = s[j] + 0.5 * h * k1s[j]
        _cavity_rhs(tp, ts, a, coup, x, gs, gcs, src, om_mid[k], e_mid[k], k2p, k2s)
        for j in range(m):
            tp[j] = p[j] + 0.5 * h * k2p[j]
            ts[j] = s[j] + 0.5 * h * k2s[j]
        _cavity_rhs(tp, ts, a, coup, x, gs, gcs, src, om_mid[k], e_mid[k], k3p, k3s)
        for j in range(m):
            tp[j] = p[j] + h * k3p[j]
            ts[j] = s[j] + h * k3s[j]
        _cavity_rhs(tp, ts, a, coup, x, gs, gcs, src, om[k + 1], e[k + 1], k4p, k4s)
        for j in range(m):
            P[k + 1, j] = p[j] + (h / 6.0) * (k1p[j] + 2.0 * k2p[j] + 2.0 * k3p[j] + k4p[j])
            S[k + 1, j] = s[j] + (h / 6.0) * (k1s[j] + 2.0 * k2s[j] + 2.0 * k3s[j] + k4s[j])
    return P, S


@njit(cache=True)
def _field(p, x, e0, sqd, hz, out):
    m, nz = p.shape
    out[0] = e0
    prev = 0j
    for j in range(m):
        prev += x[j] * p[j, 0]
    acc = e0
    for i in range(1, nz):
        cur = 0j
        for j in range(m):
            cur += x[j] * p[j, i]
        acc += 1j * sqd * 0.5 * hz * (prev + cur)
        out[i] = acc
        prev = cur


@njit(cache=True)
def _free_rhs(p, s, a, x, sqd, hz, om, e0, field, dp, ds):
    m, nz = p.shape
    _field(p, x, e0, sqd, hz, field)
    omc = om.conjugate()
    for j in range(m):
        cj = 1j * sqd * x[j]
        for i in range(nz):
            dp[j, i] = -a[j] * p[j, i] + cj * field[i] + 1j * om * s[j, i]
            ds[j, i] = 1j * omc * p[j, i]


@njit(cache=True)
def free_space_rk4(a, x, sqd, hz, om, om_mid, e0, e0_mid, h, p0, s0):
    n = om.shape[0]
    m, nz = p0.shape
    P = np.empty((n, m, nz), dtype=np.complex128)
    S = np.empty((n, m, nz), dtype=np.complex128)
    E = np.empty((n, nz), dtype=np.complex128)
    P[0] = p0
    S[0] = s0
    k1p = np.empty((m, nz), dtype=np.complex128)
    k1s = np.empty((m, nz), dtype=np.complex128)
    k2p = np.empty((m, nz), dtype=np.complex128)
    k2s = np.empty((m, nz), dtype=np.complex128)
    k3p = np.empty((m, nz), dtype=np.complex128)
    k3s = np.empty((m, nz), dtype=np.complex128)
    k4p = np.empty((m, nz), dtype=np.complex128)
    k4s = np.empty((m, nz), dtype=np.complex128)
    tp = np.empty((m, nz), dtype=np.complex128)
    ts = np.empty((m, nz), dtype=np.complex128)
    scratch = np.empty(nz, dtype=np.complex128)
    for k in range(n - 1):
        p = P[k]
        s = S[k]
        _free_rhs(p, s, a, x, sqd, hz, om[k], e0[k], E[k], k1p, k1s)
        for j in range(m):
            for i in range(nz):
                tp[j, i] = p[j, i] + 0.5 * h * k1p[j, i]
                ts[j, i] = s[j, i] + 0.5 * h * k1s[j, i]
        _free_rhs(tp, ts, a, x, sqd, hz, om_mid[k], e0_mid[k], scratch, k2p, k2s)
        for j in range(m):
            for i in range(nz):
                tp[j, i] = p[j, i] + 0.5 * h * k2p[j, i]
                ts[j, i] = s[j, i] + 0.5 * h * k2s[j, i]
        _free_rhs(tp, ts, a, x, sqd, hz, om_mid[k], e0_mid[k], scratch, k3p, k3s)
        for j in range(m):
            for i in range(nz):
                tp[j, i] = p[j, i] + h * k3p[j, i]
                ts[j, i] = s[j, i] + h * k3s[j, i]
        _free_rhs(tp, ts, a, x, sqd, hz, om[k + 1], e0[k + 1], scratch, k4p, k4s)
        for j in range(m):
            for i in range(nz):
                P[k + 1, j, i] = p[j, i] + (h / 6.0) * (k1p[j, i] + 2.0 * k2p[j, i] + 2.0 * k3p[j, i] + k4p[j, i])
                S[k + 1, j, i] = s[j, i] + (h / 6.0) * (k1s[j, i] + 2.0 * k2s[j, i] + 2.0 * k3s[j, i] + k4s[j, i])
    _field(P[n - 1], x, e0[n - 1], sqd, hz, E[n - 1])
    return P, S, E


@njit(cache=True)
def free_space_rk4_final(a, x, sqd, hz, om, om_mid, e0, e0_mid, h, p0, s0):
    """As :func:`free_space_rk4` but keeps only the final state and ``E(1, t)``."""
    n = om.shape[0]
    m, nz = p0.shape
    p = p0.copy()
    s = s0.copy()
    out = np.empty(n, dtype=np.complex128)
    k1p = np.empty((m, nz), dtype=np.complex128)
    k1s = np.empty((m, nz), dtype=np.complex128)
    k2p = np.empty((m, nz), dtype=np.complex128)
    k2s = np.empty((m, nz), dtype=np.complex128)
    k3p = np.empty((m, nz), dtype=np.complex128)
    k3s = np.empty((m, nz), dtype=np.complex128)
    k4p = np.empty((m, nz), dtype=np.complex128)
    k4s = np.empty((m, nz), dtype=np.complex128)
    tp = np.empty((m, nz), dtype=np.complex128)
    ts = np.empty((m, nz), dtype=np.complex128)
    field = np.empty(nz, dtype=np.complex128)
    for k in range(n - 1):
        _free_rhs(p, s, a, x, sqd, hz, om[k], e0[k], field, k1p, k1s)
        out[k] = field[nz - 1]
        for j in range(m):
            for i in range(nz):
                tp[j, i] = p[j, i] + 0.5 * h * k1p[j, i]
                ts[j, i] = s[j, i] + 0.5 * h * k1s[j, i]
        _free_rhs(tp, ts, a, x, sqd, hz, om_mid[k], e0_mid[k], field, k2p, k2s)
        for j in range(m):
            for i in range(nz):
                tp[j, i] = p[j, i] + 0.5 * h * k2p[j, i]
                ts[j, i] = s[j, i] + 0.5 * h * k2s[j, i]
        _free_rhs(tp, ts, a, x, sqd, hz, om_mid[k], e0_mid[k], field, k3p, k3s)
        for j in range(m):
            for i in range(nz):
                tp[j, i] = p[j, i] + h * k3p[j, i]
                ts[j, i] = s[j, i] + h * k3s[j, i]
        _free_rhs(tp, ts, a, x, sqd, hz, om[k + 1], e0[k + 1], field, k4p, k4s)
        for j in range(m):
            for i in range(nz):
                p[j, i] += (h / 6.0) * (k1p[j, i] + 2.0 * k2p[j, i] + 2.0 * k3p[j, i] + k4p[j, i])
                s[j, i] += (h / 6.0) * (k1s[j, i] + 2.0 * k2s[j, i] + 2.0 * k3s[j, i] + k4s[j, i])
    _field(p, x, e0[n - 1], sqd, hz, field)
    out[n - 1] = field[nz - 1]
    return p, s, out
