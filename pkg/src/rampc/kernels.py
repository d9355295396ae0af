"""Jit-compiled numeric paths: model dynamics, certificate evaluation,
zero-order-hold rollouts, and the shooting objective with its gradient.

Everything here mirrors closed-form code elsewhere in the package
(system.py, backstepping.py) in array form, because the batch studies run
hundreds of closed loops and the pure-Python paths are orders of magnitude
too slow on one core.  The agreement between the two implementations is
pinned by tests; model dispatch is by integer kind + packed parameter
vector so the kernels stay nopython-clean.

Certificate data enters as flat arrays: a shared exponent table for the
feedback basis plus per-channel coefficient vectors, and exponent/coef
tables for psi, phi, and their output-space partials (a CertPack built by
pack_cert)."""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from numba import njit

from .backstepping import Certificate
from .polynomial import Polynomial
from .safety import SafetySpec
from .system import KIND_ARM, KIND_DUBINS, SystemModel


# -- polynomial tables -----------------------------------------------------------

def poly_table(p: Polynomial, variables=("y1", "y2")):
    """(exps, coefs) arrays for a polynomial over the given variables."""
    if tuple(p.variables) != tuple(variables):
        p = Polynomial.zero(variables) + p
    items = sorted(p.terms.items())
    exps = np.array([e for e, _ in items], dtype=np.int64).reshape(len(items), len(variables))
    coefs = np.array([c for _, c in items], dtype=np.float64)
    if len(items) == 0:
        exps = np.zeros((1, len(variables)), dtype=np.int64)
        coefs = np.zeros(1)
    return exps, coefs


@njit(cache=True)
def poly_val(exps, coefs, y1, y2):
    s = 0.0
    for t in range(coefs.shape[0]):
        v = coefs[t]
        for _ in range(exps[t, 0]):
            v *= y1
        for _ in range(exps[t, 1]):
            v *= y2
        s += v
    return s


class CertPack(NamedTuple):
    """Flat-array view of (certificate, spec) for the kernels."""

    kind: int
    params: np.ndarray
    lam: float
    mu: np.ndarray            # (2,)
    k1_exps: np.ndarray       # shared basis exponent table
    k1_coefs: np.ndarray      # (2, nb)
    dk1_exps: np.ndarray      # exponent table of the k1 partials
    dk1_coefs: np.ndarray     # (2, 2, ndk) [channel, partial-direction]
    psi_exps: np.ndarray
    psi_coefs: np.ndarray
    dpsi_exps: np.ndarray
    dpsi_coefs: np.ndarray    # (2, ndp)
    phi_exps: np.ndarray
    phi_coefs: np.ndarray


def _stack_tables(polys):
    """Common exponent table for several polynomials (union of supports)."""
    keys = sorted({e for p in polys for e in p.terms})
    exps = np.array(keys, dtype=np.int64).reshape(len(keys), 2)
    coefs = np.zeros((len(polys), len(keys)))
    for r, p in enumerate(polys):
        for c, k in enumerate(keys):
            coefs[r, c] = p.terms.get(k, 0.0)
    return exps, coefs


def pack_cert(cert: Certificate, model: SystemModel, spec: SafetySpec) -> CertPack:
    if model.gamma != (2, 2):
        raise ValueError("kernels support vector relative degree (2, 2) models")
    k1 = [cert.k1_poly(i) for i in range(2)]
    k1_exps, k1_coefs = _stack_tables(k1)
    dk1 = [[p.partial("y1"), p.partial("y2")] for p in k1]
    dk1_exps, flat = _stack_tables([q for row in dk1 for q in row])
    psi_exps, psi_coefs = poly_table(spec.psi)
    dpsi_exps, dpsi_coefs = _stack_tables([spec.psi.partial("y1"), spec.psi.partial("y2")])
    phi_exps, phi_coefs = poly_table(spec.phi)
    return CertPack(
        kind=model.kind, params=model.params.astype(np.float64),
        lam=cert.params.lam,
        mu=np.array([cert.params.mu[0][0], cert.params.mu[1][0]]),
        k1_exps=k1_exps, k1_coefs=k1_coefs,
        dk1_exps=dk1_exps, dk1_coefs=flat.reshape(2, 2, -1),
        psi_exps=psi_exps, psi_coefs=psi_coefs,
        dpsi_exps=dpsi_exps, dpsi_coefs=dpsi_coefs,
        phi_exps=phi_exps, phi_coefs=phi_coefs,
    )


# -- model primitives ------------------------------------------------------------

@njit(cache=True)
def _arm_MCG(pars, x, M, C, Gv):
    m1, m2, l1, l2, lc1, lc2, I1, I2, grav = (pars[0], pars[1], pars[2], pars[3],
                                              pars[4], pars[5], pars[6], pars[7],
                                              pars[8])
    q1, q2, qd1, qd2 = x[0], x[1], x[2], x[3]
    c2 = math.cos(q2)
    M[0, 0] = I1 + I2 + m2 * (l1 * l1 + lc2 * lc2 + 2.0 * l1 * lc2 * c2) + m1 * lc1 * lc1
    M[0, 1] = I2 + m2 * (lc2 * lc2 + l1 * lc2 * c2)
    M[1, 0] = M[0, 1]
    M[1, 1] = m2 * lc2 * lc2 + I2
    k = m2 * l1 * lc2 * math.sin(q2)
    C[0] = -k * (2.0 * qd1 * qd2 + qd2 * qd2)
    C[1] = k * qd1 * qd1
    Gv[0] = ((m1 * grav * lc1 + m2 * grav * l1) * math.cos(q1)
             + m2 * grav * lc2 * math.cos(q1 + q2))
    Gv[1] = m2 * grav * lc2 * math.cos(q1 + q2)


@njit(cache=True)
def _solve2(M, b, out):
    det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
    out[0] = (M[1, 1] * b[0] - M[0, 1] * b[1]) / det
    out[1] = (M[0, 0] * b[1] - M[1, 0] * b[0]) / det


@njit(cache=True)
def xdot_k(kind, pars, x, u, out):
    if kind == 0:  # dubins: state (y1, y2, theta, v), inputs (omega, a)
        out[0] = x[3] * math.cos(x[2])
        out[1] = x[3] * math.sin(x[2])
        out[2] = u[0]
        out[3] = u[1]
    else:  # arm: state (q1, q2, qd1, qd2), inputs joint torques
        M = np.empty((2, 2))
        C = np.empty(2)
        Gv = np.empty(2)
        _arm_MCG(pars, x, M, C, Gv)
        rhs = np.empty(2)
        rhs[0] = -C[0] - Gv[0] + u[0]
        rhs[1] = -C[1] - Gv[1] + u[1]
        acc = np.empty(2)
        _solve2(M, rhs, acc)
        out[0] = x[2]
        out[1] = x[3]
        out[2] = acc[0]
        out[3] = acc[1]


@njit(cache=True)
def _arm_jacobian(pars, x):
    l1, l2 = pars[2], pars[3]
    s1, c1 = math.sin(x[0]), math.cos(x[0])
    s12, c12 = math.sin(x[0] + x[1]), math.cos(x[0] + x[1])
    J = np.empty((2, 2))
    J[0, 0] = -l1 * s1 - l2 * s12
    J[0, 1] = -l2 * s12
    J[1, 0] = l1 * c1 + l2 * c12
    J[1, 1] = l2 * c12
    return J


@njit(cache=True)
def output_k(kind, pars, x, y):
    if kind == 0:
        y[0] = x[0]
        y[1] = x[1]
    else:
        l1, l2 = pars[2], pars[3]
        y[0] = l1 * math.cos(x[0]) + l2 * math.cos(x[0] + x[1])
        y[1] = l1 * math.sin(x[0]) + l2 * math.sin(x[0] + x[1])


@njit(cache=True)
def eta2_k(kind, pars, x, e2):
    if kind == 0:
        e2[0] = x[3] * math.cos(x[2])
        e2[1] = x[3] * math.sin(x[2])
    else:
        J = _arm_jacobian(pars, x)
        e2[0] = J[0, 0] * x[2] + J[0, 1] * x[3]
        e2[1] = J[1, 0] * x[2] + J[1, 1] * x[3]


@njit(cache=True)
def dyn_jac(kind, pars, x, u, A, B):
    """A = dF/dx, B = dF/du of the control-affine field at (x, u)."""
    for i in range(4):
        for j in range(4):
            A[i, j] = 0.0
    for i in range(4):
        for j in range(2):
            B[i, j] = 0.0
    if kind == 0:
        th, v = x[2], x[3]
        A[0, 2] = -v * math.sin(th)
        A[0, 3] = math.cos(th)
        A[1, 2] = v * math.cos(th)
        A[1, 3] = math.sin(th)
        B[2, 0] = 1.0
        B[3, 1] = 1.0
        return
    m1, m2, l1, l2, lc1, lc2 = pars[0], pars[1], pars[2], pars[3], pars[4], pars[5]
    grav = pars[8]
    q1, q2, qd1, qd2 = x[0], x[1], x[2], x[3]
    s1, s2, c2 = math.sin(q1), math.sin(q2), math.cos(q2)
    s12 = math.sin(q1 + q2)
    M = np.empty((2, 2))
    C = np.empty(2)
    Gv = np.empty(2)
    _arm_MCG(pars, x, M, C, Gv)
    rhs = np.empty(2)
    rhs[0] = -C[0] - Gv[0] + u[0]
    rhs[1] = -C[1] - Gv[1] + u[1]
    acc = np.empty(2)
    _solve2(M, rhs, acc)
    A[0, 2] = 1.0
    A[1, 3] = 1.0
    k = m2 * l1 * lc2 * s2
    kc = m2 * l1 * lc2 * c2
    col = np.empty(2)
    tmp = np.empty(2)
    # d/dq1: only gravity depends on q1
    col[0] = (m1 * grav * lc1 + m2 * grav * l1) * s1 + m2 * grav * lc2 * s12
    col[1] = m2 * grav * lc2 * s12
    _solve2(M, col, tmp)
    A[2, 0] = tmp[0]
    A[3, 0] = tmp[1]
    # d/dq2: mass matrix, Coriolis, and gravity all move
    dM_acc0 = -k * (2.0 * acc[0] + acc[1])
    dM_acc1 = -k * acc[0]
    dC0 = kc * (-(2.0 * qd1 * qd2 + qd2 * qd2))
    dC1 = kc * qd1 * qd1
    dG = -m2 * grav * lc2 * s12
    col[0] = -dM_acc0 - dC0 - dG
    col[1] = -dM_acc1 - dC1 - dG
    _solve2(M, col, tmp)
    A[2, 1] = tmp[0]
    A[3, 1] = tmp[1]
    # d/dqd
    col[0] = 2.0 * k * qd2
    col[1] = -2.0 * k * qd1
    _solve2(M, col, tmp)
    A[2, 2] = tmp[0]
    A[3, 2] = tmp[1]
    col[0] = 2.0 * k * (qd1 + qd2)
    col[1] = 0.0
    _solve2(M, col, tmp)
    A[2, 3] = tmp[0]
    A[3, 3] = tmp[1]
    det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
    B[2, 0] = M[1, 1] / det
    B[2, 1] = -M[0, 1] / det
    B[3, 0] = -M[1, 0] / det
    B[3, 1] = M[0, 0] / det


@njit(cache=True)
def dy_dx(kind, pars, x, D):
    """Output-map Jacobian (2 x 4)."""
    for i in range(2):
        for j in range(4):
            D[i, j] = 0.0
    if kind == 0:
        D[0, 0] = 1.0
        D[1, 1] = 1.0
    else:
        J = _arm_jacobian(pars, x)
        D[0, 0] = J[0, 0]
        D[0, 1] = J[0, 1]
        D[1, 0] = J[1, 0]
        D[1, 1] = J[1, 1]


@njit(cache=True)
def deta2_dx(kind, pars, x, D):
    """Jacobian of the output velocity (2 x 4)."""
    for i in range(2):
        for j in range(4):
            D[i, j] = 0.0
    if kind == 0:
        th, v = x[2], x[3]
        D[0, 2] = -v * math.sin(th)
        D[0, 3] = math.cos(th)
        D[1, 2] = v * math.cos(th)
        D[1, 3] = math.sin(th)
    else:
        l1, l2 = pars[2], pars[3]
        q1, q2, qd1, qd2 = x[0], x[1], x[2], x[3]
        s1, c1 = math.sin(q1), math.cos(q1)
        s12, c12 = math.sin(q1 + q2), math.cos(q1 + q2)
        # dJ/dq1 @ qd and dJ/dq2 @ qd
        D[0, 0] = (-l1 * c1 - l2 * c12) * qd1 - l2 * c12 * qd2
        D[1, 0] = (-l1 * s1 - l2 * s12) * qd1 - l2 * s12 * qd2
        D[0, 1] = -l2 * c12 * (qd1 + qd2)
        D[1, 1] = -l2 * s12 * (qd1 + qd2)
        J = _arm_jacobian(pars, x)
        D[0, 2] = J[0, 0]
        D[0, 3] = J[0, 1]
        D[1, 2] = J[1, 0]
        D[1, 3] = J[1, 1]


# -- certificate evaluation ------------------------------------------------------

@njit(cache=True)
def psi_bar_k(kind, pars, lam, mu, k1_exps, k1_coefs, psi_exps, psi_coefs, x):
    y = np.empty(2)
    e2 = np.empty(2)
    output_k(kind, pars, x, y)
    eta2_k(kind, pars, x, e2)
    total = poly_val(psi_exps, psi_coefs, y[0], y[1])
    for i in range(2):
        err = e2[i] - poly_val(k1_exps, k1_coefs[i], y[0], y[1])
        total -= err * err / (2.0 * mu[i])
    return total


@njit(cache=True)
def dpsi_bar_dx_k(kind, pars, lam, mu, k1_exps, k1_coefs, dk1_exps, dk1_coefs,
                  psi_exps, psi_coefs, dpsi_exps, dpsi_coefs, x, out):
    y = np.empty(2)
    e2 = np.empty(2)
    output_k(kind, pars, x, y)
    eta2_k(kind, pars, x, e2)
    Dy = np.empty((2, 4))
    De = np.empty((2, 4))
    dy_dx(kind, pars, x, Dy)
    deta2_dx(kind, pars, x, De)
    for j in range(4):
        out[j] = 0.0
    for i in range(2):
        gpsi = poly_val(dpsi_exps, dpsi_coefs[i], y[0], y[1])
        for j in range(4):
            out[j] += gpsi * Dy[i, j]
    for i in range(2):
        err = e2[i] - poly_val(k1_exps, k1_coefs[i], y[0], y[1])
        for j in range(4):
            dk1_j = (poly_val(dk1_exps, dk1_coefs[i, 0], y[0], y[1]) * Dy[0, j]
                     + poly_val(dk1_exps, dk1_coefs[i, 1], y[0], y[1]) * Dy[1, j])
            out[j] -= err / mu[i] * (De[i, j] - dk1_j)


@njit(cache=True)
def lf2_y_k(kind, pars, x, out):
    """Second drift derivative of the outputs (input terms excluded)."""
    if kind == 0:
        out[0] = 0.0
        out[1] = 0.0
    else:
        l1, l2 = pars[2], pars[3]
        q1, q2, qd1, qd2 = x[0], x[1], x[2], x[3]
        s1, c1 = math.sin(q1), math.cos(q1)
        s12, c12 = math.sin(q1 + q2), math.cos(q1 + q2)
        w = qd1 + qd2
        # Jdot @ qd
        jd0 = (-l1 * c1 * qd1 - l2 * c12 * w) * qd1 + (-l2 * c12 * w) * qd2
        jd1 = (-l1 * s1 * qd1 - l2 * s12 * w) * qd1 + (-l2 * s12 * w) * qd2
        M = np.empty((2, 2))
        C = np.empty(2)
        Gv = np.empty(2)
        _arm_MCG(pars, x, M, C, Gv)
        rhs = np.empty(2)
        rhs[0] = -C[0] - Gv[0]
        rhs[1] = -C[1] - Gv[1]
        acc = np.empty(2)
        _solve2(M, rhs, acc)
        J = _arm_jacobian(pars, x)
        out[0] = jd0 + J[0, 0] * acc[0] + J[0, 1] * acc[1]
        out[1] = jd1 + J[1, 0] * acc[0] + J[1, 1] * acc[1]


@njit(cache=True)
def decoupling_k(kind, pars, x, A):
    if kind == 0:
        th, v = x[2], x[3]
        A[0, 0] = -v * math.sin(th)
        A[0, 1] = math.cos(th)
        A[1, 0] = v * math.cos(th)
        A[1, 1] = math.sin(th)
    else:
        J = _arm_jacobian(pars, x)
        M = np.empty((2, 2))
        C = np.empty(2)
        Gv = np.empty(2)
        _arm_MCG(pars, x, M, C, Gv)
        det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
        Mi00 = M[1, 1] / det
        Mi01 = -M[0, 1] / det
        Mi11 = M[0, 0] / det
        A[0, 0] = J[0, 0] * Mi00 + J[0, 1] * Mi01
        A[0, 1] = J[0, 0] * Mi01 + J[0, 1] * Mi11
        A[1, 0] = J[1, 0] * Mi00 + J[1, 1] * Mi01
        A[1, 1] = J[1, 0] * Mi01 + J[1, 1] * Mi11


@njit(cache=True)
def feedback_k(kind, pars, lam, mu, k1_exps, k1_coefs, dk1_exps, dk1_coefs,
               dpsi_exps, dpsi_coefs, x, u):
    """Backstepping feedback u = A(x)^{-1} b(x) for relative degree (2, 2)."""
    y = np.empty(2)
    e2 = np.empty(2)
    output_k(kind, pars, x, y)
    eta2_k(kind, pars, x, e2)
    b = np.empty(2)
    for i in range(2):
        k1 = poly_val(k1_exps, k1_coefs[i], y[0], y[1])
        # formal time derivative of k1 along the chain: grad k1 . eta2
        k1dot = (poly_val(dk1_exps, dk1_coefs[i, 0], y[0], y[1]) * e2[0]
                 + poly_val(dk1_exps, dk1_coefs[i, 1], y[0], y[1]) * e2[1])
        tail = (k1dot + 0.5 * lam * (e2[i] - k1)
                + mu[i] * poly_val(dpsi_exps, dpsi_coefs[i], y[0], y[1]))
        b[i] = tail
    lf2 = np.empty(2)
    lf2_y_k(kind, pars, x, lf2)
    b[0] -= lf2[0]
    b[1] -= lf2[1]
    A = np.empty((2, 2))
    decoupling_k(kind, pars, x, A)
    _solve2(A, b, u)


# -- rollouts ----------------------------------------------------------------

@njit(cache=True)
def rk4_step_k(kind, pars, x, u, dt, xn):
    k1 = np.empty(4)
    k2 = np.empty(4)
    k3 = np.empty(4)
    k4 = np.empty(4)
    tmp = np.empty(4)
    xdot_k(kind, pars, x, u, k1)
    for i in range(4):
        tmp[i] = x[i] + 0.5 * dt * k1[i]
    xdot_k(kind, pars, tmp, u, k2)
    for i in range(4):
        tmp[i] = x[i] + 0.5 * dt * k2[i]
    xdot_k(kind, pars, tmp, u, k3)
    for i in range(4):
        tmp[i] = x[i] + dt * k3[i]
    xdot_k(kind, pars, tmp, u, k4)
    for i in range(4):
        xn[i] = x[i] + (dt / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])


@njit(cache=True)
def zoh_rollout_k(kind, pars, x0, U, dt, substeps):
    """Hold each input row for dt; return states at every substep boundary."""
    K = U.shape[0]
    out = np.empty((K * substeps + 1, 4))
    out[0] = x0
    x = x0.copy()
    xn = np.empty(4)
    idx = 1
    h = dt / substeps
    for k in range(K):
        for _ in range(substeps):
            rk4_step_k(kind, pars, x, U[k], h, xn)
            x[:] = xn
            out[idx] = x
            idx += 1
    return out


@njit(cache=True)
def backstepping_loop_k(kind, pars, lam, mu, k1_exps, k1_coefs, dk1_exps,
                        dk1_coefs, dpsi_exps, dpsi_coefs, x0, T, steps,
                        substeps, u_max, saturate):
    """ZOH closed loop under the certificate feedback.

    Returns (states at substep boundaries, applied inputs per period,
    raw feedback magnitudes before any saturation)."""
    states = np.empty((steps * substeps + 1, 4))
    inputs = np.empty((steps, 2))
    raw = np.empty((steps, 2))
    states[0] = x0
    x = x0.copy()
    xn = np.empty(4)
    u = np.empty(2)
    h = T / substeps
    idx = 1
    for k in range(steps):
        feedback_k(kind, pars, lam, mu, k1_exps, k1_coefs, dk1_exps, dk1_coefs,
                   dpsi_exps, dpsi_coefs, x, u)
        raw[k, 0] = u[0]
        raw[k, 1] = u[1]
        if saturate:
            for j in range(2):
                if u[j] > u_max[j]:
                    u[j] = u_max[j]
                elif u[j] < -u_max[j]:
                    u[j] = -u_max[j]
        inputs[k] = u
        for _ in range(substeps):
            rk4_step_k(kind, pars, x, u, h, xn)
            x[:] = xn
            states[idx] = x
            idx += 1
    return states, inputs, raw


# -- shooting objective ------------------------------------------------------

@njit(cache=True)
def mpc_eval_k(kind, pars, lam, mu, k1_exps, k1_coefs, dk1_exps, dk1_coefs,
               psi_exps, psi_coefs, dpsi_exps, dpsi_coefs, phi_exps, phi_coefs,
               dphi_exps, dphi_coefs, x0, Uflat, N, T, substeps, w_T, w_u, rho,
               eps_term, target_mode, grad):
    """Penalty objective and gradient for the single-shooting transcription.

    value = w_T max(phi(y_N), 0)^2 + w_u T sum(U^2)
            + rho [ sum_t max(-psi(y_t), 0)^2 + terminal deficit^2 ]
    where the terminal deficit is max(eps_term - Psi(x_N), 0) in
    reach-avoid mode (target_mode = 0) or max(phi(y_N), 0) in target mode.
    Sensitivities propagate the exact derivative of each RK4 step.
    Also returns (value, max state violation, terminal deficit)."""
    nu = 2 * N
    x = x0.copy()
    S = np.zeros((4, nu))  # dx/dU
    for j in range(nu):
        grad[j] = 0.0
    h = T / substeps
    value = 0.0
    state_viol = 0.0
    A = np.empty((4, 4))
    B = np.empty((4, 2))
    xs = np.empty((4, 4))  # stage states
    k = np.empty((4, 4))   # stage derivatives
    kS = np.empty((4, 4, nu))
    xn = np.empty(4)
    Dy = np.empty((2, 4))
    y = np.empty(2)
    u = np.empty(2)
    for seg in range(N):
        u[0] = Uflat[2 * seg]
        u[1] = Uflat[2 * seg + 1]
        for _ in range(substeps):
            # stage 1..4 of RK4 with sensitivity propagation
            for st in range(4):
                if st == 0:
                    for i in range(4):
                        xs[0, i] = x[i]
                elif st == 1 or st == 2:
                    c = 0.5 * h
                    for i in range(4):
                        xs[st, i] = x[i] + c * k[st - 1, i]
                else:
                    for i in range(4):
                        xs[st, i] = x[i] + h * k[st - 1, i]
                xdot_k(kind, pars, xs[st], u, k[st])
                dyn_jac(kind, pars, xs[st], u, A, B)
                # kS[st] = A @ (S + c * kS[st-1]) + B * dU-selector
                if st == 0:
                    for i in range(4):
                        for j in range(nu):
                            kS[0, i, j] = 0.0
                            for l in range(4):
                                kS[0, i, j] += A[i, l] * S[l, j]
                else:
                    c = 0.5 * h if st < 3 else h
                    for i in range(4):
                        for j in range(nu):
                            acc = 0.0
                            for l in range(4):
                                acc += A[i, l] * (S[l, j] + c * kS[st - 1, l, j])
                            kS[st, i, j] = acc
                for i in range(4):
                    kS[st, i, 2 * seg] += B[i, 0]
                    kS[st, i, 2 * seg + 1] += B[i, 1]
            for i in range(4):
                xn[i] = x[i] + (h / 6.0) * (k[0, i] + 2.0 * k[1, i]
                                            + 2.0 * k[2, i] + k[3, i])
                for j in range(nu):
                    S[i, j] += (h / 6.0) * (kS[0, i, j] + 2.0 * kS[1, i, j]
                                            + 2.0 * kS[2, i, j] + kS[3, i, j])
            for i in range(4):
                x[i] = xn[i]
            # state constraint psi(y) >= 0 at the substep boundary
            output_k(kind, pars, x, y)
            ps = poly_val(psi_exps, psi_coefs, y[0], y[1])
            if -ps > state_viol:
                state_viol = -ps
            if ps < 0.0:
                value += rho * ps * ps
                dy_dx(kind, pars, x, Dy)
                g1 = poly_val(dpsi_exps, dpsi_coefs[0], y[0], y[1])
                g2 = poly_val(dpsi_exps, dpsi_coefs[1], y[0], y[1])
                for j in range(nu):
                    dps = 0.0
                    for l in range(4):
                        dps += (g1 * Dy[0, l] + g2 * Dy[1, l]) * S[l, j]
                    grad[j] += rho * 2.0 * ps * dps
    # input effort
    for j in range(nu):
        value += w_u * T * Uflat[j] * Uflat[j]
        grad[j] += 2.0 * w_u * T * Uflat[j]
    # terminal cost: pull toward the target set
    output_k(kind, pars, x, y)
    ph = poly_val(phi_exps, phi_coefs, y[0], y[1])
    dy_dx(kind, pars, x, Dy)
    if ph > 0.0:
        value += w_T * ph * ph
        g1 = poly_val(dphi_exps, dphi_coefs[0], y[0], y[1])
        g2 = poly_val(dphi_exps, dphi_coefs[1], y[0], y[1])
        for j in range(nu):
            dph = 0.0
            for l in range(4):
                dph += (g1 * Dy[0, l] + g2 * Dy[1, l]) * S[l, j]
            grad[j] += 2.0 * w_T * ph * dph
    # terminal constraint
    if target_mode == 0:
        Pb = psi_bar_k(kind, pars, lam, mu, k1_exps, k1_coefs, psi_exps,
                       psi_coefs, x)
        deficit = eps_term - Pb
        if deficit > 0.0:
            value += rho * deficit * deficit
            dPb = np.empty(4)
            dpsi_bar_dx_k(kind, pars, lam, mu, k1_exps, k1_coefs, dk1_exps,
                          dk1_coefs, psi_exps, psi_coefs, dpsi_exps,
                          dpsi_coefs, x, dPb)
            for j in range(nu):
                dd = 0.0
                for l in range(4):
                    dd -= dPb[l] * S[l, j]
                grad[j] += rho * 2.0 * deficit * dd
        term_deficit = deficit
    else:
        term_deficit = ph
        if ph > 0.0:
            value += rho * ph * ph
            g1 = poly_val(dphi_exps, dphi_coefs[0], y[0], y[1])
            g2 = poly_val(dphi_exps, dphi_coefs[1], y[0], y[1])
            for j in range(nu):
                dph = 0.0
                for l in range(4):
                    dph += (g1 * Dy[0, l] + g2 * Dy[1, l]) * S[l, j]
                grad[j] += rho * 2.0 * ph * dph
    return value, state_viol, term_deficit


@njit(cache=True)
def mpc_resid_k(kind, pars, lam, mu, k1_exps, k1_coefs, dk1_exps, dk1_coefs,
                psi_exps, psi_coefs, dpsi_exps, dpsi_coefs, phi_exps,
                phi_coefs, dphi_exps, dphi_coefs, x0, Uflat, N, T, substeps,
                w_T, w_u, rho, eps_term, target_mode, r, J):
    """Residual vector and Jacobian of the penalized shooting objective.

    sum(r^2) equals the value computed by mpc_eval_k.  Row layout:
    one hinge row sqrt(rho) max(-psi, 0) per substep boundary, then the
    input-effort rows sqrt(w_u T) U, the terminal-cost row
    sqrt(w_T) max(phi_N, 0) and the terminal-constraint hinge row.
    Inactive hinge rows keep a zero Jacobian row (one-sided subgradient).
    Returns (max state violation, terminal deficit) for adjudication."""
    nu = 2 * N
    Ns = N * substeps
    x = x0.copy()
    S = np.zeros((4, nu))
    for a in range(r.shape[0]):
        r[a] = 0.0
        for j in range(nu):
            J[a, j] = 0.0
    h = T / substeps
    sr = math.sqrt(rho)
    state_viol = 0.0
    A = np.empty((4, 4))
    B = np.empty((4, 2))
    xs = np.empty((4, 4))
    k = np.empty((4, 4))
    kS = np.empty((4, 4, nu))
    xn = np.empty(4)
    Dy = np.empty((2, 4))
    y = np.empty(2)
    u = np.empty(2)
    row = 0
    for seg in range(N):
        u[0] = Uflat[2 * seg]
        u[1] = Uflat[2 * seg + 1]
        for _ in range(substeps):
            for st in range(4):
                if st == 0:
                    for i in range(4):
                        xs[0, i] = x[i]
                elif st == 1 or st == 2:
                    c = 0.5 * h
                    for i in range(4):
                        xs[st, i] = x[i] + c * k[st - 1, i]
                else:
                    for i in range(4):
                        xs[st, i] = x[i] + h * k[st - 1, i]
                xdot_k(kind, pars, xs[st], u, k[st])
                dyn_jac(kind, pars, xs[st], u, A, B)
                if st == 0:
                    for i in range(4):
                        for j in range(nu):
                            kS[0, i, j] = 0.0
                            for l in range(4):
                                kS[0, i, j] += A[i, l] * S[l, j]
                else:
                    c = 0.5 * h if st < 3 else h
                    for i in range(4):
                        for j in range(nu):
                            acc = 0.0
                            for l in range(4):
                                acc += A[i, l] * (S[l, j] + c * kS[st - 1, l, j])
                            kS[st, i, j] = acc
                for i in range(4):
                    kS[st, i, 2 * seg] += B[i, 0]
                    kS[st, i, 2 * seg + 1] += B[i, 1]
            for i in range(4):
                xn[i] = x[i] + (h / 6.0) * (k[0, i] + 2.0 * k[1, i]
                                            + 2.0 * k[2, i] + k[3, i])
                for j in range(nu):
                    S[i, j] += (h / 6.0) * (kS[0, i, j] + 2.0 * kS[1, i, j]
                                            + 2.0 * kS[2, i, j] + kS[3, i, j])
            for i in range(4):
                x[i] = xn[i]
            output_k(kind, pars, x, y)
            ps = poly_val(psi_exps, psi_coefs, y[0], y[1])
            if -ps > state_viol:
                state_viol = -ps
            if ps < 0.0:
                r[row] = sr * (-ps)
                dy_dx(kind, pars, x, Dy)
                g1 = poly_val(dpsi_exps, dpsi_coefs[0], y[0], y[1])
                g2 = poly_val(dpsi_exps, dpsi_coefs[1], y[0], y[1])
                for j in range(nu):
                    dps = 0.0
                    for l in range(4):
                        dps += (g1 * Dy[0, l] + g2 * Dy[1, l]) * S[l, j]
                    J[row, j] = -sr * dps
            row += 1
    su = math.sqrt(w_u * T)
    for j in range(nu):
        r[Ns + j] = su * Uflat[j]
        J[Ns + j, j] = su
    output_k(kind, pars, x, y)
    ph = poly_val(phi_exps, phi_coefs, y[0], y[1])
    dy_dx(kind, pars, x, Dy)
    row = Ns + nu
    if ph > 0.0:
        sw = math.sqrt(w_T)
        r[row] = sw * ph
        g1 = poly_val(dphi_exps, dphi_coefs[0], y[0], y[1])
        g2 = poly_val(dphi_exps, dphi_coefs[1], y[0], y[1])
        for j in range(nu):
            dph = 0.0
            for l in range(4):
                dph += (g1 * Dy[0, l] + g2 * Dy[1, l]) * S[l, j]
            J[row, j] = sw * dph
    row += 1
    if target_mode == 0:
        Pb = psi_bar_k(kind, pars, lam, mu, k1_exps, k1_coefs, psi_exps,
                       psi_coefs, x)
        deficit = eps_term - Pb
        if deficit > 0.0:
            r[row] = sr * deficit
            dPb = np.empty(4)
            dpsi_bar_dx_k(kind, pars, lam, mu, k1_exps, k1_coefs, dk1_exps,
                          dk1_coefs, psi_exps, psi_coefs, dpsi_exps,
                          dpsi_coefs, x, dPb)
            for j in range(nu):
                dd = 0.0
                for l in range(4):
                    dd -= dPb[l] * S[l, j]
                J[row, j] = sr * dd
        term_deficit = deficit
    else:
        term_deficit = ph
        if ph > 0.0:
            r[row] = sr * ph
            g1 = poly_val(dphi_exps, dphi_coefs[0], y[0], y[1])
            g2 = poly_val(dphi_exps, dphi_coefs[1], y[0], y[1])
            for j in range(nu):
                dph = 0.0
                for l in range(4):
                    dph += (g1 * Dy[0, l] + g2 * Dy[1, l]) * S[l, j]
                J[row, j] = sr * dph
    return state_viol, term_deficit
