"""Agreement tests: jit kernels vs the pure-Python reference paths.

The kernels duplicate closed-form math from system.py / backstepping.py
for speed; these tests pin the two implementations together and check
every hand-written Jacobian against finite differences.
"""

import numpy as np
import pytest

from rampc import kernels as kn
from rampc.backstepping import BacksteppingParams, Certificate, feedback, psi_bar
from rampc.polynomial import BasisSet, Polynomial
from rampc.safety import arm_sets, dubins_sets
from rampc.system import arm2link_model, dubins_model, eta, integrate


def _models():
    return [(dubins_model(v_min=0.3, v_max=2.0), dubins_sets()),
            (arm2link_model(), arm_sets())]


def _toy_cert(seed=3):
    rng = np.random.default_rng(seed)
    basis = BasisSet.total_degree(("y1", "y2"), 3)
    theta = tuple(tuple(rng.normal(scale=0.2, size=len(basis))) for _ in range(2))
    params = BacksteppingParams(lam=0.01, mu=((0.05,), (0.08,)))
    return Certificate(params=params, basis=basis, theta=theta, delta_star=0.0)


def _rand_states(model, rng, n):
    box = model.state_box
    return rng.uniform(box[:, 0], box[:, 1], size=(n, model.n))


def test_poly_val_matches_polynomial_eval():
    rng = np.random.default_rng(0)
    for _ in range(200):
        nterms = rng.integers(1, 12)
        terms = {(int(rng.integers(0, 5)), int(rng.integers(0, 5))): float(rng.normal())
                 for _ in range(nterms)}
        p = Polynomial(("y1", "y2"), terms)
        exps, coefs = kn.poly_table(p)
        y = rng.uniform(-2, 2, 2)
        assert kn.poly_val(exps, coefs, y[0], y[1]) == pytest.approx(p.eval(y), abs=1e-12, rel=1e-12)


@pytest.mark.parametrize("mi", [0, 1])
def test_xdot_and_output_match_model(mi):
    model, _ = _models()[mi]
    rng = np.random.default_rng(1)
    out = np.empty(4)
    y = np.empty(2)
    e2 = np.empty(2)
    for x in _rand_states(model, rng, 50):
        u = rng.uniform(-3, 3, 2)
        kn.xdot_k(model.kind, model.params, x, u, out)
        np.testing.assert_allclose(out, model.xdot(x, u), atol=1e-12)
        kn.output_k(model.kind, model.params, x, y)
        np.testing.assert_allclose(y, model.h(x), atol=1e-12)
        kn.eta2_k(model.kind, model.params, x, e2)
        np.testing.assert_allclose(e2, [eta(model, x).channels[i][1] for i in range(2)],
                                   atol=1e-12)


@pytest.mark.parametrize("mi", [0, 1])
def test_dyn_jac_matches_finite_differences(mi):
    model, _ = _models()[mi]
    rng = np.random.default_rng(2)
    A = np.empty((4, 4))
    B = np.empty((4, 2))
    for x in _rand_states(model, rng, 30):
        u = rng.uniform(-3, 3, 2)
        kn.dyn_jac(model.kind, model.params, x, u, A, B)
        for k in range(4):
            h = 1e-6 * (1 + abs(x[k]))
            xp, xm = x.copy(), x.copy()
            xp[k] += h
            xm[k] -= h
            fd = (model.xdot(xp, u) - model.xdot(xm, u)) / (2 * h)
            np.testing.assert_allclose(A[:, k], fd, atol=1e-5, rtol=1e-5)
        for k in range(2):
            up, um = u.copy(), u.copy()
            up[k] += 1e-6
            um[k] -= 1e-6
            fd = (model.xdot(x, up) - model.xdot(x, um)) / 2e-6
            np.testing.assert_allclose(B[:, k], fd, atol=1e-5, rtol=1e-5)


@pytest.mark.parametrize("mi", [0, 1])
def test_certificate_values_match_reference(mi):
    model, spec = _models()[mi]
    cert = _toy_cert()
    pk = kn.pack_cert(cert, model, spec)
    rng = np.random.default_rng(4)
    u = np.empty(2)
    lf2 = np.empty(2)
    A = np.empty((2, 2))
    for x in _rand_states(model, rng, 60):
        ref = psi_bar(cert, model, spec, x)
        got = kn.psi_bar_k(pk.kind, pk.params, pk.lam, pk.mu, pk.k1_exps,
                           pk.k1_coefs, pk.psi_exps, pk.psi_coefs, x)
        assert got == pytest.approx(ref, abs=1e-10, rel=1e-10)
        kn.feedback_k(pk.kind, pk.params, pk.lam, pk.mu, pk.k1_exps, pk.k1_coefs,
                      pk.dk1_exps, pk.dk1_coefs, pk.dpsi_exps, pk.dpsi_coefs, x, u)
        np.testing.assert_allclose(u, feedback(cert, model, spec, x),
                                   atol=1e-8, rtol=1e-8)
        kn.lf2_y_k(pk.kind, pk.params, x, lf2)
        np.testing.assert_allclose(lf2, [model.lf_y(x, i, 2) for i in range(2)],
                                   atol=1e-10)
        kn.decoupling_k(pk.kind, pk.params, x, A)
        np.testing.assert_allclose(A, model.lg_lf_y(x), atol=1e-12)


@pytest.mark.parametrize("mi", [0, 1])
def test_psi_bar_gradient_matches_finite_differences(mi):
    model, spec = _models()[mi]
    cert = _toy_cert()
    pk = kn.pack_cert(cert, model, spec)
    rng = np.random.default_rng(5)
    g = np.empty(4)
    for x in _rand_states(model, rng, 30):
        kn.dpsi_bar_dx_k(pk.kind, pk.params, pk.lam, pk.mu, pk.k1_exps,
                         pk.k1_coefs, pk.dk1_exps, pk.dk1_coefs, pk.psi_exps,
                         pk.psi_coefs, pk.dpsi_exps, pk.dpsi_coefs, x, g)
        for k in range(4):
            h = 1e-6 * (1 + abs(x[k]))
            xp, xm = x.copy(), x.copy()
            xp[k] += h
            xm[k] -= h
            fd = (psi_bar(cert, model, spec, xp) - psi_bar(cert, model, spec, xm)) / (2 * h)
            assert g[k] == pytest.approx(fd, abs=1e-5, rel=1e-5)


@pytest.mark.parametrize("mi", [0, 1])
def test_zoh_rollout_matches_integrate(mi):
    model, _ = _models()[mi]
    rng = np.random.default_rng(6)
    x0 = _rand_states(model, rng, 1)[0]
    U = rng.uniform(-2, 2, size=(5, 2))
    states = kn.zoh_rollout_k(model.kind, model.params, x0, U, 0.05, 8)
    seg = integrate(model, x0, U, 0.05, substeps=8)
    np.testing.assert_allclose(states, seg.states, atol=1e-10)


@pytest.mark.parametrize("mi", [0, 1])
def test_backstepping_loop_inputs_match_feedback(mi):
    model, spec = _models()[mi]
    cert = _toy_cert()
    pk = kn.pack_cert(cert, model, spec)
    rng = np.random.default_rng(7)
    x0 = _rand_states(model, rng, 1)[0]
    u_max = np.array([50.0, 50.0])  # loose: exercise the unsaturated path
    states, inputs, raw = kn.backstepping_loop_k(
        pk.kind, pk.params, pk.lam, pk.mu, pk.k1_exps, pk.k1_coefs, pk.dk1_exps,
        pk.dk1_coefs, pk.dpsi_exps, pk.dpsi_coefs, x0, 0.02, 6, 5, u_max, True)
    assert states.shape == (31, 4)
    for k in range(6):
        xk = states[k * 5]
        np.testing.assert_allclose(raw[k], feedback(cert, model, spec, xk),
                                   atol=1e-8, rtol=1e-8)
    np.testing.assert_allclose(inputs, np.clip(raw, -u_max, u_max), atol=0)


@pytest.mark.parametrize("mi", [0, 1])
@pytest.mark.parametrize("target_mode", [0, 1])
def test_mpc_objective_gradient_matches_finite_differences(mi, target_mode):
    model, spec = _models()[mi]
    cert = _toy_cert()
    pk = kn.pack_cert(cert, model, spec)
    dphi_exps, dphi_coefs = kn._stack_tables([spec.phi.partial("y1"),
                                              spec.phi.partial("y2")])
    rng = np.random.default_rng(8 + mi)
    x0 = _rand_states(model, rng, 1)[0]
    N = 4
    U = rng.uniform(-1, 1, 2 * N)
    grad = np.empty(2 * N)

    def val(Uv):
        g = np.empty(2 * N)
        v, _, _ = kn.mpc_eval_k(pk.kind, pk.params, pk.lam, pk.mu, pk.k1_exps,
                                pk.k1_coefs, pk.dk1_exps, pk.dk1_coefs,
                                pk.psi_exps, pk.psi_coefs, pk.dpsi_exps,
                                pk.dpsi_coefs, pk.phi_exps, pk.phi_coefs,
                                dphi_exps, dphi_coefs, x0, Uv, N, 0.05, 5,
                                10.0, 0.1, 100.0, 0.01, target_mode, g)
        return v, g

    v0, g0 = val(U)
    assert np.isfinite(v0)
    for j in range(2 * N):
        Up, Um = U.copy(), U.copy()
        Up[j] += 1e-6
        Um[j] -= 1e-6
        fd = (val(Up)[0] - val(Um)[0]) / 2e-6
        assert g0[j] == pytest.approx(fd, abs=2e-4, rel=2e-4)
