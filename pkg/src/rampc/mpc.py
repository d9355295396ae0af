"""Sampled-data reach-avoid MPC over piecewise-constant inputs.

Single-shooting transcription: the decision vector is the stacked input
sequence, the flow is reconstructed by RK4 with a fixed substep count, and
state constraints are enforced at every substep boundary.  Feasibility is
always adjudicated from explicit constraint residuals, never from solver
convergence flags, because exterior-penalty methods happily report success
at infeasible points.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import least_squares

from . import kernels
from .backstepping import COND_FLOOR, SingularityError, feedback
from .polynomial import Polynomial
from .safety import SafetySpec
from .synthesis import Certificate
from .system import SystemModel

TERMINAL_MODES = ("reach_avoid_set", "target_set")

# residual thresholds that define "feasible"
INPUT_TOL = 1e-8
STATE_TOL = 1e-6
TERMINAL_TOL = 1e-6


@dataclass(frozen=True)
class MpcConfig:
    """Horizon, terminal-set mode and solver schedule for one controller."""

    N: int
    T: float
    u_max: tuple
    terminal_margin: float
    substeps: int = 10
    terminal_mode: str = "reach_avoid_set"
    w_T: float = 10.0
    w_u: float = 0.1
    penalty_init: float = 10.0
    penalty_growth: float = 10.0
    penalty_max: float = 1e7
    max_inner: int = 200
    warm_penalty_init: float = 1e4
    warm_max_inner: int = 60
    restore_budget: int = 60
    feasibility_monitor: bool = True
    T_star: float | None = None  # attached sampling bound, if any

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("horizon must contain at least one interval")
        if self.T <= 0:
            raise ValueError("sampling period must be positive")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if self.terminal_mode not in TERMINAL_MODES:
            raise ValueError(f"unknown terminal mode {self.terminal_mode!r}")
        if any(b <= 0 for b in self.u_max):
            raise ValueError("input bounds must be positive")
        if self.T_star is not None and not self.T < self.T_star:
            raise ValueError(
                f"sampling period {self.T} must stay below the bound T* = {self.T_star}")
        object.__setattr__(self, "u_max", tuple(float(b) for b in self.u_max))


@dataclass(frozen=True)
class MpcSolution:
    """One solved step: input plan, predicted flow and residual verdict."""

    U: np.ndarray             # (N, m)
    states: np.ndarray        # (N*substeps + 1, n) predicted substep states
    objective: float          # true cost, penalty excluded
    feasible: bool
    state_residual: float     # max(0, -min psi) along the prediction
    input_residual: float     # max(0, |u| - u_max)
    terminal_residual: float  # max(0, eps - Psi_N) or max(0, phi_N)
    iterations: int
    solve_time: float
    warm_feasible: bool | None = None  # iteration-0 verdict on the warm start

    def __post_init__(self):
        if self.feasible:
            assert self.input_residual <= INPUT_TOL
            assert self.state_residual <= STATE_TOL
            assert self.terminal_residual <= TERMINAL_TOL


class _Packed:
    """CertPack plus the phi-gradient tables mpc_eval_k needs."""

    def __init__(self, cert: Certificate, model: SystemModel, spec: SafetySpec):
        self.pack = kernels.pack_cert(cert, model, spec)
        self.dphi_exps, self.dphi_coefs = kernels._stack_tables(
            [spec.phi.partial("y1"), spec.phi.partial("y2")])


_PACK_CACHE: dict = {}


def _packed(cert: Certificate, model: SystemModel, spec: SafetySpec) -> _Packed:
    key = (model.name, cert.theta_stack().tobytes(), cert.params.lam,
           _poly_key(spec.psi), _poly_key(spec.phi))
    hit = _PACK_CACHE.get(key)
    if hit is None:
        hit = _Packed(cert, model, spec)
        _PACK_CACHE[key] = hit
    return hit


def _poly_key(p: Polynomial):
    return tuple(sorted(p.terms.items()))


def _objective_closure(pk: _Packed, config: MpcConfig, x0: np.ndarray, rho: float):
    p = pk.pack
    mode = 0 if config.terminal_mode == "reach_avoid_set" else 1
    n_dec = 2 * config.N
    x0 = np.asarray(x0, dtype=float)

    def fun(Uflat):
        grad = np.empty(n_dec)
        value, _, _ = kernels.mpc_eval_k(
            p.kind, p.params, p.lam, p.mu, p.k1_exps, p.k1_coefs, p.dk1_exps,
            p.dk1_coefs, p.psi_exps, p.psi_coefs, p.dpsi_exps, p.dpsi_coefs,
            p.phi_exps, p.phi_coefs, pk.dphi_exps, pk.dphi_coefs, x0, Uflat,
            config.N, config.T, config.substeps, config.w_T, config.w_u, rho,
            config.terminal_margin, mode, grad)
        return value, grad

    return fun


def _lsq_closure(pk: _Packed, config: MpcConfig, x0: np.ndarray, rho: float,
                 w_T: float = None, w_u: float = None):
    """Cached residual/Jacobian pair for the trust-region inner solver.

    Zero cost weights turn the system into pure constraint residuals, which
    is the restoration phase used to close the last O(1/rho) feasibility gap
    the exterior penalty leaves behind.
    """
    p = pk.pack
    mode = 0 if config.terminal_mode == "reach_avoid_set" else 1
    nu = 2 * config.N
    nr = config.N * config.substeps + nu + 2
    x0 = np.asarray(x0, dtype=float)
    w_T = config.w_T if w_T is None else w_T
    w_u = config.w_u if w_u is None else w_u
    r = np.empty(nr)
    J = np.empty((nr, nu))
    cache: dict = {}

    def compute(Uflat):
        key = Uflat.tobytes()
        if key not in cache:
            kernels.mpc_resid_k(
                p.kind, p.params, p.lam, p.mu, p.k1_exps, p.k1_coefs,
                p.dk1_exps, p.dk1_coefs, p.psi_exps, p.psi_coefs,
                p.dpsi_exps, p.dpsi_coefs, p.phi_exps, p.phi_coefs,
                pk.dphi_exps, pk.dphi_coefs, x0, Uflat, config.N, config.T,
                config.substeps, w_T, w_u, rho,
                config.terminal_margin, mode, r, J)
            cache.clear()
            cache[key] = (r.copy(), J.copy())
        return cache[key]

    return (lambda U: compute(U)[0]), (lambda U: compute(U)[1])


def _residuals(pk: _Packed, config: MpcConfig, x0: np.ndarray, U: np.ndarray):
    """Rollout + raw constraint residuals for a candidate input plan."""
    p = pk.pack
    states = kernels.zoh_rollout_k(p.kind, p.params, np.asarray(x0, float),
                                   U, config.T, config.substeps)
    y = np.empty(2)
    min_psi = np.inf
    for row in states:
        kernels.output_k(p.kind, p.params, row, y)
        v = kernels.poly_val(p.psi_exps, p.psi_coefs, y[0], y[1])
        if v < min_psi:
            min_psi = v
    kernels.output_k(p.kind, p.params, states[-1], y)
    phi_N = kernels.poly_val(p.phi_exps, p.phi_coefs, y[0], y[1])
    if config.terminal_mode == "reach_avoid_set":
        Pb = kernels.psi_bar_k(p.kind, p.params, p.lam, p.mu, p.k1_exps,
                               p.k1_coefs, p.psi_exps, p.psi_coefs, states[-1])
        term = max(config.terminal_margin - Pb, 0.0)
    else:
        term = max(phi_N, 0.0)
    bounds = np.asarray(config.u_max)
    input_res = float(max(0.0, (np.abs(U) - bounds).max())) if U.size else 0.0
    state_res = float(max(0.0, -min_psi))
    objective = config.w_T * max(phi_N, 0.0) ** 2 \
        + config.w_u * config.T * float(np.sum(U * U))
    return state_res, input_res, float(term), states, objective


def _is_feasible(state_res: float, input_res: float, term_res: float) -> bool:
    return (input_res <= INPUT_TOL and state_res <= STATE_TOL
            and term_res <= TERMINAL_TOL)


def _default_init(model: SystemModel, x0: np.ndarray, N: int) -> np.ndarray:
    """Model-only cold start: the constant input with zero acceleration.

    Zero torque lets the arm swing far outside the modelled region within a
    single horizon, which floods the penalty objective; compensating gravity
    and Coriolis terms keeps the initial rollout bounded.  Uses nothing but
    the plant model, so both controller baselines share it.
    """
    if model.kind == 1:
        M = np.empty((2, 2))
        C = np.empty(2)
        Gv = np.empty(2)
        kernels._arm_MCG(model.params, x0, M, C, Gv)
        return np.repeat((C + Gv)[None, :], N, axis=0)
    return np.zeros((N, model.m))


def improve_tail(pk: _Packed, config: MpcConfig, x_N, u_init, budget: int = 25):
    """Best constant input over one interval from x_N, by terminal Psi.

    The frozen-feedback tail of the shifted candidate loses first-order
    accuracy over a long sampling period; a two-variable trust-region solve
    of the single-interval problem (always-active terminal hinge aimed above
    the reachable level, state hinges kept) recovers most of it.  Used only
    to seed the optimizer, never as the adjudicated candidate.
    """
    p = pk.pack
    Pb = kernels.psi_bar_k(p.kind, p.params, p.lam, p.mu, p.k1_exps,
                           p.k1_coefs, p.psi_exps, p.psi_coefs,
                           np.asarray(x_N, float))
    tail_cfg = replace(config, N=1, terminal_mode="reach_avoid_set",
                       terminal_margin=max(Pb, config.terminal_margin) + 1.0,
                       T_star=None)
    fun, jac = _lsq_closure(pk, tail_cfg, x_N, 1.0, w_T=0.0, w_u=0.0)
    b = np.asarray(config.u_max)
    res = least_squares(fun, np.clip(u_init, -b, b), jac=jac,
                        bounds=(-b, b), method="trf", max_nfev=budget)
    return res.x


def solve_step(model: SystemModel, cert: Certificate, spec: SafetySpec,
               config: MpcConfig, x_k, warm_start=None, init=None) -> MpcSolution:
    """Solve one receding-horizon step from x_k.

    Exterior quadratic penalty with multiplicative growth; inner problems go
    to a box-constrained trust-region Gauss-Newton method with analytic
    Jacobians from forward sensitivity propagation.  A feasible warm start
    is kept as a fallback: if the optimizer ends at a worse (infeasible)
    point the warm start itself is returned, which is exactly the recursion
    Theorem-style guarantees rely on.  `init` overrides the optimizer's
    starting point without affecting the warm-start adjudication.
    """
    x_k = np.asarray(x_k, dtype=float)
    if not model.in_box(x_k):
        raise ValueError(f"initial state outside the state box: {x_k}")
    pk = _packed(cert, model, spec)
    t0 = time.perf_counter()

    m = model.m
    bounds = np.repeat(np.asarray(config.u_max)[None, :], config.N, axis=0)
    if init is None:
        init = warm_start
    if init is not None:
        U0 = np.clip(np.asarray(init, dtype=float).reshape(config.N, m),
                     -bounds, bounds)
    else:
        U0 = np.clip(_default_init(model, x_k, config.N), -bounds, bounds)

    warm_feasible = None
    fallback = None
    if warm_start is not None:
        Uw = np.clip(np.asarray(warm_start, dtype=float).reshape(config.N, m),
                     -bounds, bounds)
        s0, i0, t0_, states0, obj0 = _residuals(pk, config, x_k, Uw)
        warm_feasible = _is_feasible(s0, i0, t0_)
        if warm_feasible:
            fallback = MpcSolution(
                U=Uw.copy(), states=states0, objective=obj0, feasible=True,
                state_residual=s0, input_residual=i0,
                terminal_residual=t0_, iterations=0,
                solve_time=0.0, warm_feasible=True)

    si, ii, ti, _, _ = _residuals(pk, config, x_k, U0)
    warm_close = init is not None and max(si, ii, ti) <= 1e-2

    lb, ub = -bounds.ravel(), bounds.ravel()
    iterations = 0

    def check(Uflat):
        return _residuals(pk, config, x_k, Uflat.reshape(config.N, m))

    def restore(Uflat):
        fun, jac = _lsq_closure(pk, config, x_k, 1.0, w_T=0.0, w_u=0.0)
        res = least_squares(fun, Uflat, jac=jac, bounds=(lb, ub),
                            method="trf", max_nfev=config.restore_budget)
        return res.x, int(res.nfev)

    def run_ladder(U, rho, budget):
        nonlocal iterations
        best = None
        while True:
            fun, jac = _lsq_closure(pk, config, x_k, rho)
            res = least_squares(fun, U, jac=jac, bounds=(lb, ub),
                                method="trf", max_nfev=budget)
            U = res.x
            iterations += int(res.nfev)
            s_res, i_res, t_res, states, obj = check(U)
            best = (U.copy(), s_res, i_res, t_res, states, obj)
            if _is_feasible(s_res, i_res, t_res):
                break
            if max(s_res, t_res) <= 1e-3:
                # close enough for the quadratically convergent phase
                U2, used = restore(U)
                iterations += used
                s2, i2, t2, states2, obj2 = check(U2)
                if _is_feasible(s2, i2, t2) or max(s2, t2) < max(s_res, t_res):
                    U = U2
                    best = (U.copy(), s2, i2, t2, states2, obj2)
                if _is_feasible(best[1], best[2], best[3]):
                    break
            if rho >= config.penalty_max:
                break
            rho *= config.penalty_growth
        return best

    # near-feasible starting points enter the ladder where constraint
    # curvature already binds and get a small eval budget; cold starts and
    # badly degraded candidates walk the full schedule
    if warm_close:
        best = run_ladder(U0.ravel().copy(),
                          max(config.penalty_init, config.warm_penalty_init),
                          config.warm_max_inner)
        if not _is_feasible(best[1], best[2], best[3]):
            best = run_ladder(U0.ravel().copy(), config.penalty_init,
                              config.max_inner)
    else:
        best = run_ladder(U0.ravel().copy(), config.penalty_init,
                          config.max_inner)

    Uarr, s_res, i_res, t_res, states, obj = best
    feasible = _is_feasible(s_res, i_res, t_res)
    elapsed = time.perf_counter() - t0
    if not feasible and fallback is not None:
        return replace(fallback, iterations=iterations, solve_time=elapsed)
    return MpcSolution(
        U=Uarr.reshape(config.N, m), states=states, objective=obj,
        feasible=feasible, state_residual=s_res, input_residual=i_res,
        terminal_residual=t_res, iterations=iterations, solve_time=elapsed,
        warm_feasible=warm_feasible)


def warm_start_shift(prev: MpcSolution, cert: Certificate, model: SystemModel,
                     spec: SafetySpec, u_max) -> np.ndarray | None:
    """Shifted candidate for the next step: drop the head, append feedback.

    The appended tail input is the certificate feedback at the previous
    predicted terminal state, saturated to the input box as a numerical
    guard (synthesis already bounds it on the verified region).  Returns
    None when the terminal state sits too close to a decoupling singularity
    for the feedback to be trustworthy.
    """
    if not prev.feasible:
        raise ValueError("warm-start shift requires a feasible previous solution")
    x_N = prev.states[-1]
    try:
        u_tail = feedback(cert, model, spec, x_N)
    except SingularityError:
        return None
    u_tail = np.clip(u_tail, -np.asarray(u_max), np.asarray(u_max))
    return np.vstack([prev.U[1:], u_tail[None, :]])


@dataclass
class StepRecord:
    step: int
    feasible: bool
    warm_feasible: bool | None
    state_residual: float
    input_residual: float
    terminal_residual: float
    iterations: int


@dataclass
class Trajectory:
    """Closed-loop log at sampling instants plus dense substep samples."""

    times: np.ndarray        # (K+1,)
    states: np.ndarray       # (K+1, n) at sampling instants
    inputs: np.ndarray       # (K, m) applied ZOH values
    psi: np.ndarray          # (K+1,) psi(h(x)) at sampling instants
    phi: np.ndarray
    Psi: np.ndarray
    feasible: np.ndarray     # (K+1,) step verdicts, last repeats
    dense_states: np.ndarray  # (K*substeps + 1, n)
    dense_psi: np.ndarray

    def to_csv(self, path):
        n = self.states.shape[1]
        m = self.inputs.shape[1] if self.inputs.size else 2
        cols = ["t"] + [f"x{i+1}" for i in range(n)] \
            + [f"u{j+1}" for j in range(m)] + ["psi", "phi", "Psi", "feasible"]
        lines = [",".join(cols)]
        K = len(self.times) - 1
        for k in range(K + 1):
            u = self.inputs[min(k, K - 1)] if K > 0 else np.zeros(m)
            row = [repr(float(self.times[k]))]
            row += [repr(float(v)) for v in self.states[k]]
            row += [repr(float(v)) for v in u]
            row += [repr(float(self.psi[k])), repr(float(self.phi[k])),
                    repr(float(self.Psi[k])), str(int(self.feasible[k]))]
            lines.append(",".join(row))
        with open(path, "w", newline="") as f:
            f.write("\n".join(lines) + "\n")


@dataclass
class RunResult:
    status: str              # success | infeasible | timeout
    tau: float | None        # entry time into the target set
    steps: int
    max_abs_u: float
    trajectory: Trajectory
    log: list = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.status == "success"

    def summary(self) -> dict:
        return {
            "success": self.success,
            "status": self.status,
            "tau": self.tau,
            "steps": self.steps,
            "max_abs_u": self.max_abs_u,
        }


def closed_loop(model: SystemModel, cert: Certificate, spec: SafetySpec,
                config: MpcConfig, x0, max_steps: int) -> RunResult:
    """Receding-horizon run: solve, apply the head input for T, repeat.

    Terminates on target entry (success, entry time recorded), on an
    infeasible step (failure) or after max_steps (timeout).  Initial states
    already inside the target succeed immediately; initial states outside
    the safe set are rejected.
    """
    pk = _packed(cert, model, spec)
    p = pk.pack
    x0 = np.asarray(x0, dtype=float)
    y = np.empty(2)

    def outputs(x):
        kernels.output_k(p.kind, p.params, x, y)
        ps = kernels.poly_val(p.psi_exps, p.psi_coefs, y[0], y[1])
        ph = kernels.poly_val(p.phi_exps, p.phi_coefs, y[0], y[1])
        Pb = kernels.psi_bar_k(p.kind, p.params, p.lam, p.mu, p.k1_exps,
                               p.k1_coefs, p.psi_exps, p.psi_coefs, x)
        return ps, ph, Pb

    ps0, ph0, Pb0 = outputs(x0)
    if ps0 < 0:
        raise ValueError(f"initial state outside the safe set: psi = {ps0:.3g}")

    times = [0.0]
    xs = [x0.copy()]
    us: list = []
    psis, phis, Psis, flags = [ps0], [ph0], [Pb0], []
    dense = [x0[None, :]]
    dense_psi = [np.array([ps0])]
    log: list[StepRecord] = []
    bounds = np.asarray(config.u_max)

    def build(status, tau):
        K = len(us)
        traj = Trajectory(
            times=np.asarray(times), states=np.asarray(xs),
            inputs=np.asarray(us).reshape(K, model.m),
            psi=np.asarray(psis), phi=np.asarray(phis), Psi=np.asarray(Psis),
            feasible=np.asarray(flags + [flags[-1] if flags else True],
                                dtype=bool),
            dense_states=np.vstack(dense), dense_psi=np.concatenate(dense_psi))
        max_u = float(np.max(np.abs(traj.inputs))) if K else 0.0
        return RunResult(status=status, tau=tau, steps=K, max_abs_u=max_u,
                         trajectory=traj, log=log)

    if ph0 < 0:
        return build("success", 0.0)

    x = x0.copy()
    warm = None
    init = None
    for k in range(max_steps):
        sol = solve_step(model, cert, spec, config, x, warm_start=warm,
                         init=init)
        log.append(StepRecord(
            step=k, feasible=sol.feasible, warm_feasible=sol.warm_feasible,
            state_residual=sol.state_residual,
            input_residual=sol.input_residual,
            terminal_residual=sol.terminal_residual,
            iterations=sol.iterations))
        if not sol.feasible:
            return build("infeasible", None)
        # hard saturation on the applied value; bounds must hold exactly
        u = np.clip(sol.U[0], -bounds, bounds)
        seg = kernels.zoh_rollout_k(p.kind, p.params, x, u[None, :],
                                    config.T, config.substeps)
        x = model.wrap_state(seg[-1])
        dense.append(seg[1:])
        seg_psi = np.empty(seg.shape[0] - 1)
        for i in range(1, seg.shape[0]):
            kernels.output_k(p.kind, p.params, seg[i], y)
            seg_psi[i - 1] = kernels.poly_val(p.psi_exps, p.psi_coefs,
                                              y[0], y[1])
        dense_psi.append(seg_psi)
        us.append(u)
        flags.append(True)
        times.append((k + 1) * config.T)
        xs.append(x.copy())
        ps, ph, Pb = outputs(x)
        psis.append(ps)
        phis.append(ph)
        Psis.append(Pb)
        if ph < 0:
            return build("success", (k + 1) * config.T)
        if not model.in_box(x):
            # left the modelled region; constants and claims no longer apply
            return build("diverged", None)
        warm = warm_start_shift(sol, cert, model, spec, config.u_max)
        if warm is not None:
            init = warm.copy()
            init[-1] = improve_tail(pk, config, sol.states[-1], warm[-1])
        else:
            init = None
    return build("timeout", None)
