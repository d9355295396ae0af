"""Control-affine system models: dynamics, output maps, Lie derivatives.

Models are square (m inputs, m outputs) with vector relative degree
gamma = (gamma_1..gamma_m): each output must be differentiated gamma_i
times along f before any input appears.  The decoupling matrix
A(x)[i,j] = L_gj L_f^{gamma_i-1} y_i(x) couples inputs to the top
derivative of each output chain.

Lie derivatives are closed-form per model, not autodiff; the two built-in
benchmarks (Dubins car, two-link planar arm) have short exact chains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

KIND_DUBINS = 0
KIND_ARM = 1


@dataclass(frozen=True)
class SystemModel:
    name: str
    kind: int
    n: int
    m: int
    gamma: tuple[int, ...]
    state_box: np.ndarray  # (n, 2) lo/hi
    params: np.ndarray  # packed model constants for kernel dispatch
    f: Callable[[np.ndarray], np.ndarray] = field(repr=False, default=None)
    g: Callable[[np.ndarray], np.ndarray] = field(repr=False, default=None)  # (n, m)
    h: Callable[[np.ndarray], np.ndarray] = field(repr=False, default=None)
    lf_y: Callable[[np.ndarray, int, int], float] = field(repr=False, default=None)
    lg_lf_y: Callable[[np.ndarray], np.ndarray] = field(repr=False, default=None)

    def in_box(self, x) -> bool:
        return bool(np.all(x >= self.state_box[:, 0]) and np.all(x <= self.state_box[:, 1]))

    def wrap_state(self, x) -> np.ndarray:
        """Fold angular coordinates back into their principal range.

        The heading of the planar vehicle is periodic and every model and
        certificate quantity enters through its sine/cosine, so folding is
        exact; the arm keeps its joint range as-is because the restricted
        q2 interval is what keeps the kinematic Jacobian invertible.
        """
        if self.kind == KIND_DUBINS:
            x = np.array(x, dtype=float)
            x[2] = (x[2] + math.pi) % (2.0 * math.pi) - math.pi
        return x

    def xdot(self, x, u) -> np.ndarray:
        return self.f(x) + self.g(x) @ u


@dataclass(frozen=True)
class EtaCoordinates:
    """Per-channel eta^i = (y_i, L_f y_i, ..., L_f^{gamma_i-1} y_i) at a state."""

    channels: tuple[np.ndarray, ...]

    def flat(self) -> np.ndarray:
        return np.concatenate(self.channels)


@dataclass
class Segment:
    """RK4 integration record: states at every substep boundary."""

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray  # input applied during [t_k, t_{k+1}), per substep row
    ok: bool
    note: str = ""

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def decoupling_matrix(model: SystemModel, x) -> np.ndarray:
    return model.lg_lf_y(np.asarray(x, dtype=float))


def eta(model: SystemModel, x) -> EtaCoordinates:
    x = np.asarray(x, dtype=float)
    chans = []
    for i in range(model.m):
        chans.append(np.array([model.lf_y(x, i, r) for r in range(model.gamma[i])]))
    return EtaCoordinates(tuple(chans))


def _rk4_step(model: SystemModel, x, u, dt):
    k1 = model.xdot(x, u)
    k2 = model.xdot(x + 0.5 * dt * k1, u)
    k3 = model.xdot(x + 0.5 * dt * k2, u)
    k4 = model.xdot(x + dt * k3, u)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(model: SystemModel, x0, u_schedule, dt: float, substeps: int = 10) -> Segment:
    """Propagate piecewise-constant inputs with classical RK4.

    u_schedule: (K, m) array, one row held over each interval of length dt.
    Records the state at every substep boundary (K*substeps + 1 points).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    u_schedule = np.atleast_2d(np.asarray(u_schedule, dtype=float))
    K = u_schedule.shape[0]
    x = np.asarray(x0, dtype=float).copy()
    hsub = dt / substeps
    times = np.empty(K * substeps + 1)
    states = np.empty((K * substeps + 1, model.n))
    inputs = np.empty((K * substeps, model.m))
    times[0] = 0.0
    states[0] = x
    idx = 1
    for k in range(K):
        u = u_schedule[k]
        for s in range(substeps):
            x = _rk4_step(model, x, u, hsub)
            if not np.all(np.isfinite(x)):
                return Segment(times[:idx], states[:idx], inputs[: idx - 1], ok=False,
                               note="non-finite state during integration")
            times[idx] = (k * substeps + s + 1) * hsub
            states[idx] = x
            inputs[idx - 1] = u
            idx += 1
    return Segment(times, states, inputs, ok=True)


# -- Dubins car ----------------------------------------------------------------
# state (x1, x2, theta, v), inputs (omega, a), outputs (x1, x2)
# x1' = v cos th, x2' = v sin th, th' = omega, v' = a

def dubins_model(state_box=None, v_min: float = 0.1, v_max: float = 2.0) -> SystemModel:
    if state_box is None:
        state_box = np.array([[-2.2, 2.2], [-2.2, 2.2], [-np.pi, np.pi], [v_min, v_max]])
    else:
        state_box = np.asarray(state_box, dtype=float)

    def f(x):
        th, v = x[2], x[3]
        return np.array([v * math.cos(th), v * math.sin(th), 0.0, 0.0])

    def g(x):
        out = np.zeros((4, 2))
        out[2, 0] = 1.0  # omega enters theta
        out[3, 1] = 1.0  # a enters v
        return out

    def h(x):
        return np.array([x[0], x[1]])

    def lf_y(x, i, r):
        th, v = x[2], x[3]
        if r == 0:
            return x[i]
        if r == 1:
            return v * math.cos(th) if i == 0 else v * math.sin(th)
        if r == 2:
            return 0.0  # grad(v cos th) has no (x1,x2) part and f has no (th,v) part
        raise ValueError(f"r={r} beyond relative degree")

    def lg_lf_y(x):
        th, v = x[2], x[3]
        # rows: outputs, cols: (omega, a)
        return np.array([[-v * math.sin(th), math.cos(th)],
                         [v * math.cos(th), math.sin(th)]])

    return SystemModel(
        name="dubins", kind=KIND_DUBINS, n=4, m=2, gamma=(2, 2),
        state_box=state_box, params=np.zeros(1),
        f=f, g=g, h=h, lf_y=lf_y, lg_lf_y=lg_lf_y,
    )


# -- Two-link planar arm -------------------------------------------------------
# state (q1, q2, qd1, qd2), inputs (tau1, tau2), outputs = end-effector position

@dataclass(frozen=True)
class ArmParams:
    m1: float = 0.25
    m2: float = 0.25
    l1: float = 4.0
    l2: float = 4.0
    lc1: float = 2.0
    lc2: float = 2.0
    I1: float = 0.25 * 16.0 / 12.0
    I2: float = 0.25 * 16.0 / 12.0
    grav: float = 9.81

    def packed(self) -> np.ndarray:
        return np.array([self.m1, self.m2, self.l1, self.l2, self.lc1, self.lc2,
                         self.I1, self.I2, self.grav])


def _arm_mats(p: ArmParams, x):
    q2 = x[1]
    c2 = math.cos(q2)
    M11 = p.I1 + p.I2 + p.m2 * (p.l1 ** 2 + p.lc2 ** 2 + 2 * p.l1 * p.lc2 * c2) + p.m1 * p.lc1 ** 2
    M12 = p.I2 + p.m2 * (p.lc2 ** 2 + p.l1 * p.lc2 * c2)
    M22 = p.m2 * p.lc2 ** 2 + p.I2
    M = np.array([[M11, M12], [M12, M22]])
    return M


def _arm_cvec(p: ArmParams, x):
    q2, qd1, qd2 = x[1], x[2], x[3]
    k = p.m2 * p.l1 * p.lc2 * math.sin(q2)
    return np.array([-k * (2 * qd1 * qd2 + qd2 ** 2), k * qd1 ** 2])


def _arm_gvec(p: ArmParams, x):
    q1, q2 = x[0], x[1]
    return np.array([
        (p.m1 * p.grav * p.lc1 + p.m2 * p.grav * p.l1) * math.cos(q1)
        + p.m2 * p.grav * p.lc2 * math.cos(q1 + q2),
        p.m2 * p.grav * p.lc2 * math.cos(q1 + q2),
    ])


def _arm_jac(p: ArmParams, x):
    q1, q2 = x[0], x[1]
    s1, c1 = math.sin(q1), math.cos(q1)
    s12, c12 = math.sin(q1 + q2), math.cos(q1 + q2)
    return np.array([[-p.l1 * s1 - p.l2 * s12, -p.l2 * s12],
                     [p.l1 * c1 + p.l2 * c12, p.l2 * c12]])


def _arm_jacdot(p: ArmParams, x):
    q1, q2, qd1, qd2 = x
    s1, c1 = math.sin(q1), math.cos(q1)
    s12, c12 = math.sin(q1 + q2), math.cos(q1 + q2)
    w = qd1 + qd2
    return np.array([[-p.l1 * c1 * qd1 - p.l2 * c12 * w, -p.l2 * c12 * w],
                     [-p.l1 * s1 * qd1 - p.l2 * s12 * w, -p.l2 * s12 * w]])


def arm2link_model(params: ArmParams = None, state_box=None) -> SystemModel:
    p = params or ArmParams()
    for nm in ("m1", "m2", "l1", "l2", "lc1", "lc2", "I1", "I2"):
        if getattr(p, nm) <= 0:
            raise ValueError(f"link parameter {nm} must be positive")
    if state_box is None:
        # q2 range keeps |sin q2| >= 0.05 so the kinematic Jacobian stays invertible
        state_box = np.array([[-1.5, 0.8], [0.6, 2.95], [-1.5, 1.5], [-1.5, 1.5]])
    else:
        state_box = np.asarray(state_box, dtype=float)

    def accel(x):
        M = _arm_mats(p, x)
        return np.linalg.solve(M, -_arm_cvec(p, x) - _arm_gvec(p, x))

    def f(x):
        a = accel(x)
        return np.array([x[2], x[3], a[0], a[1]])

    def g(x):
        Minv = np.linalg.inv(_arm_mats(p, x))
        out = np.zeros((4, 2))
        out[2:, :] = Minv
        return out

    def h(x):
        q1, q2 = x[0], x[1]
        return np.array([p.l1 * math.cos(q1) + p.l2 * math.cos(q1 + q2),
                         p.l1 * math.sin(q1) + p.l2 * math.sin(q1 + q2)])

    def lf_y(x, i, r):
        if r == 0:
            return h(x)[i]
        J = _arm_jac(p, x)
        qd = x[2:]
        if r == 1:
            return float(J[i] @ qd)
        if r == 2:
            return float(_arm_jacdot(p, x)[i] @ qd + J[i] @ accel(x))
        raise ValueError(f"r={r} beyond relative degree")

    def lg_lf_y(x):
        J = _arm_jac(p, x)
        Minv = np.linalg.inv(_arm_mats(p, x))
        return J @ Minv

    return SystemModel(
        name="arm2link", kind=KIND_ARM, n=4, m=2, gamma=(2, 2),
        state_box=state_box, params=p.packed(),
        f=f, g=g, h=h, lf_y=lf_y, lg_lf_y=lg_lf_y,
    )


def arm_ik(p: ArmParams, y, elbow_up: bool = True):
    """Joint angles reaching end-effector position y; None if out of reach."""
    r2 = y[0] ** 2 + y[1] ** 2
    c2 = (r2 - p.l1 ** 2 - p.l2 ** 2) / (2 * p.l1 * p.l2)
    if abs(c2) > 1.0:
        return None
    q2 = math.acos(c2) if elbow_up else -math.acos(c2)
    q1 = math.atan2(y[1], y[0]) - math.atan2(p.l2 * math.sin(q2), p.l1 + p.l2 * math.cos(q2))
    return np.array([q1, q2])


def builtin_models() -> dict:
    return {"dubins": dubins_model(), "arm2link": arm2link_model()}


def model_from_config(cfg: dict) -> SystemModel:
    """Build a model from the experiment-config model section."""
    mid = cfg["id"]
    box = np.asarray(cfg["state_box"], dtype=float) if "state_box" in cfg else None
    if mid == "dubins":
        return dubins_model(state_box=box)
    if mid == "arm2link":
        params = ArmParams(**cfg.get("params", {}))
        return arm2link_model(params=params, state_box=box)
    raise ValueError(f"unknown model id {mid!r}")
