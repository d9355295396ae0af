"""Sampled-data constants, drift bound, and the admissible period T*.

Zero-order hold freezes the feedback between samples, so the executed loop
drifts from the continuous-time design.  The drift over one period T obeys

    ||x(t) - x(t_k)|| <= (e^{l_sys T} - 1) / l_sys * ||xdot(t_k)||,

a Gronwall bound whose constants (Lipschitz and magnitude bounds over the
operating region) this module estimates by sampling, inflated by a reported
safety factor.  From those constants it evaluates the decrease-rate budget
beta(T) and picks the largest period T* for which a chosen certificate
shell {Psi >= psi_floor} survives the worst-case drift.  check_gronwall
replays the inequality on concrete frozen-input flows; it is the
falsification test for bad constant estimates.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .backstepping import Certificate, feedback, psi_bar
from .safety import SafetySpec
from .system import SystemModel, integrate

SAFETY_FACTOR = 1.2
PSI_FLOOR_FRAC = 0.05
FD_EPS = 1e-6
T_CAP = 1e3  # returned when beta stays below budget for every period


@dataclass(frozen=True)
class SamplingBoundReport:
    """Regional constants plus the derived period bound.

    l_f and l_g are Lipschitz estimates of the drift and input fields;
    M_g bounds |dPsi/dx . g_j|; M_u bounds the feedback magnitude per
    channel; l_sys = l_f + sum_j l_g[j] M_u[j] is the closed-loop rate in
    the Gronwall bound.  psi_margin is the smallest Psi seen inside the
    {Psi >= psi_floor} shell, psi_max the regional maximum, xdot_max the
    (inflated) speed bound that replaces ||xdot(t_k)|| in beta.
    """

    l_f: float
    l_g: tuple[float, ...]
    M_g: tuple[float, ...]
    M_u: tuple[float, ...]
    l_sys: float
    psi_margin: float
    psi_floor: float
    psi_max: float
    xdot_max: float
    T_star: float
    safety_factor: float
    samples: int
    seed: int
    region: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if self.l_f < 0 or any(v < 0 for v in self.l_g):
            raise ValueError("Lipschitz estimates must be non-negative")
        if any(v <= 0 for v in self.M_g) or any(v <= 0 for v in self.M_u):
            raise ValueError("magnitude bounds must be positive")
        if self.safety_factor < 1.0:
            raise ValueError("safety factor below 1 would not give upper bounds")
        if self.psi_margin > 0 and not self.T_star > 0:
            raise ValueError("positive shell margin must yield a positive T_star")

    def to_dict(self) -> dict:
        return {
            "l_f": self.l_f, "l_g": list(self.l_g), "M_g": list(self.M_g),
            "M_u": list(self.M_u), "l_sys": self.l_sys,
            "psi_margin": self.psi_margin, "psi_floor": self.psi_floor,
            "psi_max": self.psi_max, "xdot_max": self.xdot_max,
            "T_star": self.T_star, "safety_factor": self.safety_factor,
            "samples": self.samples, "seed": self.seed,
            "region": [list(r) for r in self.region],
        }

    @staticmethod
    def from_dict(d: dict) -> "SamplingBoundReport":
        return SamplingBoundReport(
            l_f=float(d["l_f"]), l_g=tuple(d["l_g"]), M_g=tuple(d["M_g"]),
            M_u=tuple(d["M_u"]), l_sys=float(d["l_sys"]),
            psi_margin=float(d["psi_margin"]), psi_floor=float(d["psi_floor"]),
            psi_max=float(d["psi_max"]), xdot_max=float(d["xdot_max"]),
            T_star=float(d["T_star"]), safety_factor=float(d["safety_factor"]),
            samples=int(d["samples"]), seed=int(d["seed"]),
            region=tuple(tuple(r) for r in d["region"]),
        )


def _fd_jacobian(fun, x, dim_out):
    """Central-difference Jacobian of fun: R^n -> R^dim_out."""
    n = len(x)
    J = np.empty((dim_out, n))
    for k in range(n):
        hk = FD_EPS * (1.0 + abs(x[k]))
        xp, xm = x.copy(), x.copy()
        xp[k] += hk
        xm[k] -= hk
        J[:, k] = (np.asarray(fun(xp)) - np.asarray(fun(xm))) / (2.0 * hk)
    return J


def _region_points(model: SystemModel, region, samples: int, seed: int):
    """Fixed state-box cloud filtered to the region.

    Sampling the box once and filtering (rather than sampling each region
    directly) makes every estimate monotone under region inclusion: a
    sub-region sees a subset of the points, so its maxima cannot exceed
    the enclosing region's.
    """
    box = model.state_box
    if region is None:
        region = box
    region = np.asarray(region, dtype=float)
    if region.shape != box.shape:
        raise ValueError("region must be an (n, 2) box")
    if np.any(region[:, 0] < box[:, 0] - 1e-12) or np.any(region[:, 1] > box[:, 1] + 1e-12):
        raise ValueError("region must lie inside the model state box")
    rng = np.random.default_rng(seed)
    X = rng.uniform(box[:, 0], box[:, 1], size=(samples, model.n))
    keep = np.all((X >= region[:, 0]) & (X <= region[:, 1]), axis=1)
    X = X[keep]
    if len(X) < 100:
        raise ValueError(f"region retains only {len(X)} of {samples} box samples; "
                         "increase samples or enlarge the region")
    return X, region


def estimate_constants(model: SystemModel, cert: Certificate, spec: SafetySpec,
                       region=None, samples: int = 4000, seed: int = 0,
                       safety_factor: float = SAFETY_FACTOR) -> SamplingBoundReport:
    """Sampled maxima of the drift constants over the region, inflated by
    safety_factor.  T_star is left at 0; compute_T_star fills it in."""
    if samples < 1000:
        raise ValueError("need at least 1000 samples for the constant estimates")
    X, region = _region_points(model, region, samples, seed)
    m = model.m

    lf = 0.0
    lg = np.zeros(m)
    Mg = np.zeros(m)
    Mu = np.zeros(m)
    xdot_max = 0.0
    psis = np.empty(len(X))
    for idx, x in enumerate(X):
        Jf = _fd_jacobian(model.f, x, model.n)
        lf = max(lf, np.linalg.norm(Jf, 2))
        Gx = model.g(x)
        for j in range(m):
            Jg = _fd_jacobian(lambda z, j=j: model.g(z)[:, j], x, model.n)
            lg[j] = max(lg[j], np.linalg.norm(Jg, 2))
        u = feedback(cert, model, spec, x)
        dpsi = _fd_jacobian(lambda z: [psi_bar(cert, model, spec, z)], x, 1)[0]
        for j in range(m):
            Mg[j] = max(Mg[j], abs(float(dpsi @ Gx[:, j])))
            Mu[j] = max(Mu[j], abs(float(u[j])))
        xdot_max = max(xdot_max, float(np.linalg.norm(model.xdot(x, u))))
        psis[idx] = psi_bar(cert, model, spec, x)
    if not (np.isfinite(psis).all() and np.isfinite(lf) and np.isfinite(xdot_max)
            and np.isfinite(lg).all() and np.isfinite(Mg).all() and np.isfinite(Mu).all()):
        raise RuntimeError("non-finite evaluation inside the region")

    sf = safety_factor
    lg = tuple(float(sf * v) for v in lg)
    Mu_t = tuple(float(sf * v) for v in Mu)
    psi_max = float(psis.max())
    psi_floor = PSI_FLOOR_FRAC * max(psi_max, 0.0)
    shell = psis[psis >= psi_floor] if psi_floor > 0 else np.array([])
    return SamplingBoundReport(
        l_f=float(sf * lf), l_g=lg, M_g=tuple(float(sf * v) for v in Mg),
        M_u=Mu_t, l_sys=float(sf * lf + sum(a * b for a, b in zip(lg, Mu_t))),
        psi_margin=float(shell.min()) if len(shell) else 0.0,
        psi_floor=psi_floor, psi_max=psi_max, xdot_max=float(sf * xdot_max),
        T_star=0.0, safety_factor=sf, samples=samples, seed=seed,
        region=tuple((float(lo), float(hi)) for lo, hi in region),
    )


def _growth(l_sys: float, T: float) -> float:
    # (e^{lT} - 1)/l, continuous at l = 0 where it equals T
    if l_sys * T < 1e-12:
        return T
    return float(np.expm1(l_sys * T) / l_sys)


def beta(report: SamplingBoundReport, T: float, xdot_norm: float) -> float:
    """Decrease-rate drift budget over one period of length T."""
    if T < 0:
        raise ValueError("T must be non-negative")
    gain = sum(a * b for a, b in zip(report.M_g, report.M_u))
    return gain * _growth(report.l_sys, T) * xdot_norm


def compute_T_star(report: SamplingBoundReport, cert: Certificate) -> SamplingBoundReport:
    """Largest T with beta(T)/lambda < psi_floor, by bisection to 1e-6 relative.

    The budget beta is zero at T=0 and strictly increasing, so the shell
    {Psi >= psi_floor} absorbs the drift for every period below the
    returned value.  Returns a copy of the report with T_star set.
    """
    if report.psi_floor <= 0:
        raise ValueError("shell touches the Psi=0 boundary; shrink the region")
    target = cert.params.lam * report.psi_floor
    hi = 1e-3
    while beta(report, hi, report.xdot_max) < target:
        hi *= 2.0
        if hi >= T_CAP:
            return replace(report, T_star=T_CAP)
    lo = 0.0
    while hi - lo > 1e-6 * hi:
        mid = 0.5 * (lo + hi)
        if beta(report, mid, report.xdot_max) < target:
            lo = mid
        else:
            hi = mid
    return replace(report, T_star=lo)


@dataclass(frozen=True)
class GronwallCheck:
    lhs: float
    rhs: float
    passed: bool
    in_region: bool  # False marks the check inconclusive (flow left the region)


def check_gronwall(model: SystemModel, u_const, x0, T: float,
                   report: SamplingBoundReport, substeps: int = 64) -> GronwallCheck:
    """Replay the drift bound on one frozen-input flow over [0, T]."""
    x0 = np.asarray(x0, dtype=float)
    u_const = np.asarray(u_const, dtype=float)
    seg = integrate(model, x0, u_const[None, :], dt=T, substeps=substeps)
    region = np.asarray(report.region)
    inside = seg.ok and bool(np.all(seg.states >= region[:, 0] - 1e-9)
                             and np.all(seg.states <= region[:, 1] + 1e-9))
    drift = float(np.max(np.linalg.norm(seg.states - x0, axis=1)))
    rhs = _growth(report.l_sys, T) * float(np.linalg.norm(model.xdot(x0, u_const)))
    return GronwallCheck(lhs=drift, rhs=rhs, passed=bool(drift <= rhs), in_region=inside)


def sample_shell(model: SystemModel, cert: Certificate, spec: SafetySpec,
                 count: int, seed: int, psi_floor: float,
                 exclude_target: bool = True, max_tries: int = 400000):
    """Rejection-sample states with Psi >= psi_floor (optionally outside the
    target set), uniform over the state box."""
    rng = np.random.default_rng(seed)
    box = model.state_box
    out = []
    for _ in range(max_tries):
        x = rng.uniform(box[:, 0], box[:, 1])
        if psi_bar(cert, model, spec, x) < psi_floor:
            continue
        if exclude_target and spec.phi.eval(model.h(x)) < 0:
            continue
        out.append(x)
        if len(out) == count:
            return np.array(out)
    raise RuntimeError(f"could not find {count} shell states in {max_tries} draws; "
                       f"the shell at psi_floor={psi_floor:.3g} may be too thin")
