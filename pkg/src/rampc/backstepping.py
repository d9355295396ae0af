"""Backstepping reach-avoid certificates.

Given a first-level controller k_1(y) with components k_1^i = theta_i' B(y),
the certificate function is

    Psi(x) = psi(y(x)) - sum_i sum_{l=1}^{gamma_i-1} (eta_{l+1}^i - k_l^i)^2 / (2 mu_l^i)

with the higher k_l^i built by an exact polynomial recursion over the
eta-coordinates.  The induced state feedback is u(x) = A(x)^{-1} b(x); b is
affine in the aggregated coefficient matrix Theta, which is what lets input
bounds become linear constraints during synthesis.

Sign conventions follow the recursion as printed: +lambda/2 on the
(eta_l - k_{l-1}) corrections, minus on the mu-ratio coupling, with the
s=1 chain-rule term summed over all output channels.  Validated by the
dPsi/dt >= lambda Psi flow property in the test suite.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .polynomial import BasisSet, Polynomial
from .safety import SafetySpec
from .system import SystemModel, eta

COND_FLOOR = 1e-6


class SingularityError(RuntimeError):
    def __init__(self, det_value: float):
        super().__init__(f"decoupling matrix near singular: det A = {det_value:.3e}")
        self.det_value = det_value


@dataclass(frozen=True)
class BacksteppingParams:
    lam: float
    mu: tuple[tuple[float, ...], ...]  # per channel, levels 1..gamma_i-1

    def __post_init__(self):
        object.__setattr__(self, "mu", tuple(tuple(float(v) for v in ch) for ch in self.mu))
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        for ch in self.mu:
            for v in ch:
                if v <= 0:
                    raise ValueError("all mu weights must be positive")

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "mu": [list(ch) for ch in self.mu]}

    @staticmethod
    def from_dict(d: dict) -> "BacksteppingParams":
        return BacksteppingParams(lam=float(d["lambda"]), mu=tuple(tuple(ch) for ch in d["mu"]))


@dataclass(frozen=True)
class Certificate:
    params: BacksteppingParams
    basis: BasisSet
    theta: tuple[tuple[float, ...], ...]  # per output channel
    delta_star: float
    verification: dict = field(default_factory=dict)
    model_id: str = ""
    spec_hash: str = ""

    def __post_init__(self):
        object.__setattr__(self, "theta", tuple(tuple(float(c) for c in t) for t in self.theta))
        if self.delta_star < 0:
            raise ValueError("delta_star must be non-negative")
        for t in self.theta:
            if len(t) != len(self.basis):
                raise ValueError("theta length does not match basis size")

    def theta_array(self, i: int) -> np.ndarray:
        return np.asarray(self.theta[i], dtype=float)

    def theta_stack(self) -> np.ndarray:
        return np.concatenate([self.theta_array(i) for i in range(len(self.theta))])

    def k1_poly(self, i: int) -> Polynomial:
        return self.basis.combine(self.theta[i])

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "basis": self.basis.to_dict(),
            "theta": [list(t) for t in self.theta],
            "delta_star": self.delta_star,
            "verification": self.verification,
            "model_id": self.model_id,
            "spec_hash": self.spec_hash,
            "tool_version": "0.1.0",
        }

    @staticmethod
    def from_dict(d: dict) -> "Certificate":
        return Certificate(
            params=BacksteppingParams.from_dict(d["params"]),
            basis=BasisSet.from_dict(d["basis"]),
            theta=tuple(tuple(t) for t in d["theta"]),
            delta_star=float(d["delta_star"]),
            verification=d.get("verification", {}),
            model_id=d.get("model_id", ""),
            spec_hash=d.get("spec_hash", ""),
        )


def spec_hash(spec: SafetySpec) -> str:
    return hashlib.sha256(json.dumps(spec.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# -- eta-space polynomial algebra ------------------------------------------------

def eta_variable_names(gamma: tuple[int, ...]) -> tuple[str, ...]:
    m = len(gamma)
    names = [f"y{i+1}" for i in range(m)]
    for l in range(2, max(gamma) + 1):
        for i in range(m):
            if gamma[i] >= l:
                names.append(f"eta{l}_{i+1}")
    return tuple(names)


def eta_flat_values(model: SystemModel, x) -> np.ndarray:
    """Values of the eta variables at x, ordered like eta_variable_names."""
    e = eta(model, x)
    vals = [e.channels[i][0] for i in range(model.m)]
    for l in range(2, max(model.gamma) + 1):
        for i in range(model.m):
            if model.gamma[i] >= l:
                vals.append(e.channels[i][l - 1])
    return np.asarray(vals, dtype=float)


def _successor(name: str, gamma) -> str | None:
    if name.startswith("y"):
        i = int(name[1:])
        return f"eta2_{i}" if gamma[i - 1] >= 2 else None
    l_str, i_str = name[3:].split("_")
    l, i = int(l_str), int(i_str)
    return f"eta{l+1}_{i}" if gamma[i - 1] >= l + 1 else None


def drift_derivative(p: Polynomial, gamma) -> Polynomial:
    """D(p): formal time derivative using eta_l' = eta_{l+1}, inputs excluded.

    Errors if p depends on a top-of-chain variable (its derivative would
    involve the input).
    """
    out = Polynomial.zero(p.variables)
    for v in p.variables:
        dp = p.partial(v)
        if dp.is_zero():
            continue
        succ = _successor(v, gamma)
        if succ is None:
            raise ValueError(f"drift derivative would differentiate top-level variable {v}")
        out = out + dp * Polynomial.var(p.variables, succ)
    return out


def _lift(p: Polynomial, ext_vars) -> Polynomial:
    return Polynomial.zero(ext_vars) + p


def _chain_polys(params: BacksteppingParams, psi: Polynomial, gamma,
                 k1: list[Polynomial]):
    """k_l^i polynomials (l = 1..gamma_i-1) and the b-tail polynomial per channel.

    b_tail_i is b_i + L_f^{gamma_i} y_i, i.e. the part of Eq-(7)'s b that is a
    polynomial in the eta coordinates.
    """
    ext = eta_variable_names(gamma)
    m = len(gamma)
    lam = params.lam

    def ev(name):
        return Polynomial.var(ext, name)

    chains, tails = [], []
    for i in range(m):
        gi = gamma[i]
        ks = [_lift(k1[i], ext)]

        def extend(l):
            # next element of the recursion: k_l for l < gamma_i, b-tail at l = gamma_i
            prev = ks[l - 2]
            out = drift_derivative(prev, gamma) + 0.5 * lam * (ev(f"eta{l}_{i+1}") - prev)
            if l == 2:
                out = out + params.mu[i][0] * _lift(psi.partial(f"y{i+1}"), ext)
            else:
                ratio = params.mu[i][l - 2] / params.mu[i][l - 3]
                out = out - ratio * (ev(f"eta{l-1}_{i+1}") - ks[l - 3])
            return out

        for l in range(2, gi):
            ks.append(extend(l))
        chains.append(ks)
        tails.append(extend(gi) if gi >= 2 else None)
    return ext, chains, tails


_CACHE: dict = {}


def _cached_chain(params, psi, gamma, theta, basis):
    key = (params, psi, gamma, theta, basis)
    hit = _CACHE.get(key)
    if hit is None:
        k1 = [basis.combine(t) for t in theta]
        hit = _chain_polys(params, psi, gamma, k1)
        if len(_CACHE) > 64:
            _CACHE.clear()
        _CACHE[key] = hit
    return hit


@dataclass(frozen=True)
class KChainValues:
    """Numeric k_l^i values and their partials w.r.t. the eta variables."""

    variables: tuple[str, ...]
    values: tuple[tuple[float, ...], ...]  # per channel, l = 1..gamma_i-1
    partials: tuple[np.ndarray, ...]  # per channel, shape (gamma_i-1, n_eta_vars)


def k_chain(cert: Certificate, model: SystemModel, spec: SafetySpec, x) -> KChainValues:
    ext, chains, _ = _cached_chain(cert.params, spec.psi, model.gamma, cert.theta, cert.basis)
    z = eta_flat_values(model, x)
    vals, parts = [], []
    for ks in chains:
        vals.append(tuple(p.eval(z) for p in ks))
        parts.append(np.array([[p.partial(v).eval(z) for v in ext] for p in ks]))
    return KChainValues(ext, tuple(vals), tuple(parts))


def psi_bar(cert: Certificate, model: SystemModel, spec: SafetySpec, x) -> float:
    ext, chains, _ = _cached_chain(cert.params, spec.psi, model.gamma, cert.theta, cert.basis)
    e = eta(model, x)
    z = eta_flat_values(model, x)
    total = spec.psi.eval(model.h(np.asarray(x, dtype=float)))
    for i in range(model.m):
        for l in range(1, model.gamma[i]):
            err = e.channels[i][l] - chains[i][l - 1].eval(z)
            total -= err * err / (2.0 * cert.params.mu[i][l - 1])
    return total


def _b_vector(cert: Certificate, model: SystemModel, spec: SafetySpec, x) -> np.ndarray:
    _, _, tails = _cached_chain(cert.params, spec.psi, model.gamma, cert.theta, cert.basis)
    z = eta_flat_values(model, x)
    x = np.asarray(x, dtype=float)
    return np.array([tails[i].eval(z) - model.lf_y(x, i, model.gamma[i])
                     for i in range(model.m)])


def feedback(cert: Certificate, model: SystemModel, spec: SafetySpec, x,
             cond_floor: float = COND_FLOOR) -> np.ndarray:
    """Reach-avoid state feedback u(x) = A(x)^{-1} b(x)."""
    x = np.asarray(x, dtype=float)
    A = model.lg_lf_y(x)
    det = float(np.linalg.det(A))
    if abs(det) < cond_floor:
        raise SingularityError(det)
    return np.linalg.solve(A, _b_vector(cert, model, spec, x))


@dataclass(frozen=True)
class AffineControlDecomposition:
    """b(x) = U(x) Theta + V(x) with U block-diagonal of per-channel rows."""

    U: np.ndarray  # (m, m*|basis|)
    V: np.ndarray  # (m,)
    A: np.ndarray  # (m, m)

    def control(self, theta_stack: np.ndarray) -> np.ndarray:
        return np.linalg.solve(self.A, self.U @ theta_stack + self.V)


def _gh_polys(params: BacksteppingParams, psi: Polynomial, gamma, basis: BasisSet):
    """Symbolic-Theta route: per channel, basis-coefficient vector polynomials G
    and intercept polynomial H with b_tail_i = theta_i' G + H."""
    ext = eta_variable_names(gamma)
    m = len(gamma)
    lam = params.lam
    B = [_lift(p, ext) for p in basis.polynomials()]

    def ev(name):
        return Polynomial.var(ext, name)

    out = []
    for i in range(m):
        gi = gamma[i]
        Gs = [list(B)]
        Hs = [Polynomial.zero(ext)]
        for l in range(2, gi + 1):
            Gprev, Hprev = Gs[l - 2], Hs[l - 2]
            Gl = [drift_derivative(g, gamma) - 0.5 * lam * g for g in Gprev]
            Hl = drift_derivative(Hprev, gamma) + 0.5 * lam * (ev(f"eta{l}_{i+1}") - Hprev)
            if l == 2:
                Hl = Hl + params.mu[i][0] * _lift(psi.partial(f"y{i+1}"), ext)
            else:
                ratio = params.mu[i][l - 2] / params.mu[i][l - 3]
                Gl = [gl + ratio * gp for gl, gp in zip(Gl, Gs[l - 3])]
                Hl = Hl - ratio * (ev(f"eta{l-1}_{i+1}") - Hs[l - 3])
            Gs.append(Gl)
            Hs.append(Hl)
        out.append((Gs[gi - 1], Hs[gi - 1]))
    return ext, out


_GH_CACHE: dict = {}


def _cached_gh(params, psi, gamma, basis):
    key = (params, psi, gamma, basis)
    hit = _GH_CACHE.get(key)
    if hit is None:
        hit = _gh_polys(params, psi, gamma, basis)
        if len(_GH_CACHE) > 64:
            _GH_CACHE.clear()
        _GH_CACHE[key] = hit
    return hit


def affine_decompose(params: BacksteppingParams, basis: BasisSet, model: SystemModel,
                     spec: SafetySpec, x, cond_floor: float = COND_FLOOR) -> AffineControlDecomposition:
    x = np.asarray(x, dtype=float)
    A = model.lg_lf_y(x)
    det = float(np.linalg.det(A))
    if abs(det) < cond_floor:
        raise SingularityError(det)
    ext, gh = _cached_gh(params, psi=spec.psi, gamma=model.gamma, basis=basis)
    z = eta_flat_values(model, x)
    m = model.m
    nb = len(basis)
    U = np.zeros((m, m * nb))
    V = np.zeros(m)
    for i in range(m):
        Gs, Hs = gh[i]
        U[i, i * nb:(i + 1) * nb] = [g.eval(z) for g in Gs]
        V[i] = Hs.eval(z) - model.lf_y(x, i, model.gamma[i])
    return AffineControlDecomposition(U=U, V=V, A=A)
