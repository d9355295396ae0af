"""Sampled linear-constraint synthesis of the certificate coefficients Theta.

The sum-of-squares conditions are relaxed to linear constraints at sampled
points of closure(X_S \\ X_T) = {psi >= 0, phi >= 0}:

  (a) grad-psi(y_j)' k_1(y_j) >= lambda psi(y_j) - delta + margin
  (b) P(x_j) A(x_j)^{-1} (U(x_j) Theta + V(x_j)) <= Q(x_j)
  (c) delta >= 0,   objective: min delta

Input bounds use A^{-1} directly rather than the adjugate/determinant form:
multiplying through by det(A) flips the inequality wherever det(A) < 0
(Dubins: det A = -v), so the inverse form is the safe one.

A certificate is accepted only if delta* <= 1e-6 AND an a-posteriori dense
grid verification passes; sampling alone under-constrains.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .backstepping import (COND_FLOOR, AffineControlDecomposition, BacksteppingParams,
                           Certificate, affine_decompose, feedback, spec_hash)
from .polynomial import BasisSet
from .safety import SafetySpec
from .simplex import solve_inequality
from .system import SystemModel

ACCEPT_DELTA = 1e-6
DEFAULT_MARGIN = 1e-4
LAMBDA_LADDER = (1.0, 0.25, 0.5, 2.0)  # multipliers on the requested rate


class RegionTooThinError(RuntimeError):
    pass


class SynthesisInfeasibleError(RuntimeError):
    def __init__(self, msg: str, most_violated=None):
        super().__init__(msg)
        self.most_violated = most_violated


@dataclass(frozen=True)
class InputConstraintSet:
    """State-dependent linear input constraints P(x) u <= Q(x)."""

    n_rows: int
    label: str = "box"
    u_max: tuple[float, ...] | None = None

    @staticmethod
    def box(u_max) -> "InputConstraintSet":
        u_max = tuple(float(v) for v in u_max)
        return InputConstraintSet(n_rows=2 * len(u_max), label="box", u_max=u_max)

    def eval(self, x) -> tuple[np.ndarray, np.ndarray]:
        if self.label != "box":
            raise NotImplementedError(self.label)
        m = len(self.u_max)
        P = np.vstack([np.eye(m), -np.eye(m)])
        Q = np.concatenate([self.u_max, self.u_max])
        return P, Q


@dataclass
class SynthesisProblem:
    model: SystemModel
    spec: SafetySpec
    basis: BasisSet
    params: BacksteppingParams
    input_constraints: InputConstraintSet | None
    ecgbf_samples: np.ndarray  # (na, m) output points
    input_samples: np.ndarray  # (nbx, n) states
    margin: float = DEFAULT_MARGIN
    input_margin: float = 0.0  # robustness buffer against between-sample excursions
    margin_mode: str = "uniform"  # "gradient" scales margin by 1+|grad psi|
    margin_slope: float = 0.0  # "affine" mode: clearance = margin + slope*|grad psi|
    k1_cap: float | None = None  # bound |k1_i| at sampled outputs; tames boundary blowup
    cond_floor: float = COND_FLOOR
    lp_settings: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ecgbf_samples = np.atleast_2d(np.asarray(self.ecgbf_samples, dtype=float)) \
            if np.size(self.ecgbf_samples) else np.zeros((0, self.model.m))
        self.input_samples = np.atleast_2d(np.asarray(self.input_samples, dtype=float)) \
            if np.size(self.input_samples) else np.zeros((0, self.model.n))
        for y in self.ecgbf_samples:
            if self.spec.psi.eval(y) < 0 or self.spec.phi.eval(y) < 0:
                raise ValueError(f"ecgbf sample outside closure(X_S \\ X_T): {y}")
        for x in self.input_samples:
            if abs(np.linalg.det(self.model.lg_lf_y(x))) < self.cond_floor:
                raise ValueError(f"input sample too close to decoupling singularity: {x}")


def sample_region(spec: SafetySpec, model: SystemModel, count: int, seed: int,
                  cond_floor: float = COND_FLOOR):
    """Seeded rejection sampling of the synthesis region.

    Returns (ecgbf_samples, input_samples): `count` output points with
    psi >= 0 and phi >= 0, and `count` full states whose outputs lie in the
    region and whose decoupling matrix clears the conditioning floor.
    """
    if count <= 0:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(seed)
    obox = spec.output_box
    sbox = model.state_box

    ys, xs = [], []
    y_attempts = x_attempts = 0
    saw_target_overlap = False
    chunk = max(4 * count, 4096)
    while len(ys) < count:
        draw = rng.uniform(obox[:, 0], obox[:, 1], size=(chunk, obox.shape[0]))
        y_attempts += chunk
        for y in draw:
            pv = spec.psi.eval(y)
            if pv > 0 and spec.phi.eval(y) < 0:
                saw_target_overlap = True
            if pv >= 0 and spec.phi.eval(y) >= 0:
                ys.append(y)
                if len(ys) >= count:
                    break
        if y_attempts >= 50000 and len(ys) / y_attempts < 1e-4:
            raise RegionTooThinError(
                f"output-region acceptance rate {len(ys)/y_attempts:.2e} below 1e-4")
    if not saw_target_overlap:
        # Assumption-1 style sanity probe: the target must open a hole in the safe set
        hole = rng.uniform(obox[:, 0], obox[:, 1], size=(50000, obox.shape[0]))
        if not any(spec.psi.eval(y) > 0 and spec.phi.eval(y) < 0 for y in hole):
            warnings.warn("no sampled point has psi>0 and phi<0; safe and target sets "
                          "may not overlap", stacklevel=2)

    while len(xs) < count:
        draw = rng.uniform(sbox[:, 0], sbox[:, 1], size=(chunk, sbox.shape[0]))
        x_attempts += chunk
        for x in draw:
            y = model.h(x)
            if spec.in_output_box(y) and spec.psi.eval(y) >= 0 and spec.phi.eval(y) >= 0 \
                    and abs(np.linalg.det(model.lg_lf_y(x))) >= cond_floor:
                xs.append(x)
                if len(xs) >= count:
                    break
        if x_attempts >= 50000 and len(xs) / x_attempts < 1e-4:
            raise RegionTooThinError(
                f"state-region acceptance rate {len(xs)/x_attempts:.2e} below 1e-4")
    return np.array(ys[:count]), np.array(xs[:count])


def _basis_eval_grid(basis: BasisSet, Y: np.ndarray) -> np.ndarray:
    """(N, nb) matrix of monomial values at the points Y."""
    out = np.ones((Y.shape[0], len(basis)))
    for col, exps in enumerate(basis.monomials):
        for k, e in enumerate(exps):
            if e:
                out[:, col] *= Y[:, k] ** e
    return out


def _ecgbf_block(spec, basis, m, lam, Ys, clearance):
    """Rows enforcing grad(psi)'k1 >= lam*psi + clearance - delta at outputs Ys."""
    nb = len(basis)
    nvar = m * nb + 1
    Bm = _basis_eval_grid(basis, Ys)  # (N, nb)
    rows = np.zeros((len(Ys), nvar))
    for i in range(m):
        gi = _poly_eval_grid(spec.psi.partial(f"y{i+1}"), Ys)
        rows[:, i * nb:(i + 1) * nb] = -gi[:, None] * Bm
    rows[:, -1] = -1.0
    rhs = -(lam * _poly_eval_grid(spec.psi, Ys) + clearance)
    return rows, rhs


def _ecgbf_clearance(problem: SynthesisProblem, Ys):
    spec = problem.spec
    clearance = np.full(len(Ys), problem.margin)
    if problem.margin_mode in ("gradient", "affine"):
        # between-sample dips of the closed-loop decrease rate have a
        # curvature floor plus a part that scales with |grad psi|, so flat
        # uniform clearance either starves steep zones or, scaled up,
        # overconstrains them
        gsq = np.zeros(len(Ys))
        for i in range(problem.model.m):
            gsq += _poly_eval_grid(spec.psi.partial(f"y{i+1}"), Ys) ** 2
        gnorm = np.sqrt(gsq)
        if problem.margin_mode == "gradient":
            clearance = problem.margin * (1.0 + gnorm)
        else:
            clearance = problem.margin + problem.margin_slope * gnorm
    return clearance


def _assemble(problem: SynthesisProblem, params: BacksteppingParams):
    model, spec, basis = problem.model, problem.spec, problem.basis
    m = model.m
    nb = len(basis)
    nvar = m * nb + 1  # stacked theta + delta
    blocks, rhs_parts, tags = [], [], []

    Ys = problem.ecgbf_samples
    if len(Ys):
        rows, rhs = _ecgbf_block(spec, basis, m, params.lam, Ys,
                                 _ecgbf_clearance(problem, Ys))
        blocks.append(rows)
        rhs_parts.append(rhs)
        tags.extend(("ecgbf", j) for j in range(len(Ys)))

    if problem.input_constraints is not None:
        for j, x in enumerate(problem.input_samples):
            dec = affine_decompose(params, basis, model, spec, x,
                                   cond_floor=problem.cond_floor)
            P, Q = problem.input_constraints.eval(x)
            PAinv = P @ np.linalg.inv(dec.A)
            Mj = PAinv @ dec.U  # (r, m*nb)
            qj = Q - problem.input_margin - PAinv @ dec.V
            rows = np.zeros((Mj.shape[0], nvar))
            rows[:, :m * nb] = Mj
            blocks.append(rows)
            rhs_parts.append(qj)
            tags.extend(("input", j, r) for r in range(Mj.shape[0]))

    if problem.k1_cap is not None and len(Ys):
        stride = max(1, int(problem.lp_settings.get("k1_cap_stride", 1)))
        Bc = _basis_eval_grid(basis, Ys[::stride])
        nc = Bc.shape[0]
        for i in range(m):
            for sgn in (1.0, -1.0):
                rows = np.zeros((nc, nvar))
                rows[:, i * nb:(i + 1) * nb] = sgn * Bc
                blocks.append(rows)
                rhs_parts.append(np.full(nc, problem.k1_cap))
                tags.extend(("k1_cap", j * stride, i) for j in range(nc))

    row = np.zeros((1, nvar))
    row[0, -1] = -1.0
    blocks.append(row)
    rhs_parts.append(np.array([0.0]))
    tags.append(("delta_nonneg",))
    return np.vstack(blocks), np.concatenate(rhs_parts), tags


def _most_violated(G, h, tags, problem, max_iters):
    """Elastic re-solve: min t s.t. Gz - t <= h, t >= -1; report the worst row."""
    nvar = G.shape[1]
    Ge = np.hstack([G, -np.ones((G.shape[0], 1))])
    Ge = np.vstack([Ge, np.concatenate([np.zeros(nvar), [-1.0]])])
    he = np.concatenate([h, [1.0]])
    c = np.zeros(nvar + 1)
    c[-1] = 1.0
    res = solve_inequality(Ge, he, c, max_iters=max_iters)
    if res.status != "optimal":
        return None
    resid = G @ res.x[:nvar] - h
    worst = int(np.argmax(resid))
    tag = tags[worst]
    if tag[0] == "ecgbf":
        where = f"output sample {problem.ecgbf_samples[tag[1]]}"
    elif tag[0] == "input":
        where = f"state sample {problem.input_samples[tag[1]]} (constraint row {tag[2]})"
    else:
        where = tag[0]
    return {"row": worst, "tag": tag, "violation": float(resid[worst]), "where": where}


def _solve_rows(G, h, tags, problem, max_iters, start_active=None, start_basis=None):
    """Solve min delta over the rows, generating active constraints lazily.

    Grid-sampled problems carry tens of thousands of near-parallel rows that
    stall the simplex with degenerate pivots; solving a working subset and
    pricing the full row set at each round is exact at termination and keeps
    every sub-LP small.  `start_active`/`start_basis` resume from a previous
    call's working set (refinement callers append rows, so old indices stay
    valid).
    """
    n = G.shape[0]
    c = np.zeros(G.shape[1])
    c[-1] = 1.0
    work = int(problem.lp_settings.get("initial_rows", 4000))
    batch = int(problem.lp_settings.get("row_batch", 800))
    if start_active is not None:
        active = np.unique(start_active)
        warm = (np.searchsorted(active, start_basis)
                if start_basis is not None and len(start_basis) else None)
    elif n <= work:
        active = np.arange(n)
        warm = None
    else:
        active = np.unique(np.r_[np.arange(0, n, max(1, n // work)), n - 1])
        warm = None
    for _ in range(40):
        res = solve_inequality(G[active], h[active], c, max_iters=max_iters,
                               warm_basis=warm)
        if res.status == "iteration_limit":
            raise RuntimeError(
                f"LP solver hit the iteration limit on a {len(active)}-row subproblem; "
                "this is a solver stall, not evidence of infeasibility")
        if res.status != "optimal":
            diag = _most_violated(G[active], h[active], [tags[i] for i in active],
                                  problem, max_iters)
            msg = "synthesis LP infeasible"
            if diag is not None:
                msg += f"; most violated: {diag['where']} by {diag['violation']:.3e}"
            raise SynthesisInfeasibleError(msg, most_violated=diag)
        resid = G @ res.x - h
        resid[active] = -np.inf
        worst = np.argsort(resid, kind="stable")[-batch:]
        worst = worst[resid[worst] > 1e-9]
        if worst.size == 0:
            basis_rows = (active[np.asarray(res.basis, dtype=int)]
                          if res.basis else None)
            return res, active, basis_rows
        prev_rows = active[np.asarray(res.basis, dtype=int)] if res.basis else None
        active = np.unique(np.r_[active, worst])
        warm = np.searchsorted(active, prev_rows) if prev_rows is not None else None
    raise SynthesisInfeasibleError("row generation did not converge")


def _solve_once(problem: SynthesisProblem, params: BacksteppingParams):
    model, basis = problem.model, problem.basis
    nb = len(basis)
    m = model.m
    if len(problem.ecgbf_samples) == 0 and len(problem.input_samples) == 0:
        warnings.warn("vacuous synthesis problem: no constraints sampled", stacklevel=3)
        theta = tuple(tuple(0.0 for _ in range(nb)) for _ in range(m))
        return Certificate(params=params, basis=basis, theta=theta, delta_star=0.0,
                           verification={"warnings": ["vacuous problem: no constraints"]},
                           model_id=model.name, spec_hash=spec_hash(problem.spec))
    G, h, tags = _assemble(problem, params)
    max_iters = int(problem.lp_settings.get("max_iters", 100000))
    res, _, _ = _solve_rows(G, h, tags, problem, max_iters)
    z = res.x
    delta = max(float(z[-1]), 0.0)
    theta = tuple(tuple(float(v) for v in z[i * nb:(i + 1) * nb]) for i in range(m))
    return Certificate(params=params, basis=basis, theta=theta, delta_star=delta,
                       verification={}, model_id=model.name,
                       spec_hash=spec_hash(problem.spec))


def solve_theta(problem: SynthesisProblem) -> Certificate:
    return _solve_once(problem, problem.params)


REFINE_MARGIN = 2e-4
REFINE_FLAG = 1.5e-4


def _refined_solve(problem: SynthesisProblem, params: BacksteppingParams,
                   refine_density: int, rounds: int = 12, batch: int = 4000):
    """Solve, then pin the decrease-rate inequality wherever a fine probe
    grid finds it sagging between the sampled rows.

    The LP only sees finitely many rows, so the synthesized feedback can dip
    below the required decrease rate between them; flows integrate through
    those dips.  Each round appends elastic rows at the worst probe points
    and re-solves from the previous working set, so the loop converges in a
    handful of cheap warm-started solves.  Returns (certificate, info dict).
    """
    model, spec, basis = problem.model, problem.spec, problem.basis
    m, nb = model.m, len(basis)
    G, h, tags = _assemble(problem, params)
    max_iters = int(problem.lp_settings.get("max_iters", 100000))

    Yf = output_grid(spec, refine_density)
    keep = (_poly_eval_grid(spec.psi, Yf) >= 0.0) & (_poly_eval_grid(spec.phi, Yf) >= 0.0)
    Yf = Yf[keep]
    psi_f = _poly_eval_grid(spec.psi, Yf)
    grad_f = [_poly_eval_grid(spec.psi.partial(f"y{i+1}"), Yf) for i in range(m)]

    active = basis_rows = None
    added = 0
    info = {"refine_density": refine_density, "refine_points": int(len(Yf)),
            "round_delta": [], "round_flagged": []}
    for rnd in range(rounds):
        res, active, basis_rows = _solve_rows(G, h, tags, problem, max_iters,
                                              start_active=active,
                                              start_basis=basis_rows)
        z = res.x
        delta = max(float(z[-1]), 0.0)
        info["round_delta"].append(delta)
        if delta > ACCEPT_DELTA:
            break  # infeasible at this clearance level; let the caller gate
        margins = -params.lam * psi_f
        for i in range(m):
            k1 = _poly_eval_grid(basis.combine(z[i * nb:(i + 1) * nb]), Yf)
            margins += grad_f[i] * k1
        flagged = np.nonzero(margins < REFINE_FLAG)[0]
        info["round_flagged"].append(int(flagged.size))
        info.update(rounds=rnd + 1, extra_rows=added, fine_min=float(margins.min()))
        if flagged.size == 0:
            theta = tuple(tuple(float(v) for v in z[i * nb:(i + 1) * nb])
                          for i in range(m))
            cert = Certificate(params=params, basis=basis, theta=theta,
                               delta_star=delta, verification={},
                               model_id=model.name, spec_hash=spec_hash(spec))
            return cert, info
        order = flagged[np.argsort(margins[flagged], kind="stable")]
        pick = order[:batch]
        rows, rhs = _ecgbf_block(spec, basis, m, params.lam, Yf[pick],
                                 np.full(pick.size, REFINE_MARGIN))
        start = G.shape[0]
        G = np.vstack([G, rows])
        h = np.concatenate([h, rhs])
        tags.extend(("ecgbf_fine", int(j)) for j in pick)
        active = np.r_[active, np.arange(start, start + pick.size)]
        added += int(pick.size)
    theta = tuple(tuple(float(v) for v in z[i * nb:(i + 1) * nb]) for i in range(m))
    cert = Certificate(params=params, basis=basis, theta=theta, delta_star=delta,
                       verification={}, model_id=model.name, spec_hash=spec_hash(spec))
    if delta <= ACCEPT_DELTA:
        raise SynthesisInfeasibleError(
            f"decrease-rate refinement still flags {flagged.size} probe points "
            f"after {rounds} rounds (fine min {margins.min():.2e})")
    return cert, info


def unconstrained_solve(spec: SafetySpec, basis: BasisSet, lam: float,
                        model: SystemModel = None, mu=None, count: int = 4000,
                        seed: int = 0, margin: float = DEFAULT_MARGIN,
                        samples: np.ndarray = None) -> Certificate:
    """Certificate synthesis without the input-bound constraint family."""
    if samples is None:
        if model is None:
            raise ValueError("need either explicit samples or a model to sample with")
        samples, _ = sample_region(spec, model, count, seed)
    m = samples.shape[1] if samples.size else (model.m if model else 2)
    if mu is None:
        mu = tuple((1.0,) for _ in range(m))
    params = BacksteppingParams(lam=lam, mu=mu)
    problem = SynthesisProblem(
        model=model if model is not None else _output_only_stub(m, spec),
        spec=spec, basis=basis, params=params, input_constraints=None,
        ecgbf_samples=samples, input_samples=np.zeros((0, 4)), margin=margin)
    return solve_theta(problem)


def _output_only_stub(m: int, spec: SafetySpec) -> SystemModel:
    # lets unconstrained synthesis run from output samples alone
    box = np.vstack([spec.output_box, spec.output_box])

    def h(x):
        return x[:m]

    return SystemModel(name="output_only", kind=-1, n=2 * m, m=m,
                       gamma=tuple(2 for _ in range(m)), state_box=box,
                       params=np.zeros(1), f=None, g=None, h=h, lf_y=None, lg_lf_y=None)


@dataclass
class VerificationReport:
    ecgbf_margin: float
    ecgbf_points: int
    ecgbf_worst_y: list
    input_violation: float
    input_points: int
    input_worst_x: list
    pass_ecgbf: bool
    pass_input: bool
    grid_density_output: int
    grid_density_state: int
    u_bounds: list

    @property
    def passed(self) -> bool:
        return self.pass_ecgbf and self.pass_input

    def to_dict(self) -> dict:
        return {
            "ecgbf_margin": self.ecgbf_margin,
            "ecgbf_points": self.ecgbf_points,
            "ecgbf_worst_y": self.ecgbf_worst_y,
            "input_violation": self.input_violation,
            "input_points": self.input_points,
            "input_worst_x": self.input_worst_x,
            "pass_ecgbf": self.pass_ecgbf,
            "pass_input": self.pass_input,
            "passed": self.passed,
            "grid_density_output": self.grid_density_output,
            "grid_density_state": self.grid_density_state,
            "u_bounds": self.u_bounds,
        }


def _poly_eval_grid(poly, Y):
    """Vectorized polynomial evaluation on an (N, m) array of points."""
    out = np.zeros(Y.shape[0])
    for exps, coef in poly.terms.items():
        t = np.full(Y.shape[0], coef)
        for k, e in enumerate(exps):
            if e:
                t = t * Y[:, k] ** e
        out += t
    return out


def output_grid(spec: SafetySpec, density: int) -> np.ndarray:
    axes = [np.linspace(lo, hi, density) for lo, hi in spec.output_box]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


def state_grid(model: SystemModel, density: int) -> np.ndarray:
    axes = [np.linspace(lo, hi, density) for lo, hi in model.state_box]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


def grid_samples(model: SystemModel, spec: SafetySpec, grid_density: int,
                 state_density: int, cond_floor: float = COND_FLOOR):
    """Region points of the canonical verification grids.

    Feeding these to the LP rows makes the a-posteriori check pass by
    feasibility at every reported grid point; random ballast samples still
    guard the in-between (grid checking is falsification-complete only in
    the limit, so the canonical grid is the contract surface).
    """
    Y = output_grid(spec, grid_density)
    pv = _poly_eval_grid(spec.psi, Y)
    fv = _poly_eval_grid(spec.phi, Y)
    Yr = Y[(pv >= 0) & (fv >= 0)]

    Xg = state_grid(model, state_density)
    Hy = np.array([model.h(x) for x in Xg])
    psis = _poly_eval_grid(spec.psi, Hy)
    phis = _poly_eval_grid(spec.phi, Hy)
    inbox = np.all((Hy >= spec.output_box[:, 0]) & (Hy <= spec.output_box[:, 1]), axis=1)
    Xk = Xg[(psis >= 0) & (phis >= 0) & inbox]
    dets = np.array([abs(np.linalg.det(model.lg_lf_y(x))) for x in Xk])
    return Yr, Xk[dets >= cond_floor]


def ecgbf_margins(cert: Certificate, spec: SafetySpec, Y: np.ndarray) -> np.ndarray:
    """grad-psi' k_1 - lambda psi at each output point."""
    m = spec.output_box.shape[0]
    total = -cert.params.lam * _poly_eval_grid(spec.psi, Y)
    for i in range(m):
        gi = _poly_eval_grid(spec.psi.partial(f"y{i+1}"), Y)
        ki = _poly_eval_grid(cert.k1_poly(i), Y)
        total += gi * ki
    return total


def verify_certificate(cert: Certificate, model: SystemModel, spec: SafetySpec,
                       grid_density: int = 120, u_bounds=None,
                       state_density: int = 14, cond_floor: float = COND_FLOOR) -> VerificationReport:
    """Dense-grid a-posteriori check of the ECGBF inequality and input bounds."""
    Y = output_grid(spec, grid_density)
    psi_v = _poly_eval_grid(spec.psi, Y)
    phi_v = _poly_eval_grid(spec.phi, Y)
    mask = (psi_v >= 0) & (phi_v >= 0)
    Yr = Y[mask]
    margins = ecgbf_margins(cert, spec, Yr)
    iw = int(np.argmin(margins)) if margins.size else -1
    ecgbf_margin = float(margins[iw]) if margins.size else np.inf
    worst_y = [float(v) for v in Yr[iw]] if margins.size else []

    input_violation = -np.inf
    input_points = 0
    worst_x: list = []
    if u_bounds is not None:
        ics = InputConstraintSet.box(u_bounds)
        Xg = state_grid(model, state_density)
        Hy = np.array([model.h(x) for x in Xg])
        psis = _poly_eval_grid(spec.psi, Hy)
        phis = _poly_eval_grid(spec.phi, Hy)
        inbox = np.all((Hy >= spec.output_box[:, 0]) & (Hy <= spec.output_box[:, 1]), axis=1)
        keep = (psis >= 0) & (phis >= 0) & inbox
        for x in Xg[keep]:
            if abs(np.linalg.det(model.lg_lf_y(x))) < cond_floor:
                continue
            u = feedback(cert, model, spec, x, cond_floor=cond_floor)
            P, Q = ics.eval(x)
            v = float(np.max(P @ u - Q))
            input_points += 1
            if v > input_violation:
                input_violation = v
                worst_x = [float(s) for s in x]
        if input_points == 0:
            input_violation = np.inf

    return VerificationReport(
        ecgbf_margin=ecgbf_margin,
        ecgbf_points=int(margins.size),
        ecgbf_worst_y=worst_y,
        input_violation=float(input_violation) if u_bounds is not None else 0.0,
        input_points=input_points,
        input_worst_x=worst_x,
        pass_ecgbf=bool(ecgbf_margin >= -1e-6),
        pass_input=bool(u_bounds is None or input_violation <= 1e-6),
        grid_density_output=grid_density,
        grid_density_state=state_density if u_bounds is not None else 0,
        u_bounds=[float(v) for v in u_bounds] if u_bounds is not None else [],
    )


def synthesize(model: SystemModel, spec: SafetySpec, basis: BasisSet,
               params: BacksteppingParams, u_max, count: int = 2000,
               input_count: int = None, seed: int = 0, margin: float = DEFAULT_MARGIN,
               input_margin: float = 0.0, margin_mode: str = "uniform",
               margin_slope: float = 0.0, k1_cap: float = None,
               k1_cap_stride: int = 8, grid_density: int = 320, state_density: int = 16,
               refine_density: int = None, ladder=LAMBDA_LADDER) -> Certificate:
    """Full synthesis pipeline: sample, solve, refine, dense-verify.

    LP rows combine the canonical verification grids with `count` random
    ballast samples; the decrease-rate inequality is then pinned on a nested
    probe grid (`refine_density`, default 8x finer) so it holds between grid
    points, not just on them. Retries over the lambda ladder (multiples of
    the requested rate) when the LP is infeasible or verification rejects
    the result.
    """
    input_count = count if input_count is None else input_count
    ys, xs = sample_region(spec, model, max(count, input_count), seed)
    Yg, Xg = grid_samples(model, spec, grid_density, state_density)
    ys = np.vstack([Yg, ys[:count]])
    xs = np.vstack([Xg, xs[:input_count]])
    ics = InputConstraintSet.box(u_max)
    if refine_density is None:
        refine_density = 8 * (grid_density - 1) + 1
    last_err = None
    for mult in ladder:
        p = BacksteppingParams(lam=params.lam * mult, mu=params.mu)
        problem = SynthesisProblem(model=model, spec=spec, basis=basis, params=p,
                                   input_constraints=ics, ecgbf_samples=ys,
                                   input_samples=xs, margin=margin,
                                   input_margin=input_margin, margin_mode=margin_mode,
                                   margin_slope=margin_slope, k1_cap=k1_cap,
                                   lp_settings={"k1_cap_stride": k1_cap_stride})
        try:
            cert, refine_info = _refined_solve(problem, p, refine_density)
        except SynthesisInfeasibleError as e:
            last_err = e
            continue
        if cert.delta_star > ACCEPT_DELTA:
            last_err = SynthesisInfeasibleError(
                f"delta* = {cert.delta_star:.3e} exceeds acceptance threshold at lambda={p.lam}")
            continue
        report = verify_certificate(cert, model, spec, grid_density=grid_density,
                                    u_bounds=u_max, state_density=state_density)
        if report.passed:
            audit = report.to_dict()
            audit.update(refine_info)
            return Certificate(params=cert.params, basis=cert.basis, theta=cert.theta,
                               delta_star=cert.delta_star, verification=audit,
                               model_id=cert.model_id, spec_hash=cert.spec_hash)
        last_err = SynthesisInfeasibleError(
            f"dense verification failed at lambda={p.lam}: "
            f"ecgbf margin {report.ecgbf_margin:.3e}, input violation {report.input_violation:.3e}")
    raise last_err if last_err else SynthesisInfeasibleError("synthesis failed")
