"""Dense revised-simplex linear programming solver.

Two entry points:
  solve_standard: min c'z  s.t.  Az = b, z >= 0   (two-phase revised simplex)
  solve_inequality: min c'x s.t. Gx <= h, x free

The inequality form is solved through its dual min h'p s.t. G'p = -c, p >= 0,
which keeps the tableau at (n_vars x n_constraints) instead of squaring in the
constraint count; the primal solution is recovered from the simplex
multipliers at the dual optimum.  Dual infeasible or unbounded both certify
that the primal has no finite optimum (for our synthesis LPs, whose objective
is bounded below when feasible, that means primal infeasible).

Pivoting: Dantzig rule for the entering variable; the leaving variable is
chosen by a lexicographic ratio test (ties resolved against the rows of the
basis inverse), which blocks the degenerate-vertex cycling that plain
largest-pivot tie-breaking hits on near-parallel sampled constraint rows.
Stalls trigger bounded bursts of Bland's rule (with doubling length) rather
than a permanent switch, since Bland descends far too slowly to be left on.
The basic solution is recomputed from the basis every few dozen iterations;
without that, repeated clamping of near-zero components silently erases the
anti-degeneracy perturbation that solve_inequality applies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PIVOT_TOL = 1e-10
STALL_ITERS = 100
REFRESH_EVERY = 50


@dataclass
class SimplexResult:
    status: str  # optimal | infeasible | unbounded | iteration_limit
    x: np.ndarray | None
    objective: float | None
    multipliers: np.ndarray | None = None
    basis: list | None = None
    iterations: int = 0


def _iterate(A, b, c, basis, z_B, max_iters, tol):
    """Run simplex iterations from a feasible basis; returns (status, basis, z_B, iters)."""
    mrows, ncols = A.shape
    bland_until = 0
    burst = 4 * mrows
    stall = 0
    best_obj = np.inf
    it = 0
    while it < max_iters:
        it += 1
        bland = it < bland_until
        B = A[:, basis]
        if it % REFRESH_EVERY == 0:
            z_B = np.maximum(np.linalg.solve(B, b), 0.0)
        pi = np.linalg.solve(B.T, c[basis])
        r = c - A.T @ pi
        r[basis] = 0.0
        if bland:
            cand = np.nonzero(r < -tol)[0]
            if cand.size == 0:
                return "optimal", basis, z_B, it
            j = int(cand[0])
        else:
            j = int(np.argmin(r))
            if r[j] >= -tol:
                return "optimal", basis, z_B, it
        d = np.linalg.solve(B, A[:, j])
        pos = d > tol
        if not np.any(pos):
            return "unbounded", basis, z_B, it
        ratios = np.full(mrows, np.inf)
        ratios[pos] = z_B[pos] / d[pos]
        t = ratios.min()
        ties = np.nonzero(ratios <= t + tol * (1 + abs(t)))[0]
        if ties.size == 1:
            leave = int(ties[0])
        elif bland:
            leave = int(min(ties, key=lambda ii: basis[ii]))
        else:
            # lexicographic ratio test: compare rows of B^-1 scaled by the
            # pivot column; strict lexicographic order rules out returning to
            # a previous basis, which plain largest-pivot tie-breaking does
            # not (degenerate vertices of sampled LPs stack many zero ratios)
            lex = np.linalg.inv(B)[ties] / d[ties, None]
            order = ties
            for col in range(mrows):
                vals = lex[:, col]
                lo = vals.min()
                keep = vals <= lo + 1e-12 * (1.0 + abs(lo))
                lex = lex[keep]
                order = order[keep]
                if order.size == 1:
                    break
            leave = int(order[0])
        z_B = z_B - t * d
        z_B[leave] = t
        z_B = np.maximum(z_B, 0.0)
        basis[leave] = j
        obj = float(c[basis] @ z_B)
        if obj < best_obj - tol * (1 + abs(best_obj)):
            best_obj = obj
            stall = 0
        else:
            stall += 1
            if stall >= STALL_ITERS and it >= bland_until:
                bland_until = it + burst
                burst *= 2
                stall = 0
    return "iteration_limit", basis, z_B, it


def solve_standard(A, b, c, max_iters: int = 100000, tol: float = PIVOT_TOL,
                   warm_basis=None) -> SimplexResult:
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float).copy()
    c = np.asarray(c, dtype=float)
    mrows, ncols = A.shape
    nrows_orig = mrows

    flip = b < 0
    sign = np.where(flip, -1.0, 1.0)
    row_ids = np.arange(mrows)
    A = A.copy()
    A[flip] *= -1.0
    b[flip] *= -1.0

    if warm_basis is not None and len(warm_basis) == mrows:
        # a basis that stays feasible (the typical case when only columns
        # were added since it was optimal) skips phase 1 entirely
        try:
            z_B = np.linalg.solve(A[:, warm_basis], b)
        except np.linalg.LinAlgError:
            z_B = None
        # tolerate slightly negative components: they come from re-scaling a
        # previously optimal basis and the clamp plus the periodic
        # basis-solve refresh keep them from accumulating
        if z_B is not None and z_B.min() >= -1e-7:
            basis = list(warm_basis)
            z_B = np.maximum(z_B, 0.0)
            status, basis, z_B, it2 = _iterate(A, b, c, basis, z_B, max_iters, tol)
            if status == "optimal":
                z = np.zeros(ncols)
                for bi, col in enumerate(basis):
                    z[col] = z_B[bi]
                pi = np.zeros(nrows_orig)
                pi[row_ids] = sign * np.linalg.solve(A[:, basis].T, c[basis])
                return SimplexResult("optimal", z, float(c @ z), multipliers=pi,
                                     basis=list(basis), iterations=it2)
            if status != "unbounded":
                return SimplexResult(status, None, None, iterations=it2)
            return SimplexResult("unbounded", None, None, iterations=it2)

    # phase 1: artificial identity basis
    A1 = np.hstack([A, np.eye(mrows)])
    c1 = np.concatenate([np.zeros(ncols), np.ones(mrows)])
    basis = list(range(ncols, ncols + mrows))
    z_B = b.copy()
    status, basis, z_B, it1 = _iterate(A1, b, c1, basis, z_B, max_iters, tol)
    if status == "iteration_limit":
        return SimplexResult("iteration_limit", None, None, iterations=it1)
    phase1_obj = float(c1[basis] @ z_B)
    if phase1_obj > 1e-7:
        return SimplexResult("infeasible", None, None, iterations=it1)

    # drive remaining artificials out of the basis
    keep_rows = np.ones(mrows, dtype=bool)
    for row, col in enumerate(list(basis)):
        if col < ncols:
            continue
        B = A1[:, basis]
        e = np.zeros(mrows)
        e[row] = 1.0
        w = np.linalg.solve(B.T, e)
        entries = A.T @ w  # pivot candidates among structural columns
        cands = np.nonzero(np.abs(entries) > 1e-8)[0]
        cands = [j for j in cands if j not in basis]
        if cands:
            basis[row] = int(cands[0])
            z_B[row] = 0.0
        else:
            keep_rows[row] = False  # redundant constraint row

    if not np.all(keep_rows):
        rows = np.nonzero(keep_rows)[0]
        A = A[rows]
        b = b[rows]
        sign = sign[rows]
        row_ids = row_ids[rows]
        basis = [basis[i] for i in rows]
        z_B = z_B[rows]
        mrows = len(rows)
        if any(col >= ncols for col in basis):
            return SimplexResult("infeasible", None, None, iterations=it1)

    # phase 2
    status, basis, z_B, it2 = _iterate(A, b, c, basis, z_B, max_iters, tol)
    if status != "optimal":
        return SimplexResult(status, None, None, iterations=it1 + it2)
    z = np.zeros(ncols)
    for bi, col in enumerate(basis):
        z[col] = z_B[bi]
    pi_kept = np.linalg.solve(A[:, basis].T, c[basis])
    # multipliers refer to the original (unflipped) rows; removed redundant
    # rows get zero, which stays optimal since their columns were dependent
    pi = np.zeros(nrows_orig)
    pi[row_ids] = sign * pi_kept
    return SimplexResult("optimal", z, float(c @ z), multipliers=pi, basis=list(basis),
                         iterations=it1 + it2)


def solve_inequality(G, h, c, max_iters: int = 100000, tol: float = PIVOT_TOL,
                     warm_basis=None) -> SimplexResult:
    """min c'x s.t. Gx <= h with free x, via the standard-form dual.

    Rows and columns are Ruiz-equilibrated first; the scalings commute with
    dualization, so both the recovered primal point and the multipliers map
    back exactly.  `warm_basis` (dual column indices = primal row indices
    from a previous result) resumes from that basis when it is still
    feasible, which row-generation callers rely on.
    """
    G = np.asarray(G, dtype=float).copy()
    h = np.asarray(h, dtype=float)
    c = np.asarray(c, dtype=float)
    nr, nc = G.shape
    r = np.ones(nr)
    s = np.ones(nc)
    for _ in range(3):
        ri = np.sqrt(np.max(np.abs(G), axis=1))
        ri[ri == 0] = 1.0
        G /= ri[:, None]
        r *= ri
        si = np.sqrt(np.max(np.abs(G), axis=0))
        si[si == 0] = 1.0
        G /= si[None, :]
        s *= si
    hs = h / r
    cs = c / s
    # the dual RHS (= primal objective) is sparse, so dual basic solutions
    # sit on massively degenerate vertices where pivoting churns with zero
    # steps; a deterministic perturbation well above the pivot tolerance
    # makes every vertex of the perturbed problem nondegenerate.  Reduced
    # costs still use the true rows, so the recovered primal point is exactly
    # feasible; only the objective coordinate shifts by O(1e-8).
    jj = np.arange(nc, dtype=np.uint64)
    u = ((jj * np.uint64(2654435761) + np.uint64(12345)) % np.uint64(2 ** 32)).astype(float)
    sigma = 1e-8 * (1.0 + np.abs(cs)) * (0.5 + u / 2 ** 32)
    dual = solve_standard(G.T, -cs + sigma, hs, max_iters=max_iters, tol=tol,
                          warm_basis=warm_basis)
    if dual.status in ("infeasible", "unbounded"):
        # a perturbed objective can tip an unbounded-direction verdict on a
        # problem whose true objective is flat along a recession ray; retry
        # exact before concluding anything
        dual = solve_standard(G.T, -cs, hs, max_iters=max_iters, tol=tol)
    if dual.status in ("infeasible", "unbounded"):
        # either way the primal admits no finite optimum; callers with
        # objectives bounded below interpret this as primal infeasibility
        return SimplexResult("infeasible", None, None, iterations=dual.iterations)
    if dual.status != "optimal":
        return SimplexResult(dual.status, None, None, iterations=dual.iterations)
    x = dual.multipliers / s
    return SimplexResult("optimal", x, float(c @ x), multipliers=dual.x / r,
                         basis=dual.basis, iterations=dual.iterations)
