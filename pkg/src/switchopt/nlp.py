"""Bound- and equality-constrained smooth NLP solver.

The solver is an augmented Lagrangian method: equality constraints are moved
into the merit function

    L_A(z; lam, rho) = f(z) + lam . c(z) + rho/2 |c(z)|^2

and each subproblem ``min L_A  s.t.  lo <= z <= hi`` is solved by a
projected Newton method whose Hessian is ``rho J^T J`` plus a
finite-difference Hessian of ``f + y.c`` (cheap when the problem declares its
block structure).  Large problems without structure fall back to L-BFGS-B.
Multipliers are updated first-order after every subproblem and the penalty
grows when the constraint violation stalls.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee

from .errors import EvaluationError, ValidationError

logger = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITERATIONS = "max-iterations"
LINE_SEARCH_FAILURE = "line-search-failure"


@dataclass
class NlpProblem:
    """``min f(z)  s.t.  c(z) = 0,  lower <= z <= upper``.

    ``objective(z)`` returns ``(value, gradient)``; ``constraints(z)`` returns
    the residual vector and ``jacobian(z)`` a sparse ``(m, n)`` matrix.

    ``hessian_blocks`` optionally describes the sparsity of the Lagrangian
    Hessian: variables sharing a non-negative id form a block, variables
    from different blocks never interact directly, and variables marked
    ``-1`` may interact with anything.  With it the solver builds a
    finite-difference Hessian from a handful of gradient evaluations.

    ``jacobian_vjp(z, y)``, if given, returns ``J(z)^T y`` without forming
    the matrix; the solver uses it for every gradient of the merit function.
    """

    n: int
    objective: Callable
    lower: np.ndarray
    upper: np.ndarray
    initial_guess: np.ndarray
    constraints: Optional[Callable] = None
    jacobian: Optional[Callable] = None
    m: int = 0
    hessian_blocks: Optional[np.ndarray] = None
    jacobian_vjp: Optional[Callable] = None

    def __post_init__(self):
        self.lower = np.broadcast_to(np.asarray(self.lower, dtype=float), (self.n,)).copy()
        self.upper = np.broadcast_to(np.asarray(self.upper, dtype=float), (self.n,)).copy()
        self.initial_guess = np.asarray(self.initial_guess, dtype=float).copy()
        if self.initial_guess.shape != (self.n,):
            raise ValidationError("initial guess must have n entries")
        if np.any(self.lower > self.upper):
            raise ValidationError("variable bounds need lower <= upper")
        if (self.constraints is None) != (self.jacobian is None):
            raise ValidationError("constraints and jacobian come together")
        if self.constraints is None:
            self.m = 0
        if self.hessian_blocks is not None:
            self.hessian_blocks = np.asarray(self.hessian_blocks, dtype=int)
            if self.hessian_blocks.shape != (self.n,):
                raise ValidationError("hessian_blocks needs one entry per variable")


@dataclass
class SolverOptions:
    tol_eq: float = 1e-7
    tol_kkt: float = 1e-6
    tol_bound: float = 1e-9
    max_outer: int = 60
    max_inner: int = 500
    penalty: float = 10.0
    penalty_growth: float = 10.0
    penalty_max: float = 1e8
    # penalty grows unless |c| shrinks by at least this factor
    required_decrease: float = 0.25
    # unstructured problems above this size use L-BFGS-B subproblems
    dense_hessian_limit: int = 400
    lbfgs_max_inner: int = 20000


@dataclass
class NlpSolution:
    z: np.ndarray
    objective_value: float
    equality_residual_norm: float
    kkt_residual: float
    bound_multipliers: np.ndarray
    eq_multipliers: np.ndarray
    status: str
    iterations: int
    inner_iterations: int
    penalty: float
    history: list = field(default_factory=list)
    merit_trace: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED


def _projected_gradient(z, g, lo, hi):
    return z - np.clip(z - g, lo, hi)


def _bound_multipliers(z, g, lo, hi):
    tol_lo = 1e-9 * (1.0 + np.abs(lo))
    tol_hi = 1e-9 * (1.0 + np.abs(hi))
    at_lo = z - lo <= tol_lo
    at_hi = hi - z <= tol_hi
    mult = np.zeros_like(z)
    mult[at_lo] = np.maximum(g[at_lo], 0.0)
    mult[at_hi & ~at_lo] = np.maximum(-g[at_hi & ~at_lo], 0.0)
    return mult


def _checked(value, what, z):
    if not np.all(np.isfinite(value)):
        raise EvaluationError(f"non-finite {what}", z=z.copy())
    return value


class _Colouring:
    """Perturbation groups for a block-structured finite-difference Hessian."""

    def __init__(self, blocks):
        n = len(blocks)
        self.border = np.flatnonzero(blocks < 0)
        local = np.flatnonzero(blocks >= 0)
        order = local[np.argsort(blocks[local], kind="stable")]
        b_sorted = blocks[order]
        first = np.r_[0, np.flatnonzero(np.diff(b_sorted)) + 1]
        starts = np.repeat(first, np.diff(np.r_[first, len(order)]))
        pos = np.empty(n, dtype=int)
        pos[order] = np.arange(len(order)) - starts
        self.local = local
        self.pos = pos
        self.blocks = blocks
        n_colours = int(pos[local].max()) + 1 if len(local) else 0
        self.groups = [local[pos[local] == c] for c in range(n_colours)]
        # member[block, colour] -> variable index
        block_ids, dense_ids = np.unique(blocks[local], return_inverse=True)
        self.dense_block = np.full(n, -1)
        self.dense_block[local] = dense_ids
        self.member = np.full((len(block_ids), max(n_colours, 1)), -1)
        self.member[dense_ids, pos[local]] = local


def _fd_hessian(grad, z, colouring: _Colouring):
    """Central-difference Hessian of a scalar function given its gradient."""
    n = len(z)
    steps = 6e-6 * (1.0 + np.abs(z))
    rows, cols, vals = [], [], []
    col = colouring
    for colour, group in enumerate(col.groups):
        e = np.zeros(n)
        e[group] = steps[group]
        dg = grad(z + e) - grad(z - e)
        # entry (i, j): i local, j the perturbed variable of i's block
        i = col.local
        j = col.member[col.dense_block[i], colour]
        ok = j >= 0
        i, j = i[ok], j[ok]
        rows.append(i)
        cols.append(j)
        vals.append(dg[i] / (2.0 * steps[j]))
    border_cols = {}
    for b in col.border:
        e = np.zeros(n)
        e[b] = steps[b]
        border_cols[b] = (grad(z + e) - grad(z - e)) / (2.0 * steps[b])
    local_mask = col.blocks >= 0
    for b, column in border_cols.items():
        idx = np.flatnonzero(local_mask)
        rows += [idx, np.full(len(idx), b)]
        cols += [np.full(len(idx), b), idx]
        vals += [column[idx], column[idx]]
    for b in col.border:
        for b2 in col.border:
            rows.append(np.array([b]))
            cols.append(np.array([b2]))
            vals.append(np.array([0.5 * (border_cols[b][b2] + border_cols[b2][b])]))
    if not rows:
        return sp.csr_matrix((n, n))
    H = sparse_from_blocks(rows, cols, vals, (n, n))
    return 0.5 * (H + H.T)


class _ShiftedSolver:
    """Solves ``(H_FF + delta I) d = -g_F`` with the smallest shift that is PD.

    Block-local variables are put in reverse Cuthill-McKee order, where the
    Hessian of a shooting transcription is banded, and factorised with a
    banded Cholesky; border variables enter through a dense Schur complement.
    A failed factorisation means the shifted matrix is not positive definite.
    """

    def __init__(self, border_mask):
        self.border = border_mask
        self.rank = None
        self.delta = 0.0

    def _order(self, H):
        n = H.shape[0]
        local = np.flatnonzero(~self.border)
        rank = np.full(n, -1)
        if len(local):
            perm = reverse_cuthill_mckee(H[local][:, local].tocsr(), symmetric_mode=True)
            rank[local[perm]] = np.arange(len(local))
        self.rank = rank

    def solve(self, H, free, g):
        if self.rank is None:
            self._order(H)
        fl = free[~self.border[free]]
        fl = fl[np.argsort(self.rank[fl], kind="stable")]
        fb = free[self.border[free]]
        Hf = H[fl]
        A = sp.tril(Hf[:, fl]).tocoo()
        B = Hf[:, fb].toarray()
        C = H[fb][:, fb].toarray()
        nl, nb = len(fl), len(fb)
        bw = int((A.row - A.col).max(initial=0))
        ab = np.zeros((bw + 1, nl))
        np.add.at(ab, (A.row - A.col, A.col), A.data)
        diag = np.abs(H.diagonal()[free])
        scale = max(1.0, float(diag.max(initial=0.0)))
        floor = 1e-12 * scale
        delta = max(floor, self.delta / 3.0)
        g_l, g_b = g[fl], g[fb]
        for _ in range(60):
            try:
                shifted = ab.copy()
                shifted[0] += delta
                cb = scipy.linalg.cholesky_banded(shifted, lower=True) if nl else None
                if nb:
                    AiB = scipy.linalg.cho_solve_banded((cb, True), B) if nl else B[:0]
                    S = C + delta * np.eye(nb) - (B.T @ AiB if nl else 0.0)
                    Ls = scipy.linalg.cho_factor(S, lower=True)
                break
            except np.linalg.LinAlgError:
                delta = max(1e-8 * scale, 10.0 * delta)
        else:
            self.delta = delta
            return -g[free], free
        self.delta = delta if delta > floor else 0.0
        d = np.empty(len(free))
        Aig = scipy.linalg.cho_solve_banded((cb, True), -g_l) if nl else np.zeros(0)
        if nb:
            y = scipy.linalg.cho_solve(Ls, -g_b - (B.T @ Aig if nl else 0.0))
            x = Aig - (AiB @ y if nl else 0.0)
        else:
            y, x = np.zeros(0), Aig
        return np.concatenate([x, y]), np.concatenate([fl, fb])


def _newton_subproblem(merit, lagrangian_grad, penalty_jac, z, lo, hi, colouring, solver,
                       gtol, max_iter, trace, outer):
    """Projected Newton method for ``min merit(z)`` on a box.

    ``lagrangian_grad`` is the gradient of ``f + y.c`` with the multiplier
    estimate frozen; its finite-difference Hessian plus ``rho J^T J`` is the
    model Hessian.  Returns ``(z, iterations, failed)``.
    """
    phi, g = merit(z)
    checkpoint = phi
    for it in range(max_iter):
        if it and it % 25 == 0:
            # a stalled subproblem is handed back to the multiplier update
            if checkpoint - phi <= 1e-9 * max(1.0, abs(phi)):
                return z, it, False
            checkpoint = phi
        pg = _projected_gradient(z, g, lo, hi)
        pg_norm = float(np.linalg.norm(pg, np.inf)) if len(z) else 0.0
        if pg_norm <= gtol:
            return z, it, False
        H = (_fd_hessian(lagrangian_grad(z), z, colouring) + penalty_jac(z)).tocsr()
        eps = min(1e-2, pg_norm)
        active = ((z - lo <= eps) & (g > 0)) | ((hi - z <= eps) & (g < 0))
        at_lo, at_hi = z - lo <= eps, hi - z <= eps
        for _ in range(8):
            # active variables go straight to their bound; the free step
            # accounts for that move through the coupling terms
            d = np.zeros_like(z)
            d[at_lo & active] = (lo - z)[at_lo & active]
            d[at_hi & active & ~at_lo] = (hi - z)[at_hi & active & ~at_lo]
            free = np.flatnonzero(~active)
            if len(free):
                d_act = d.copy()
                df, idx = solver.solve(H, free, g + H @ d_act)
                d[idx] = df
                if not (g @ d < 0 and g @ d + 0.5 * d @ (H @ d) < 0):
                    # the coupled step is no descent step; drop the coupling
                    d = d_act
                    d[idx] = solver.solve(H, free, g)[0]
            # free variables on a bound whose Newton step leaves the box are fixed too
            outward = ~active & ((at_lo & (d < 0)) | (at_hi & (d > 0)))
            if not outward.any():
                break
            active |= outward
        noise = 1e-13 * max(1.0, abs(phi))

        def line_search(d):
            alpha = 1.0
            for _ in range(50):
                z_new = np.clip(z + alpha * d, lo, hi)
                phi_new, g_new = merit(z_new)
                if phi_new <= phi + 1e-4 * (g @ (z_new - z)) + noise:
                    return alpha, z_new, phi_new, g_new
                alpha *= 0.5
            return 0.0, z, phi, g

        alpha, z_new, phi_new, g_new = line_search(d)
        if alpha < 1e-6:
            # the coupled step is nearly useless; fall back to the scaled
            # projected Newton direction without coupling to the active set
            d = -g / np.maximum(np.abs(H.diagonal()), 1e-8)
            if len(free):
                d[free] = 0.0
                df, idx = solver.solve(H, free, g)
                d[idx] = df
            alt = line_search(d)
            if alt[0] > 0 and (alpha == 0.0 or alt[2] < phi_new):
                alpha, z_new, phi_new, g_new = alt
        if alpha == 0.0:
            return z, it, True
        logger.log(5, "  inner %d pg=%.2e alpha=%.1e delta=%.1e free=%d", it, pg_norm, alpha,
                   solver.delta, len(free))
        z, phi, g = z_new, phi_new, g_new
        trace.append((outer, len(trace), float(phi)))
    return z, max_iter, False


def _merit_recorder(trace, outer):
    # scipy only passes the full result to a callback with exactly this signature
    def record(intermediate_result):
        trace.append((outer, len(trace), float(intermediate_result.fun)))

    return record


def _lbfgs_subproblem(merit, z, lo, hi, gtol, max_iter, trace, outer):
    res = scipy.optimize.minimize(
        merit,
        z,
        jac=True,
        method="L-BFGS-B",
        bounds=scipy.optimize.Bounds(lo, hi),
        callback=_merit_recorder(trace, outer),
        options={"maxiter": max_iter, "maxfun": 4 * max_iter, "gtol": gtol, "ftol": 1e-15},
    )
    return np.clip(res.x, lo, hi), int(res.nit), res.status == 2


def solve(
    problem: NlpProblem,
    options: SolverOptions | None = None,
    *,
    multipliers=None,
    penalty: float | None = None,
) -> NlpSolution:
    """Minimise ``problem`` from its initial guess.

    ``multipliers`` and ``penalty`` warm-start the outer loop; with the
    multipliers and iterate of a previous converged solve the first
    subproblem is already optimal.
    """
    opts = options or SolverOptions()
    lo, hi = problem.lower, problem.upper
    z = np.clip(problem.initial_guess, lo, hi)
    m = problem.m
    lam = np.zeros(m) if multipliers is None else np.asarray(multipliers, dtype=float).copy()
    if lam.shape != (m,):
        raise ValidationError("multiplier warm start has the wrong size")
    rho = opts.penalty if penalty is None else float(penalty)

    blocks = problem.hessian_blocks
    if blocks is None and problem.n <= opts.dense_hessian_limit:
        blocks = np.full(problem.n, -1)
    colouring = _Colouring(blocks) if blocks is not None else None
    newton = _ShiftedSolver(blocks < 0) if blocks is not None else None

    def jt_product(zz, y):
        if problem.jacobian_vjp is not None:
            return problem.jacobian_vjp(zz, y)
        return problem.jacobian(zz).T @ y

    def constraint_parts(zz):
        if m == 0:
            return np.zeros(0), None
        c = _checked(problem.constraints(zz), "constraint residual", zz)
        return c, problem.jacobian(zz)

    history: list = []
    merit_trace: list = []
    inner_total = 0
    status = MAX_ITERATIONS
    c, J = constraint_parts(z)
    prev_norm = np.linalg.norm(c, np.inf) if m else 0.0
    first_outer = 1
    if multipliers is not None:
        # a warm start may already be optimal; accept it without moving
        f, g = problem.objective(z)
        g_lag = g + (J.T @ lam if m else 0.0)
        kkt = float(np.linalg.norm(_projected_gradient(z, g_lag, lo, hi), np.inf)) if len(z) else 0.0
        eq_norm = float(prev_norm)
        history.append((1, float(f), eq_norm, kkt, 0.0))
        first_outer = 2
        if eq_norm <= opts.tol_eq and kkt <= opts.tol_kkt:
            status = CONVERGED

    for outer in range(first_outer, opts.max_outer + 1):
        if status == CONVERGED:
            break
        lam_k, rho_k = lam.copy(), rho
        # loose subproblems early, tight once the multipliers settle
        gtol = max(0.5 * opts.tol_kkt, 10.0 ** (-2 - outer)) if m else 0.5 * opts.tol_kkt

        def merit(zz, lam_k=lam_k, rho_k=rho_k):
            f, g = problem.objective(zz)
            _checked(f, "objective", zz)
            _checked(g, "objective gradient", zz)
            if m == 0:
                return float(f), np.asarray(g, dtype=float)
            cc = _checked(problem.constraints(zz), "constraint residual", zz)
            y = lam_k + rho_k * cc
            return float(f + lam_k @ cc + 0.5 * rho_k * cc @ cc), g + jt_product(zz, y)

        z_prev = z
        if colouring is not None:

            def lagrangian_grad(zz, lam_k=lam_k, rho_k=rho_k):
                y = lam_k + rho_k * problem.constraints(zz) if m else None

                def grad(p):
                    gp = np.asarray(problem.objective(p)[1], dtype=float)
                    return gp + jt_product(p, y) if m else gp

                return grad

            def penalty_jac(zz, rho_k=rho_k):
                if m == 0:
                    return sp.csr_matrix((problem.n, problem.n))
                JJ = problem.jacobian(zz)
                return rho_k * (JJ.T @ JJ)

            z, nit, failed = _newton_subproblem(
                merit, lagrangian_grad, penalty_jac, z, lo, hi, colouring, newton, gtol,
                opts.max_inner, merit_trace, outer,
            )
        else:
            z, nit, failed = _lbfgs_subproblem(
                merit, z, lo, hi, gtol, opts.lbfgs_max_inner, merit_trace, outer
            )
        inner_total += nit

        f, g = problem.objective(z)
        c, J = constraint_parts(z)
        eq_norm = float(np.linalg.norm(c, np.inf)) if m else 0.0
        if m:
            lam = lam_k + rho_k * c
            g_lag = g + J.T @ lam
        else:
            g_lag = np.asarray(g, dtype=float)
        kkt = float(np.linalg.norm(_projected_gradient(z, g_lag, lo, hi), np.inf)) if len(z) else 0.0
        step = float(np.linalg.norm(z - z_prev))
        history.append((outer, float(f), eq_norm, kkt, step))
        logger.debug("outer %d f=%.10g |c|=%.2e kkt=%.2e rho=%.1e inner=%d",
                     outer, f, eq_norm, kkt, rho_k, nit)

        if eq_norm <= opts.tol_eq and kkt <= opts.tol_kkt:
            status = CONVERGED
            break
        if m == 0:
            status = LINE_SEARCH_FAILURE if failed else MAX_ITERATIONS
            break
        if eq_norm > opts.tol_eq and eq_norm > opts.required_decrease * prev_norm:
            rho = min(rho * opts.penalty_growth, opts.penalty_max)
        prev_norm = eq_norm
        if outer == opts.max_outer:
            status = LINE_SEARCH_FAILURE if failed else MAX_ITERATIONS

    f, g = problem.objective(z)
    g_lag = g + (J.T @ lam if m else 0.0)
    return NlpSolution(
        z=z,
        objective_value=float(f),
        equality_residual_norm=eq_norm,
        kkt_residual=kkt,
        bound_multipliers=_bound_multipliers(z, g_lag, lo, hi),
        eq_multipliers=lam,
        status=status,
        iterations=len(history),
        inner_iterations=inner_total,
        penalty=rho,
        history=history,
        merit_trace=merit_trace,
    )


def write_log(solution: NlpSolution, path) -> None:
    """Write the outer-iteration log as CSV."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "objective", "eq_residual", "kkt_residual", "step_norm"])
        for row in solution.history:
            w.writerow([row[0], *(repr(v) for v in row[1:])])


@dataclass
class DerivativeReport:
    max_gradient_error: float
    max_jacobian_error: float
    flagged_gradient: list
    flagged_jacobian: list

    @property
    def ok(self) -> bool:
        return not self.flagged_gradient and not self.flagged_jacobian


def _rel_err(analytic, numeric):
    return np.abs(analytic - numeric) / np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))


def check_derivatives(problem: NlpProblem, z, flag_tol: float = 1e-4) -> DerivativeReport:
    """Compare analytic derivatives with central finite differences.

    The step for variable i is ``1e-6 (1 + |z_i|)``; the error of an entry is
    ``|a - d| / max(1, |a|, |d|)``.
    """
    z = np.asarray(z, dtype=float)
    _, g = problem.objective(z)
    g = np.asarray(g, dtype=float)
    m = problem.m
    J = problem.jacobian(z).toarray() if m else np.zeros((0, problem.n))
    g_fd = np.empty(problem.n)
    J_fd = np.empty((m, problem.n))
    for i in range(problem.n):
        h = 1e-6 * (1.0 + abs(z[i]))
        zp, zm = z.copy(), z.copy()
        zp[i] += h
        zm[i] -= h
        g_fd[i] = (problem.objective(zp)[0] - problem.objective(zm)[0]) / (2 * h)
        if m:
            J_fd[:, i] = (problem.constraints(zp) - problem.constraints(zm)) / (2 * h)
    ge = _rel_err(g, g_fd)
    je = _rel_err(J, J_fd)
    return DerivativeReport(
        max_gradient_error=float(ge.max(initial=0.0)),
        max_jacobian_error=float(je.max(initial=0.0)),
        flagged_gradient=[int(i) for i in np.flatnonzero(ge > flag_tol)],
        flagged_jacobian=[(int(r), int(c)) for r, c in zip(*np.nonzero(je > flag_tol))],
    )


def coo_from_blocks(rows, cols, vals):
    """Concatenate COO pieces into flat ``(rows, cols, values)`` arrays."""
    r = np.concatenate([np.ravel(a) for a in rows])
    c = np.concatenate([np.ravel(a) for a in cols])
    v = np.concatenate([np.ravel(a) for a in vals])
    return r, c, v


def sparse_from_blocks(rows, cols, vals, shape):
    """Assemble a CSR matrix from concatenated COO pieces (duplicates summed)."""
    r, c, v = coo_from_blocks(rows, cols, vals)
    return sp.csr_matrix((v, (r, c)), shape=shape)


def coo_vjp(coo, y, n):
    """``J^T y`` for a Jacobian given as COO triplets."""
    r, c, v = coo
    return np.bincount(c, weights=v * y[r], minlength=n)
