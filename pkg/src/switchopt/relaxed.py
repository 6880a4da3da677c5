"""Direct multiple shooting of the relaxed problem.

Discrete inputs are relaxed to the box hull of their value set.  Variables are
ordered as states on all nodes, then relaxed inputs per interval, then the free
continuous inputs per interval (inputs with equal bounds are substituted).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import shooting
from .cia import ControlGrid
from .errors import SolverError, ValidationError
from .model import ProblemSpec, Trajectory
from .nlp import NlpProblem, NlpSolution, SolverOptions, coo_from_blocks, coo_vjp, solve


class RelaxedTranscription:
    """Explicit Euler multiple shooting on ``N`` uniform nodes."""

    def __init__(self, spec: ProblemSpec, N: int = 300):
        if N < 2:
            raise ValidationError(f"need at least 2 nodes, got {N}")
        self.spec = spec
        self.N = N
        self.K = N - 1
        self.h = spec.horizon / self.K
        self.times = spec.t0 + self.h * np.arange(N)
        nx, nu = spec.state_dim, spec.discrete_input_dim
        self.fixed = spec.fixed_inputs
        ncf = int((~self.fixed).sum())
        self.ncf = ncf
        self.ix = np.arange(N * nx).reshape(N, nx)
        off = N * nx
        self.iu = off + np.arange(self.K * nu).reshape(self.K, nu)
        off += self.K * nu
        self.ic = off + np.arange(self.K * ncf).reshape(self.K, ncf)
        self.n = off + self.K * ncf
        self.m = nx * N

    def unpack(self, z):
        X = z[self.ix]
        U = z[self.iu]
        C = shooting.full_inputs(self.spec, z[self.ic], self.fixed)
        return X, U, C

    def objective(self, z):
        spec, h = self.spec, self.h
        X, U, C = self.unpack(z)
        T = self.times[:-1]
        L = spec.stage_cost(X[:-1], U, C, T)
        Lx, Lu, Lc, _ = spec.stage_cost_gradients(X[:-1], U, C, T)
        g = np.zeros(self.n)
        gx = np.zeros_like(X)
        gx[:-1] = h * Lx
        gx[-1] += spec.eval_terminal_gradient(X[-1])
        g[self.ix] = gx
        g[self.iu] = h * Lu
        g[self.ic] = h * Lc[:, ~self.fixed]
        return h * L.sum() + spec.eval_terminal(X[-1]), g

    def constraints(self, z):
        X, U, C = self.unpack(z)
        H = np.full(self.K, self.h)
        R = shooting.residuals(self.spec, X, U, C, self.times[:-1], H)
        return np.concatenate([X[0] - self.spec.x0, R.ravel()])

    def jacobian(self, z):
        r, c, v = self.jacobian_coo(z)
        return sp.csr_matrix((v, (r, c)), shape=(self.m, self.n))

    def jacobian_vjp(self, z, y):
        return coo_vjp(self.jacobian_coo(z), y, self.n)

    def jacobian_coo(self, z):
        spec = self.spec
        nx = spec.state_dim
        X, U, C = self.unpack(z)
        H = np.full(self.K, self.h)
        D = shooting.residual_derivatives(spec, X, U, C, self.times[:-1], H)
        rows = nx + np.arange(self.K * nx).reshape(self.K, nx)
        pieces = [
            (np.arange(nx), self.ix[0], np.ones(nx)),
            shooting.block_coo(rows, self.ix[1:], np.broadcast_to(np.eye(nx), (self.K, nx, nx))),
            shooting.block_coo(rows, self.ix[:-1], D["x_left"]),
            shooting.block_coo(rows, self.iu, D["u"]),
            shooting.block_coo(rows, self.ic, D["c"][:, :, ~self.fixed]),
        ]
        return coo_from_blocks(*zip(*pieces))

    def bounds(self):
        spec = self.spec
        lo = np.full(self.n, -np.inf)
        hi = np.full(self.n, np.inf)
        ub = spec.relaxed_input_bounds()
        lo[self.iu] = ub[:, 0]
        hi[self.iu] = ub[:, 1]
        cb = spec.continuous_input_bounds[~self.fixed]
        lo[self.ic] = cb[:, 0]
        hi[self.ic] = cb[:, 1]
        return lo, hi

    def initial_guess(self):
        z = np.empty(self.n)
        z[self.ix] = self.spec.x0
        z[self.iu] = self.spec.relaxed_input_bounds().mean(axis=1)
        z[self.ic] = self.spec.continuous_input_bounds[~self.fixed].mean(axis=1)
        return z

    def problem(self) -> NlpProblem:
        lo, hi = self.bounds()
        return NlpProblem(
            n=self.n,
            m=self.m,
            objective=self.objective,
            constraints=self.constraints,
            jacobian=self.jacobian,
            jacobian_vjp=self.jacobian_vjp,
            lower=lo,
            upper=hi,
            initial_guess=self.initial_guess(),
            hessian_blocks=self.hessian_blocks(),
        )

    def hessian_blocks(self):
        """Interval k owns x_k, u_k and c_k; the last node is its own block."""
        blocks = np.empty(self.n, dtype=int)
        blocks[self.ix] = np.arange(self.N)[:, None]
        blocks[self.iu] = np.arange(self.K)[:, None]
        blocks[self.ic] = np.arange(self.K)[:, None]
        return blocks

    def trajectory(self, z) -> Trajectory:
        X, U, C = self.unpack(z)
        T = self.times[:-1]
        rates = self.spec.stage_cost(X[:-1], U, C, T)
        running = np.concatenate([[0.0], np.cumsum(self.h * rates)])
        return Trajectory(self.times.copy(), X, U, C, running, self.spec.eval_terminal(X[-1]))


def transcribe_relaxed(spec: ProblemSpec, N: int = 300) -> NlpProblem:
    return RelaxedTranscription(spec, N).problem()


@dataclass
class RelaxedSolution:
    trajectory: Trajectory
    objective_value: float
    relaxed_control_grid: ControlGrid
    nlp: NlpSolution
    wall_time: float = 0.0

    def report(self) -> dict:
        return {
            "objective": self.objective_value,
            "status": self.nlp.status,
            "nodes": len(self.trajectory.times),
            "solver_iterations": self.nlp.iterations,
            "inner_iterations": self.nlp.inner_iterations,
            "equality_residual": self.nlp.equality_residual_norm,
            "kkt_residual": self.nlp.kkt_residual,
            "wall_time": self.wall_time,
        }


def solve_relaxed(spec: ProblemSpec, N: int = 300, options: SolverOptions | None = None) -> RelaxedSolution:
    """Solve the relaxed problem; raises :class:`SolverError` unless converged."""
    import time

    tr = RelaxedTranscription(spec, N)
    start = time.perf_counter()
    sol = solve(tr.problem(), options)
    elapsed = time.perf_counter() - start
    if not sol.converged:
        raise SolverError(
            f"relaxed solve ended with status {sol.status} "
            f"(|c|={sol.equality_residual_norm:.2e}, kkt={sol.kkt_residual:.2e})",
            solution=sol,
        )
    traj = tr.trajectory(sol.z)
    grid = ControlGrid(tr.times[:-1], tr.times[1:], np.clip(traj.discrete_inputs, 0.0, 1.0))
    return RelaxedSolution(traj, sol.objective_value, grid, sol, elapsed)
