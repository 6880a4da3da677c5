"""Switching time optimisation for a fixed stage sequence.

Each stage ``i`` is mapped to the unit interval ``[i, i+1]`` of a virtual
time ``tau`` and the physical time follows ``dt/dtau = w_i``, where ``w_i`` is
the dwell duration of the stage.  Durations become smooth decision
variables: the discrete inputs are constants per stage and the dynamics and
running cost are scaled by ``w``.

Every stage carries ``m`` uniform Euler intervals in ``tau``; by default
``m`` is chosen per solve so that the whole sequence has about 300.  A lower bound
``lb_i`` on a dwell time (a minimum uptime, say) is softened to
``w_i + e_i >= lb_i`` with a slack ``e_i >= 0`` priced at ``a_i e_i^2 / 2``;
``b_i w_i^2 / 2`` pushes a stage towards zero length.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import shooting
from .errors import IntegrationError, SolverError, ValidationError
from .model import ProblemSpec, Trajectory, simulate
from .nlp import NlpProblem, NlpSolution, SolverOptions, coo_from_blocks, coo_vjp, solve

#: Durations shorter than this fraction of the horizon are dropped from
#: t-domain trajectories (they are inert and would repeat a time stamp).
ZERO_LENGTH = 1e-12
#: Iteration budget of a warm-started solve before it restarts cold.
WARM_MAX_INNER = 100
WARM_MAX_OUTER = 30


@dataclass(frozen=True)
class Sequence:
    """Ordered operation stages, each a constant discrete-input vector."""

    stages: tuple

    def __post_init__(self):
        stages = tuple(tuple(float(v) for v in s) for s in self.stages)
        if not stages:
            raise ValidationError("a sequence needs at least one stage")
        if len({len(s) for s in stages}) != 1:
            raise ValidationError("all stages need the same number of inputs")
        object.__setattr__(self, "stages", stages)

    @property
    def ns(self) -> int:
        return len(self.stages)

    def __len__(self) -> int:
        return self.ns

    def as_array(self) -> np.ndarray:
        return np.array(self.stages, dtype=float)

    def check_admissible(self, spec: ProblemSpec) -> None:
        allowed = {tuple(float(v) for v in u) for u in spec.discrete_value_set}
        for i, s in enumerate(self.stages):
            if s not in allowed:
                raise ValidationError(f"stage {i} value {s} is not in the discrete value set")

    def without(self, indices) -> "Sequence":
        drop = set(int(i) for i in indices)
        return Sequence(tuple(s for i, s in enumerate(self.stages) if i not in drop))

    def to_list(self) -> list:
        return [[int(v) if float(v).is_integer() else v for v in s] for s in self.stages]


@dataclass
class DurationSet:
    """Dwell durations ``w_i >= 0`` of the stages of a sequence."""

    w: np.ndarray

    def __post_init__(self):
        self.w = np.atleast_1d(np.asarray(self.w, dtype=float))
        if self.w.ndim != 1 or len(self.w) == 0:
            raise ValidationError("durations must be a non-empty vector")
        if np.any(self.w < 0) or not np.all(np.isfinite(self.w)):
            raise ValidationError("durations must be finite and non-negative")

    @property
    def ns(self) -> int:
        return len(self.w)

    @property
    def total(self) -> float:
        return float(self.w.sum())

    def switching_times(self) -> np.ndarray:
        """Stage boundaries ``t(0), t(1), ..., t(ns)`` relative to the start."""
        return np.concatenate([[0.0], np.cumsum(self.w)])


def _durations(W) -> DurationSet:
    return W if isinstance(W, DurationSet) else DurationSet(W)


def w_of_tau(W, tau: float) -> float:
    """Piecewise-constant duration at virtual time ``tau``; ``tau = ns`` gives the last."""
    W = _durations(W)
    if not 0.0 <= tau <= W.ns:
        raise ValidationError(f"tau={tau} outside [0, {W.ns}]")
    return float(W.w[min(int(np.floor(tau)), W.ns - 1)])


def time_of_tau(W, tau: float) -> float:
    """Physical time elapsed at virtual time ``tau``."""
    W = _durations(W)
    if not 0.0 <= tau <= W.ns:
        raise ValidationError(f"tau={tau} outside [0, {W.ns}]")
    i = min(int(np.floor(tau)), W.ns - 1)
    return float(W.switching_times()[i] + (tau - i) * W.w[i])


def tau_of_time(W, t: float) -> float:
    """Smallest virtual time at which ``t`` is reached (skips zero-length stages)."""
    W = _durations(W)
    cum = W.switching_times()
    if not 0.0 <= t <= cum[-1]:
        raise ValidationError(f"t={t} outside [0, {cum[-1]}]")
    i = int(np.searchsorted(cum, t, side="left"))
    if cum[i] == t:
        return float(i)
    return float(i - 1 + (t - cum[i - 1]) / W.w[i - 1])


def default_nodes_per_stage(ns: int, total: int = 300, minimum: int = 20) -> int:
    """Uniform per-stage resolution giving about ``total`` intervals overall."""
    return max(minimum, int(round(total / ns)))


def uptime_bounds(sequence: Sequence, min_uptime: float) -> np.ndarray:
    """Per-stage lower bounds on durations: ``min_uptime`` for stages with an input on."""
    on = np.any(sequence.as_array() != 0, axis=1)
    return np.where(on, float(min_uptime), 0.0)


class StoTranscription:
    """Euler multiple shooting of the time-transformed problem.

    Variable layout: states on all ``ns*m + 1`` nodes, free continuous inputs
    per interval, durations ``w``, then slacks ``e`` and surpluses ``s`` of
    the softened timing constraints.  Constraints: initial condition, Euler
    matching, ``w_i + e_i - s_i = lb_i`` per softened stage and
    ``sum(w) = tf - t0``.

    A stage gets a slack only when it has a positive bound and a positive
    slack price; a bound with zero price is dropped from the problem (the
    stage is being tested for removal) and its violation is reported.
    """

    def __init__(self, spec: ProblemSpec, sequence: Sequence, m: int,
                 lower_bounds=None, a=None, b=None):
        if m < 1:
            raise ValidationError(f"need at least one node per stage, got {m}")
        sequence.check_admissible(spec)
        ns = sequence.ns
        self.spec = spec
        self.sequence = sequence
        self.m = m
        self.ns = ns
        self.lb = self._per_stage(lower_bounds, 0.0, "lower_bounds")
        self.a = self._per_stage(a, 1.0, "a")
        self.b = self._per_stage(b, 0.0, "b")
        if np.any(self.lb < 0) or np.any(self.a < 0) or np.any(self.b < 0):
            raise ValidationError("bounds and slack prices must be non-negative")
        self.U = np.repeat(sequence.as_array(), m, axis=0)
        self.K = ns * m
        self.stage = np.repeat(np.arange(ns), m)
        self.frac = np.tile(np.arange(m) / m, ns)
        self.soft = np.flatnonzero((self.lb > 0) & (self.a > 0))
        nx = spec.state_dim
        self.fixed = spec.fixed_inputs
        ncf = int((~self.fixed).sum())
        ne = len(self.soft)
        self.ix = np.arange((self.K + 1) * nx).reshape(self.K + 1, nx)
        off = (self.K + 1) * nx
        self.ic = off + np.arange(self.K * ncf).reshape(self.K, ncf)
        off += self.K * ncf
        self.iw = off + np.arange(ns)
        off += ns
        self.ie = off + np.arange(ne)
        off += ne
        self.isur = off + np.arange(ne)
        self.n = off + ne
        self.m_eq = nx + self.K * nx + ne + 1

    def _per_stage(self, values, default, name):
        if values is None:
            return np.full(self.ns, float(default))
        arr = np.broadcast_to(np.asarray(values, dtype=float), (self.ns,)).copy()
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"{name} must be finite")
        return arr

    # -- time mapping -----------------------------------------------------

    def _grid(self, w):
        """Step lengths, left times and ``d t_k / d w_l`` of every interval."""
        cum = np.concatenate([[0.0], np.cumsum(w)])
        H = w[self.stage] / self.m
        T = self.spec.t0 + cum[self.stage] + self.frac * w[self.stage]
        dT = (np.arange(self.ns)[None, :] < self.stage[:, None]).astype(float)
        dT[np.arange(self.K), self.stage] = self.frac
        return H, T, dT

    def unpack(self, z):
        X = z[self.ix]
        C = shooting.full_inputs(self.spec, z[self.ic], self.fixed)
        return X, C, z[self.iw], z[self.ie], z[self.isur]

    # -- NLP callbacks ----------------------------------------------------

    def running_cost(self, z) -> float:
        X, C, w, _, _ = self.unpack(z)
        H, T, _ = self._grid(w)
        L = self.spec.stage_cost(X[:-1], self.U, C, T)
        return float(H @ L + self.spec.eval_terminal(X[-1]))

    def objective(self, z):
        spec = self.spec
        X, C, w, e, _ = self.unpack(z)
        H, T, dT = self._grid(w)
        L = spec.stage_cost(X[:-1], self.U, C, T)
        Lx, _, Lc, Lt = spec.stage_cost_gradients(X[:-1], self.U, C, T)
        a_soft = self.a[self.soft]
        value = H @ L + spec.eval_terminal(X[-1]) + 0.5 * a_soft @ e**2 + 0.5 * self.b @ w**2
        g = np.zeros(self.n)
        gx = np.zeros_like(X)
        gx[:-1] = H[:, None] * Lx
        gx[-1] += spec.eval_terminal_gradient(X[-1])
        g[self.ix] = gx
        g[self.ic] = H[:, None] * Lc[:, ~self.fixed]
        gw = np.bincount(self.stage, weights=L / self.m, minlength=self.ns)
        gw += (H * Lt) @ dT
        g[self.iw] = gw + self.b * w
        g[self.ie] = a_soft * e
        return float(value), g

    def constraints(self, z):
        X, C, w, e, s = self.unpack(z)
        H, T, _ = self._grid(w)
        R = shooting.residuals(self.spec, X, self.U, C, T, H)
        timing = w[self.soft] + e - s - self.lb[self.soft]
        total = np.array([w.sum() - self.spec.horizon])
        return np.concatenate([X[0] - self.spec.x0, R.ravel(), timing, total])

    def jacobian(self, z):
        r, c, v = self.jacobian_coo(z)
        return sp.csr_matrix((v, (r, c)), shape=(self.m_eq, self.n))

    def jacobian_vjp(self, z, y):
        return coo_vjp(self.jacobian_coo(z), y, self.n)

    def jacobian_coo(self, z):
        spec = self.spec
        nx = spec.state_dim
        X, C, w, _, _ = self.unpack(z)
        H, T, dT = self._grid(w)
        D = shooting.residual_derivatives(spec, X, self.U, C, T, H)
        rows = nx + np.arange(self.K * nx).reshape(self.K, nx)
        # d r_k / d w_l = D_h dh_k/dw_l + D_t dt_k/dw_l, with dh_k/dw_l = [l == stage_k] / m
        dW = D["t"][:, :, None] * dT[:, None, :]
        dW[np.arange(self.K), :, self.stage] += D["h"] / self.m
        iw = np.broadcast_to(self.iw, (self.K, self.ns))
        ne = len(self.soft)
        r_time = nx + self.K * nx + np.arange(ne)
        r_total = nx + self.K * nx + ne
        pieces = [
            (np.arange(nx), self.ix[0], np.ones(nx)),
            shooting.block_coo(rows, self.ix[1:], np.broadcast_to(np.eye(nx), (self.K, nx, nx))),
            shooting.block_coo(rows, self.ix[:-1], D["x_left"]),
            shooting.block_coo(rows, self.ic, D["c"][:, :, ~self.fixed]),
            shooting.block_coo(rows, iw, dW),
            (r_time, self.iw[self.soft], np.ones(ne)),
            (r_time, self.ie, np.ones(ne)),
            (r_time, self.isur, -np.ones(ne)),
            (np.full(self.ns, r_total), self.iw, np.ones(self.ns)),
        ]
        return coo_from_blocks(*zip(*pieces))

    def bounds(self):
        lo = np.full(self.n, -np.inf)
        hi = np.full(self.n, np.inf)
        cb = self.spec.continuous_input_bounds[~self.fixed]
        lo[self.ic] = cb[:, 0]
        hi[self.ic] = cb[:, 1]
        lo[self.iw] = 0.0
        hi[self.iw] = self.spec.horizon
        lo[self.ie] = 0.0
        lo[self.isur] = 0.0
        return lo, hi

    def initial_guess(self):
        """Equal durations, mid-range inputs and the Euler rollout they produce."""
        z = np.empty(self.n)
        z[self.ic] = self.spec.continuous_input_bounds[~self.fixed].mean(axis=1)
        w = np.full(self.ns, self.spec.horizon / self.ns)
        z[self.iw] = w
        _, T, _ = self._grid(w)
        C = shooting.full_inputs(self.spec, z[self.ic], self.fixed)
        try:
            z[self.ix] = simulate(self.spec, np.append(T, self.spec.tf), self.U, C).states
        except IntegrationError:
            z[self.ix] = self.spec.x0
        gap = self.lb[self.soft] - w[self.soft]
        z[self.ie] = np.maximum(gap, 0.0)
        z[self.isur] = np.maximum(-gap, 0.0)
        return z

    def hessian_blocks(self):
        """Interval k owns x_k and c_k; durations interact with everything."""
        blocks = np.empty(self.n, dtype=int)
        blocks[self.ix] = np.arange(self.K + 1)[:, None]
        blocks[self.ic] = np.arange(self.K)[:, None]
        blocks[self.iw] = -1
        ne = len(self.soft)
        blocks[self.ie] = self.K + 1 + np.arange(ne)
        blocks[self.isur] = self.K + 1 + ne + np.arange(ne)
        return blocks

    def problem(self, initial_guess=None) -> NlpProblem:
        lo, hi = self.bounds()
        return NlpProblem(
            n=self.n,
            m=self.m_eq,
            objective=self.objective,
            constraints=self.constraints,
            jacobian=self.jacobian,
            jacobian_vjp=self.jacobian_vjp,
            lower=lo,
            upper=hi,
            initial_guess=self.initial_guess() if initial_guess is None else initial_guess,
            hessian_blocks=self.hessian_blocks(),
        )

    # -- results ----------------------------------------------------------

    def slacks(self, z) -> np.ndarray:
        """Timing violation per stage: the slack variable, or the gap when unpriced."""
        w = z[self.iw]
        e = np.maximum(self.lb - w, 0.0)
        e[self.soft] = z[self.ie]
        return e

    def trajectory(self, z) -> Trajectory:
        """The solution on the physical time grid; zero-length intervals are skipped."""
        X, C, w, _, _ = self.unpack(z)
        H, T, _ = self._grid(w)
        rates = self.spec.stage_cost(X[:-1], self.U, C, T)
        keep = H > ZERO_LENGTH * self.spec.horizon
        nodes = np.concatenate([np.flatnonzero(keep), [self.K]])
        times = np.concatenate([T[keep], [self.spec.t0 + w.sum()]])
        running = np.concatenate([[0.0], np.cumsum(H[keep] * rates[keep])])
        return Trajectory(times, X[nodes], self.U[keep], C[keep], running,
                          self.spec.eval_terminal(X[-1]))

    def stage_slices(self, i):
        """Node rows and interval rows of stage ``i``."""
        return slice(i * self.m, (i + 1) * self.m)


def transcribe_sto(spec: ProblemSpec, sequence: Sequence, m: int, lower_bounds=None,
                   a=None, b=None) -> NlpProblem:
    return StoTranscription(spec, sequence, m, lower_bounds, a, b).problem()


@dataclass
class StoSolution:
    """Solved durations and slacks of one switching time optimisation."""

    sequence: Sequence
    W: DurationSet
    slacks: np.ndarray
    cost: float
    penalized_cost: float
    trajectory: Trajectory
    nlp: NlpSolution
    transcription: StoTranscription = field(repr=False)
    wall_time: float = 0.0

    @property
    def z(self) -> np.ndarray:
        return self.nlp.z

    def duration_multipliers(self) -> np.ndarray:
        """Bound multipliers of the durations (non-zero where ``w_i`` sits on a bound)."""
        return self.nlp.bound_multipliers[self.transcription.iw]

    def to_dict(self) -> dict:
        tr = self.transcription
        return {
            "sequence": self.sequence.to_list(),
            "w": self.W.w.tolist(),
            "e": self.slacks.tolist(),
            "cost": self.cost,
            "penalized_cost": self.penalized_cost,
            "lower_bounds": tr.lb.tolist(),
            "a": tr.a.tolist(),
            "b": tr.b.tolist(),
            "nodes_per_stage": tr.m,
            "status": self.nlp.status,
            "solver_iterations": self.nlp.iterations,
            "wall_time": self.wall_time,
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def read_sto_json(path) -> dict:
    """Load a solution summary written by :meth:`StoSolution.write_json`."""
    with open(path) as fh:
        data = json.load(fh)
    for key in ("sequence", "w", "e", "cost"):
        if key not in data:
            raise ValidationError(f"{path}: missing '{key}'")
    data["sequence"] = Sequence(tuple(tuple(s) for s in data["sequence"]))
    data["w"] = DurationSet(data["w"])
    data["e"] = np.asarray(data["e"], dtype=float)
    return data


def _resample_stage(values, m_new, nodes: bool):
    """Resample one stage's node values (``m+1`` rows) or interval values (``m`` rows)."""
    m_old = len(values) - 1 if nodes else len(values)
    if m_old == m_new:
        return values
    if nodes:
        src = np.arange(m_old + 1) / m_old
        dst = np.arange(m_new + 1) / m_new
        return np.column_stack([np.interp(dst, src, col) for col in values.T])
    mid = (np.arange(m_new) + 0.5) / m_new
    return values[np.minimum((mid * m_old).astype(int), m_old - 1)]


def _warm_point(tr: StoTranscription, prev: StoSolution, kept):
    """Map a previous solution onto ``tr`` stage by stage.

    ``kept[i]`` is the index in the previous sequence of the new stage ``i``.
    Stage profiles are resampled in ``tau`` when the resolution changed.
    Returns the initial point and equality multipliers.
    """
    old = prev.transcription
    z_old, lam_old = prev.nlp.z, prev.nlp.eq_multipliers
    nx = tr.spec.state_dim
    z = tr.initial_guess()
    lam = np.zeros(tr.m_eq)
    lam[:nx] = lam_old[:nx]
    X_old = z_old[old.ix]
    C_old = z_old[old.ic]
    L_old = lam_old[nx : nx + old.K * nx].reshape(old.K, nx)
    X = np.empty((tr.K + 1, nx))
    C = np.empty((tr.K, C_old.shape[1]))
    L = np.empty((tr.K, nx))
    for i, j in enumerate(kept):
        new, src = tr.stage_slices(i), old.stage_slices(j)
        X[new.start : new.stop + 1] = _resample_stage(X_old[src.start : src.stop + 1], tr.m, True)
        C[new] = _resample_stage(C_old[src], tr.m, False)
        L[new] = _resample_stage(L_old[src], tr.m, False)
    X[-1] = X_old[-1]
    z[tr.ix] = X
    z[tr.ic] = C
    w = z_old[old.iw][list(kept)]
    z[tr.iw] = w
    lam[nx : nx + tr.K * nx] = L.ravel()
    old_pos = {int(s): k for k, s in enumerate(old.soft)}
    for k, i in enumerate(tr.soft):
        j = int(kept[i])
        if j in old_pos:
            z[tr.ie[k]] = z_old[old.ie[old_pos[j]]]
            z[tr.isur[k]] = z_old[old.isur[old_pos[j]]]
            lam[nx + tr.K * nx + k] = lam_old[nx + old.K * nx + old_pos[j]]
        else:
            gap = tr.lb[i] - w[i]
            z[tr.ie[k]] = max(gap, 0.0)
            z[tr.isur[k]] = max(-gap, 0.0)
    lam[-1] = lam_old[-1]
    return z, lam


def solve_sto(spec: ProblemSpec, sequence: Sequence, m: int | None = None, lower_bounds=None,
              a=None, b=None, warm_start: StoSolution | None = None, kept=None,
              options: SolverOptions | None = None) -> StoSolution:
    """Optimise dwell durations and continuous inputs for ``sequence``.

    ``m`` defaults to :func:`default_nodes_per_stage`, so the total
    resolution stays near 300 intervals whatever the sequence length.
    ``warm_start`` seeds states, inputs, durations, slacks and multipliers
    from an earlier solution; ``kept`` lists, for each stage of ``sequence``,
    its index in the earlier sequence (identity by default).  Raises
    :class:`SolverError` unless the solve converges.
    """
    if m is None:
        m = default_nodes_per_stage(sequence.ns)
    tr = StoTranscription(spec, sequence, m, lower_bounds, a, b)
    multipliers = penalty = None
    z0 = None
    if warm_start is not None:
        if kept is None:
            if warm_start.sequence.ns != sequence.ns:
                raise ValidationError("warm start from a different sequence needs 'kept'")
            kept = range(sequence.ns)
        kept = [int(k) for k in kept]
        if len(kept) != sequence.ns:
            raise ValidationError("'kept' needs one entry per stage")
        for i, j in enumerate(kept):
            if warm_start.sequence.stages[j] != sequence.stages[i]:
                raise ValidationError(f"stage {i} does not match stage {j} of the warm start")
        z0, multipliers = _warm_point(tr, warm_start, kept)
        penalty = warm_start.nlp.penalty
    start = time.perf_counter()
    if warm_start is None:
        sol = solve(tr.problem(), options)
    else:
        # a warm start that stalls is abandoned early for a cold start
        opts = options or SolverOptions()
        warm_opts = replace(opts, max_inner=min(opts.max_inner, WARM_MAX_INNER),
                            max_outer=min(opts.max_outer, WARM_MAX_OUTER))
        sol = solve(tr.problem(z0), warm_opts, multipliers=multipliers, penalty=penalty)
        if not sol.converged:
            sol = solve(tr.problem(), options)
    elapsed = time.perf_counter() - start
    if not sol.converged:
        raise SolverError(
            f"switching time optimisation ended with status {sol.status} "
            f"(|c|={sol.equality_residual_norm:.2e}, kkt={sol.kkt_residual:.2e})",
            solution=sol,
        )
    return StoSolution(
        sequence=sequence,
        W=DurationSet(np.maximum(sol.z[tr.iw], 0.0)),
        slacks=tr.slacks(sol.z),
        cost=tr.running_cost(sol.z),
        penalized_cost=sol.objective_value,
        trajectory=tr.trajectory(sol.z),
        nlp=sol,
        transcription=tr,
        wall_time=elapsed,
    )
