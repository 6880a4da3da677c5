"""Iterative sequence optimisation on top of switching time optimisation.

Starting from a sequence rich enough to contain the optimal one, stages are
removed until every remaining stage has a positive duration and satisfies
its timing bound.  Stages that sit against a softened bound (positive slack)
are undecided: the one with the largest slack alternately gets a slack price
``a`` (satisfy the bound) or a drive price ``b`` (shrink to zero), with prices
growing each time the same stage is chosen again.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InfeasibleError, SolverError, ValidationError
from .model import ProblemSpec
from .nlp import SolverOptions
from .sto import Sequence, StoSolution, default_nodes_per_stage, solve_sto

#: Durations below this are treated as zero (seconds).
EPS_W = 1e-6
#: Slacks below this are treated as zero (seconds).
EPS_E = 1e-6
#: Slacks closer than this count as a tie for the removal candidate.
TIE_TOL = 1e-9


@dataclass(frozen=True)
class CostSchedule:
    """Slack and drive prices ``(a, b)`` by repetition count.

    Repetition 0 prices the slack only; every later repetition swaps which
    price is active and raises it by a decade.  Rows past ``table`` follow the
    same pattern up to ``cap``; asking for a row beyond the cap signals that
    the stage can neither be removed nor made feasible.
    """

    table: tuple = ((1.0, 0.0), (0.0, 10.0), (100.0, 0.0), (0.0, 1e3), (1e4, 0.0))
    cap: float = 1e8

    def row(self, k: int) -> tuple:
        if k < 0:
            raise ValidationError("repetition count must be non-negative")
        if k < len(self.table):
            a, b = self.table[k]
        else:
            a, b = (10.0**k, 0.0) if k % 2 == 0 else (0.0, 10.0**k)
        if max(a, b) > self.cap:
            raise InfeasibleError(f"repetition {k} exceeds the price cap {self.cap:g}")
        return float(a), float(b)

    @property
    def max_repetition(self) -> int:
        k = 0
        while True:
            try:
                self.row(k + 1)
            except InfeasibleError:
                return k
            k += 1


@dataclass(frozen=True)
class SequenceFilter:
    """Conditional constraints on sequences.

    ``forbidden_transitions`` holds ``(from, to)`` stage pairs that may not be
    adjacent; ``prerequisites`` holds ``(stage, options)`` pairs meaning
    ``stage`` may only appear after one of ``options`` has appeared;
    ``predicate`` is any extra test on the stage tuple.
    """

    forbidden_transitions: tuple = ()
    prerequisites: tuple = ()
    predicate: Optional[Callable] = None

    def accepts(self, stages) -> bool:
        stages = [tuple(float(v) for v in s) for s in stages]
        banned = {(_key(a), _key(b)) for a, b in self.forbidden_transitions}
        if any((s, t) in banned for s, t in zip(stages, stages[1:])):
            return False
        for stage, options in self.prerequisites:
            stage, options = _key(stage), {_key(o) for o in options}
            for i, s in enumerate(stages):
                if s == stage and not options.intersection(stages[:i]):
                    return False
        return self.predicate is None or bool(self.predicate(tuple(stages)))


def _key(stage) -> tuple:
    return tuple(float(v) for v in stage)


def enumerate_initial_sequence(value_set, length: int,
                               sequence_filter: SequenceFilter | None = None) -> Sequence:
    """Cycle through the admissible values until ``length`` stages are placed.

    Values are visited in decreasing binary order with the last input the most
    significant bit; for two inputs this is ``(1,1), (0,1), (1,0), (0,0)``.
    With a filter, each position takes the next value in the cycle that keeps
    the prefix acceptable.
    """
    if length < 1:
        raise ValidationError("an initial sequence needs at least one stage")
    values = sorted({_key(v) for v in value_set}, key=lambda v: tuple(reversed(v)), reverse=True)
    if not values:
        raise ValidationError("empty value set")
    stages: list = []
    nxt = 0
    for _ in range(length):
        for shift in range(len(values)):
            cand = values[(nxt + shift) % len(values)]
            if sequence_filter is None or sequence_filter.accepts(stages + [cand]):
                stages.append(cand)
                nxt = (nxt + shift + 1) % len(values)
                break
        else:
            raise ValidationError(f"the filter rejects every value at position {len(stages)}")
    return Sequence(tuple(stages))


def remove_zero_stages(sol: StoSolution, seq: Sequence, eps_w: float = EPS_W):
    """Drop stages with ``w < eps_w``; returns ``(sequence, removed indices)``."""
    w = sol.W.w
    if len(w) != seq.ns:
        raise ValidationError("solution and sequence differ in length")
    removed = [int(i) for i in np.flatnonzero(w < eps_w)]
    if len(removed) == seq.ns:
        raise ValidationError("every stage has zero duration; the solution is malformed")
    return seq.without(removed), removed


def select_candidate(sol: StoSolution, eps_e: float = EPS_E) -> Optional[int]:
    """Stage with the largest slack above ``eps_e``; ties go to the lowest index."""
    e = np.asarray(sol.slacks, dtype=float)
    if not np.any(e > eps_e):
        return None
    return int(np.flatnonzero(e >= e.max() - TIE_TOL)[0])


def alternate_costs(counters: list, r: int, schedule: CostSchedule) -> tuple:
    """Advance stage ``r`` to its next repetition and return its new ``(a, b)``."""
    if not 0 <= r < len(counters):
        raise ValidationError(f"stage index {r} out of range")
    counters[r] += 1
    return schedule.row(counters[r])


@dataclass
class IterationRecord:
    """One switching time optimisation within the sequence loop."""

    iteration: int
    sequence: Sequence
    sequence_after: Sequence
    a: list
    b: list
    repetitions: list
    w: list
    e: list
    removed: list
    candidate: Optional[int]
    cost: float
    penalized_cost: float
    solver_iterations: int
    wall_time: float
    duration_multipliers: list = field(default_factory=list)
    next_prices: tuple = (0.0, 0.0)

    def summary(self) -> str:
        cand = "-" if self.candidate is None else str(self.candidate)
        if self.candidate is None:
            a = b = "-"
        else:
            a, b = f"{self.next_prices[0]:g}", f"{self.next_prices[1]:g}"
        return f"iter={self.iteration} cost={self.cost:.6f} removed={self.removed} candidate={cand} a={a} b={b}"

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "sequence": self.sequence.to_list(),
            "sequence_after": self.sequence_after.to_list(),
            "a": self.a,
            "b": self.b,
            "repetitions": self.repetitions,
            "w": self.w,
            "e": self.e,
            "removed": self.removed,
            "candidate": self.candidate,
            "candidate_prices": list(self.next_prices) if self.candidate is not None else None,
            "cost": self.cost,
            "penalized_cost": self.penalized_cost,
            "solver_iterations": self.solver_iterations,
            "duration_multipliers": self.duration_multipliers,
            "wall_time": self.wall_time,
        }


def write_iteration_log(records, path) -> None:
    with open(path, "w") as fh:
        json.dump([r.to_dict() for r in records], fh, indent=2)


def read_iteration_log(path) -> list:
    """Load a log written by :func:`write_iteration_log` as a list of dicts."""
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise ValidationError(f"{path}: expected a JSON array")
    return data


def run_isto(
    spec: ProblemSpec,
    initial: Sequence,
    lower_bounds=None,
    schedule: CostSchedule | None = None,
    sequence_filter: SequenceFilter | None = None,
    *,
    m: int | None = None,
    eps_w: float = EPS_W,
    eps_e: float = EPS_E,
    options: SolverOptions | None = None,
    echo: Callable | None = None,
):
    """Remove redundant or infeasible stages from ``initial``.

    ``lower_bounds`` gives one softened duration bound per initial stage.
    Each loop solves the switching time problem; with all slacks and
    durations clean it stops.  Otherwise the largest-slack stage gets its
    next prices and the problem is solved again, after which zero-duration
    stages are dropped.  Every solve is one iteration; ``echo`` receives a
    summary line per iteration.

    Returns ``(final solution, iteration records)``.  Raises
    :class:`InfeasibleError` when a stage runs through the whole price
    schedule and :class:`SolverError` (with the log attached) when a solve
    fails or ``10 * ns`` iterations pass.
    """
    schedule = schedule or CostSchedule()
    initial.check_admissible(spec)
    if sequence_filter is not None and not sequence_filter.accepts(initial.stages):
        raise ValidationError("the initial sequence is rejected by the filter")
    lb = np.zeros(initial.ns) if lower_bounds is None else np.asarray(lower_bounds, dtype=float)
    if lb.shape != (initial.ns,):
        raise ValidationError("need one lower bound per initial stage")
    seq = initial
    counters = [0] * seq.ns
    a0, b0 = schedule.row(0)
    a, b = [a0] * seq.ns, [b0] * seq.ns
    records: list = []
    cap = 10 * initial.ns
    state = {"prev": None, "kept": None}

    def run_solve():
        if len(records) >= cap:
            raise SolverError(f"no clean sequence after {cap} iterations", log=records)
        try:
            sol = solve_sto(spec, seq, m if m is not None else default_nodes_per_stage(seq.ns),
                            lb, a, b, warm_start=state["prev"], kept=state["kept"], options=options)
        except SolverError as exc:
            exc.log = records
            raise
        state["prev"], state["kept"] = sol, None
        rec = IterationRecord(
            iteration=len(records) + 1,
            sequence=seq,
            sequence_after=seq,
            a=list(a),
            b=list(b),
            repetitions=list(counters),
            w=sol.W.w.tolist(),
            e=sol.slacks.tolist(),
            removed=[],
            candidate=None,
            cost=sol.cost,
            penalized_cost=sol.penalized_cost,
            solver_iterations=sol.nlp.iterations,
            wall_time=sol.wall_time,
            duration_multipliers=sol.duration_multipliers().tolist(),
        )
        records.append(rec)
        return sol, rec

    def emit(rec):
        if echo is not None:
            echo(rec.summary())

    sol, rec = run_solve()
    while True:
        r = select_candidate(sol, eps_e)
        if r is not None:
            rec.candidate = r
            try:
                a[r], b[r] = alternate_costs(counters, r, schedule)
            except InfeasibleError as exc:
                exc.log = records
                emit(rec)
                raise
            rec.next_prices = (a[r], b[r])
            emit(rec)
            sol, rec = run_solve()
        elif np.all(sol.W.w >= eps_w):
            emit(rec)
            return sol, records
        new_seq, removed = remove_zero_stages(sol, seq, eps_w)
        rec.removed, rec.sequence_after = removed, new_seq
        if removed:
            kept = [i for i in range(seq.ns) if i not in set(removed)]
            seq, lb = new_seq, lb[kept]
            counters = [counters[i] for i in kept]
            a, b = [a[i] for i in kept], [b[i] for i in kept]
            state["kept"] = kept
        emit(rec)
        sol, rec = run_solve()
