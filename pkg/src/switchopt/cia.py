"""Combinatorial integral approximation of relaxed controls.

A relaxed control grid is projected onto binary values so that the maximum
accumulated deviation

    eta = max_i max_k | sum_{j<=k} (a_ij - b_ij) dt_j |

is small.  Controls are rounded independently (several may be on at once).
The branch and bound honours a minimum uptime: every maximal run of ones must
last at least ``min_uptime`` unless it reaches the end of the horizon.  Every
control is assumed off before the first interval.
"""

from __future__ import annotations

import csv
import heapq
import time
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

#: Slack used when comparing durations and deviation values.
TOL = 1e-9


@dataclass
class ControlGrid:
    """Piecewise-constant controls: one row of ``values`` per interval."""

    t_left: np.ndarray
    t_right: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.t_left = np.asarray(self.t_left, dtype=float)
        self.t_right = np.asarray(self.t_right, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if not (len(self.t_left) == len(self.t_right) == self.values.shape[0]):
            raise ValidationError("grid intervals and values disagree in length")
        if np.any(self.t_right <= self.t_left):
            raise ValidationError("grid intervals must have positive length")

    @classmethod
    def uniform(cls, values, dt: float = 1.0, t0: float = 0.0) -> "ControlGrid":
        values = np.asarray(values, dtype=float)
        K = values.shape[0]
        edges = t0 + dt * np.arange(K + 1)
        return cls(edges[:-1], edges[1:], values)

    @property
    def dt(self) -> np.ndarray:
        return self.t_right - self.t_left

    @property
    def n_controls(self) -> int:
        return self.values.shape[1]

    def is_binary(self) -> bool:
        return bool(np.all((self.values == 0) | (self.values == 1)))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_left", "t_right"] + [f"u{i + 1}" for i in range(self.n_controls)])
            for a, b, row in zip(self.t_left, self.t_right, self.values):
                w.writerow([repr(float(a)), repr(float(b)), *(repr(float(v)) for v in row)])

    @classmethod
    def from_csv(cls, path) -> "ControlGrid":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[:2] != ["t_left", "t_right"]:
                raise ValidationError(f"{path}: expected a t_left,t_right,... header")
            data = np.array([[float(v) for v in row] for row in reader], dtype=float)
        if data.size == 0:
            raise ValidationError(f"{path}: empty grid")
        return cls(data[:, 0], data[:, 1], data[:, 2:])


def evaluate_eta(relaxed: ControlGrid, binary: ControlGrid) -> float:
    """Maximum accumulated deviation between two grids on the same intervals."""
    if (
        relaxed.values.shape != binary.values.shape
        or not np.allclose(relaxed.t_left, binary.t_left)
        or not np.allclose(relaxed.t_right, binary.t_right)
    ):
        raise ValidationError("grids do not match")
    if relaxed.values.size == 0:
        return 0.0
    dev = np.cumsum((relaxed.values - binary.values) * relaxed.dt[:, None], axis=0)
    return float(np.abs(dev).max())


def sum_up_rounding(grid: ControlGrid) -> ControlGrid:
    """Greedy accumulator rounding, each control independently."""
    rel = grid.values
    if np.any(rel < -TOL) or np.any(rel > 1 + TOL):
        raise ValidationError("relaxed values must lie in [0, 1]")
    dt = grid.dt
    out = np.zeros_like(rel)
    target = np.zeros(grid.n_controls)
    placed = np.zeros(grid.n_controls)
    for k in range(len(dt)):
        target += rel[k] * dt[k]
        bit = (target - placed) >= 0.5 * dt[k] - 1e-12
        out[k] = bit
        placed += bit * dt[k]
    return ControlGrid(grid.t_left, grid.t_right, out)


def dwell_violations(grid: ControlGrid, min_uptime: float) -> list:
    """``(control, start_interval, duration)`` for each run of ones that is too short."""
    bad = []
    v = grid.values
    K = v.shape[0]
    for i in range(grid.n_controls):
        k = 0
        while k < K:
            if v[k, i] != 1:
                k += 1
                continue
            start = k
            while k < K and v[k, i] == 1:
                k += 1
            duration = grid.t_right[k - 1] - grid.t_left[start]
            if k < K and duration < min_uptime - TOL:
                bad.append((i, start, float(duration)))
    return bad


# ---------------------------------------------------------------------------
# Branch and bound

OFF = -1
SATISFIED = -2


def _child(run, k, bit, t_left, t_right, min_uptime):
    """Next run state after placing ``bit`` on interval ``k``; None if forbidden.

    ``run`` is OFF, SATISFIED, or the start index of an on-run that is still
    shorter than the minimum uptime.
    """
    if bit == 0:
        return None if run >= 0 else OFF
    start = k if run == OFF else run
    if run == SATISFIED:
        return SATISFIED
    if t_right[k] - t_left[start] >= min_uptime - TOL:
        return SATISFIED
    return start


@dataclass
class CiaResult:
    grid: ControlGrid
    eta: float
    nodes_expanded: int
    wall_time: float
    optimal: bool = True


def _best_first(prefix, dt, t_left, t_right, min_uptime, node_limit):
    """Smallest achievable max deviation for one control.

    Nodes are prefixes of decided intervals; the bound of a node is the max
    deviation over its prefix, which never decreases along a branch.
    Returns ``(eta, expanded, exhausted_budget)``.
    """
    K = len(dt)
    incumbent = float(np.abs(prefix).max()) if K else 0.0  # all-off is always feasible
    heap = [(0.0, 0, 0, 0.0, OFF)]  # (bound, -depth, tie, placed, run)
    seen = {}
    counter = 0
    expanded = 0
    while heap:
        bound, neg_k, _, placed, run = heapq.heappop(heap)
        if bound >= incumbent:
            break
        k = -neg_k
        if k == K:
            return bound, expanded, False
        expanded += 1
        if expanded > node_limit:
            return incumbent, expanded, True
        for bit in (0, 1):
            nrun = _child(run, k, bit, t_left, t_right, min_uptime)
            if nrun is None:
                continue
            nplaced = placed + bit * dt[k]
            nb = max(bound, abs(prefix[k] - nplaced))
            if nb >= incumbent:
                continue
            key = (k + 1, round(nplaced, 9), nrun)
            if seen.get(key, np.inf) <= nb:
                continue
            seen[key] = nb
            counter += 1
            heapq.heappush(heap, (nb, -(k + 1), counter, nplaced, nrun))
    return incumbent, expanded, False


def _lexmin_within(prefix, dt, t_left, t_right, min_uptime, limit):
    """Lexicographically smallest feasible word with max deviation <= limit."""
    K = len(dt)
    dead = set()
    bits = []
    # frame: [interval k, placed duration, run state, next bit to try]
    frames = [[0, 0.0, OFF, 0]]
    while frames:
        frame = frames[-1]
        k, placed, run, nxt = frame
        if k == K:
            return bits
        if nxt > 1:
            dead.add((k, round(placed, 9), run))
            frames.pop()
            if bits:
                bits.pop()
            continue
        frame[3] += 1
        nrun = _child(run, k, nxt, t_left, t_right, min_uptime)
        if nrun is None:
            continue
        nplaced = placed + nxt * dt[k]
        if abs(prefix[k] - nplaced) > limit:
            continue
        if (k + 1, round(nplaced, 9), nrun) in dead:
            continue
        bits.append(nxt)
        frames.append([k + 1, nplaced, nrun, 0])
    return None


def solve_cia_bnb(grid: ControlGrid, min_uptime: float = 0.0, node_limit: int = 10**7) -> CiaResult:
    """Binary grid minimising eta under a minimum uptime.

    Among optimal grids the lexicographically smallest word is returned, the
    word being read time-major, control-minor.  Because controls are
    independent, that word is the per-control lexicographic minimum among
    words within the joint optimum.
    """
    if min_uptime < 0:
        raise ValidationError("min_uptime must be non-negative")
    rel = grid.values
    if np.any(rel < -TOL) or np.any(rel > 1 + TOL):
        raise ValidationError("relaxed values must lie in [0, 1]")
    start = time.perf_counter()
    dt, tl, tr = grid.dt, grid.t_left, grid.t_right
    prefixes = np.cumsum(rel * dt[:, None], axis=0)
    etas, expanded, capped = [], 0, False
    for i in range(grid.n_controls):
        eta_i, n_i, cap_i = _best_first(prefixes[:, i], dt, tl, tr, min_uptime, node_limit)
        etas.append(eta_i)
        expanded += n_i
        capped |= cap_i
    eta_star = max(etas, default=0.0)
    out = np.zeros_like(rel)
    for i in range(grid.n_controls):
        word = _lexmin_within(prefixes[:, i], dt, tl, tr, min_uptime, eta_star + TOL)
        if word is None:  # only reachable after a node-limit cutoff
            word = [0] * len(dt)
        out[:, i] = word
    binary = ControlGrid(tl, tr, out)
    return CiaResult(
        grid=binary,
        eta=evaluate_eta(grid, binary),
        nodes_expanded=expanded,
        wall_time=time.perf_counter() - start,
        optimal=not capped,
    )
