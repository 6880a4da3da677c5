"""Switched optimal control problems, the Double Tank instance and simulation.

All model callbacks are vectorised over a leading "node" axis: states are
passed as ``(K, nx)`` arrays, discrete inputs as ``(K, nu)``, continuous inputs
as ``(K, nc)`` and times as ``(K,)``.  A problem of the form

    min  int_{t0}^{tf} L(x, u, c, t) dt + M(x(tf))
    s.t. dx/dt = f(x, u, c, t),  x(t0) = x0,
         u(t) in a finite set,  c_lo <= c(t) <= c_hi

is described by a :class:`ProblemSpec`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import IntegrationError, ValidationError

#: Floor used by the smoothed square root of the tank model.
SQRT_EPS = 1e-8


@dataclass(frozen=True)
class ProblemSpec:
    """A switched optimal control problem.

    ``dynamics_jacobians`` returns ``(fx, fu, fc, ft)`` with shapes
    ``(K, nx, nx)``, ``(K, nx, nu)``, ``(K, nx, nc)`` and ``(K, nx)``;
    ``stage_cost_gradients`` returns ``(Lx, Lu, Lc, Lt)`` with shapes
    ``(K, nx)``, ``(K, nu)``, ``(K, nc)`` and ``(K,)``.
    """

    state_dim: int
    discrete_input_dim: int
    continuous_input_dim: int
    dynamics: Callable
    dynamics_jacobians: Callable
    stage_cost: Callable
    stage_cost_gradients: Callable
    continuous_input_bounds: np.ndarray
    discrete_value_set: tuple
    t0: float
    tf: float
    x0: np.ndarray
    terminal_cost: Optional[Callable] = None
    terminal_cost_gradient: Optional[Callable] = None
    # h(x, u, c, t) <= 0; carried for completeness, no transcription uses it
    path_constraint: Optional[Callable] = None
    name: str = "problem"

    def __post_init__(self):
        if not self.tf > self.t0:
            raise ValidationError(f"need tf > t0, got t0={self.t0}, tf={self.tf}")
        bounds = np.asarray(self.continuous_input_bounds, dtype=float).reshape(-1, 2)
        if bounds.shape[0] != self.continuous_input_dim:
            raise ValidationError("one [lower, upper] pair per continuous input")
        if np.any(bounds[:, 0] > bounds[:, 1]):
            raise ValidationError("continuous input bounds need lower <= upper")
        values = tuple(tuple(float(v) for v in np.atleast_1d(u)) for u in self.discrete_value_set)
        if not values:
            raise ValidationError("discrete_value_set must be non-empty")
        if any(len(u) != self.discrete_input_dim for u in values):
            raise ValidationError("discrete values must match discrete_input_dim")
        x0 = np.asarray(self.x0, dtype=float)
        if x0.shape != (self.state_dim,):
            raise ValidationError("x0 must have state_dim entries")
        object.__setattr__(self, "continuous_input_bounds", bounds)
        object.__setattr__(self, "discrete_value_set", values)
        object.__setattr__(self, "x0", x0)

    @property
    def horizon(self) -> float:
        return self.tf - self.t0

    @property
    def fixed_inputs(self) -> np.ndarray:
        """Mask of continuous inputs whose bounds pin them to one value."""
        b = self.continuous_input_bounds
        return b[:, 0] == b[:, 1]

    def eval_terminal(self, x: np.ndarray) -> float:
        if self.terminal_cost is None:
            return 0.0
        return float(self.terminal_cost(np.asarray(x, dtype=float)))

    def eval_terminal_gradient(self, x: np.ndarray) -> np.ndarray:
        if self.terminal_cost_gradient is None:
            return np.zeros(self.state_dim)
        return np.asarray(self.terminal_cost_gradient(np.asarray(x, dtype=float)), dtype=float)

    def relaxed_input_bounds(self) -> np.ndarray:
        """Componentwise box hull of the discrete value set, shape ``(nu, 2)``."""
        values = np.array(self.discrete_value_set)
        return np.stack([values.min(axis=0), values.max(axis=0)], axis=1)


# ---------------------------------------------------------------------------
# Double Tank


@dataclass(frozen=True)
class DoubleTankParams:
    """Constants of the two-pipe Double Tank problem."""

    alpha: float = 100.0
    beta1: float = 1.0
    beta2: float = 1.1
    gamma: float = 10.0
    t0: float = 0.0
    tf: float = 10.0
    x1_0: float = 2.0
    x2_0: float = 2.5

    def __post_init__(self):
        for f in fields(self):
            if not math.isfinite(getattr(self, f.name)):
                raise ValidationError(f"{f.name} must be finite")
        if self.tf <= self.t0:
            raise ValidationError(f"need tf > t0, got tf={self.tf}")
        if self.gamma < 0 or self.alpha < 0:
            raise ValidationError("alpha and gamma must be non-negative")

    @classmethod
    def from_mapping(cls, values: dict) -> "DoubleTankParams":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValidationError(f"unknown problem constants: {sorted(unknown)}")
        try:
            return cls(**{k: float(v) for k, v in values.items()})
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(str(exc)) from exc


def reference(t):
    """Level reference for the second tank, ``2 + 0.5 sin t``."""
    return 2.0 + 0.5 * np.sin(t)


def reference_rate(t):
    return 0.5 * np.cos(t)


def smooth_sqrt(x):
    return np.sqrt(np.maximum(x, SQRT_EPS))


def smooth_sqrt_derivative(x):
    x = np.asarray(x, dtype=float)
    return np.where(x > SQRT_EPS, 0.5 / np.sqrt(np.maximum(x, SQRT_EPS)), 0.0)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValidationError("non-finite input to the tank model")


def double_tank_rhs(x, u, c):
    """Tank level derivatives for one state, valve and flow pair.

    >>> double_tank_rhs([4.0, 1.0], [0, 1], [10.0, 10.0])
    array([8., 1.])
    """
    x, u, c = (np.asarray(a, dtype=float) for a in (x, u, c))
    _check_finite(x, u, c)
    s1, s2 = smooth_sqrt(x[..., 0]), smooth_sqrt(x[..., 1])
    inflow = (u * c).sum(axis=-1)
    return np.stack([inflow - s1, s1 - s2], axis=-1)


def double_tank(params: DoubleTankParams | None = None) -> ProblemSpec:
    """Build the Double Tank problem: two pipes, the first at a fixed flow."""
    p = params or DoubleTankParams()
    beta = np.array([p.beta1, p.beta2])

    def dynamics(x, u, c, t):
        return double_tank_rhs(x, u, c)

    def jacobians(x, u, c, t):
        K = x.shape[0]
        d1 = smooth_sqrt_derivative(x[:, 0])
        d2 = smooth_sqrt_derivative(x[:, 1])
        fx = np.zeros((K, 2, 2))
        fx[:, 0, 0] = -d1
        fx[:, 1, 0] = d1
        fx[:, 1, 1] = -d2
        fu = np.zeros((K, 2, 2))
        fu[:, 0, :] = c
        fc = np.zeros((K, 2, 2))
        fc[:, 0, :] = u
        return fx, fu, fc, np.zeros((K, 2))

    def stage_cost(x, u, c, t):
        err = x[:, 1] - reference(t)
        return p.alpha * err**2 + (u * c) @ beta

    def stage_cost_gradients(x, u, c, t):
        err = x[:, 1] - reference(t)
        Lx = np.zeros_like(x)
        Lx[:, 1] = 2.0 * p.alpha * err
        Lu = c * beta
        Lc = u * beta
        Lt = -2.0 * p.alpha * err * reference_rate(t)
        return Lx, Lu, Lc, Lt

    return ProblemSpec(
        state_dim=2,
        discrete_input_dim=2,
        continuous_input_dim=2,
        dynamics=dynamics,
        dynamics_jacobians=jacobians,
        stage_cost=stage_cost,
        stage_cost_gradients=stage_cost_gradients,
        continuous_input_bounds=np.array([[p.gamma, p.gamma], [0.0, p.gamma]]),
        discrete_value_set=((0, 0), (0, 1), (1, 0), (1, 1)),
        t0=p.t0,
        tf=p.tf,
        x0=np.array([p.x1_0, p.x2_0]),
        name="double_tank",
    )


def read_key_value(path) -> dict:
    """Parse a ``key = value`` file; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


# ---------------------------------------------------------------------------
# Simulation


@dataclass
class Trajectory:
    """States on nodes, piecewise-constant inputs on intervals."""

    times: np.ndarray
    states: np.ndarray
    discrete_inputs: np.ndarray
    continuous_inputs: np.ndarray
    running_cost: np.ndarray
    terminal_cost: float = 0.0

    def __post_init__(self):
        n = len(self.times)
        if self.states.shape[0] != n or self.running_cost.shape[0] != n:
            raise ValidationError("states and running_cost need one row per node")
        if self.discrete_inputs.shape[0] != n - 1 or self.continuous_inputs.shape[0] != n - 1:
            raise ValidationError("inputs need one row per interval")
        if n > 1 and np.any(np.diff(self.times) <= 0):
            raise ValidationError("time grid must be strictly increasing")

    @property
    def cost(self) -> float:
        return float(self.running_cost[-1] + self.terminal_cost)

    def to_csv(self, path) -> None:
        nx = self.states.shape[1]
        nu = self.discrete_inputs.shape[1]
        nc = self.continuous_inputs.shape[1]
        header = (
            ["t"]
            + [f"x{i + 1}" for i in range(nx)]
            + [f"u{i + 1}" for i in range(nu)]
            + [f"c{i + 1}" for i in range(nc)]
            + ["running_cost"]
        )
        n = len(self.times)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k in range(n):
                j = min(k, n - 2)
                if j >= 0:
                    u, c = self.discrete_inputs[j], self.continuous_inputs[j]
                else:
                    u, c = np.full(nu, np.nan), np.full(nc, np.nan)
                row = [self.times[k], *self.states[k], *u, *c, self.running_cost[k]]
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path, terminal_cost: float = 0.0) -> "Trajectory":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            data = np.array([[float(v) for v in row] for row in reader])
        cols = {name: i for i, name in enumerate(header)}
        pick = lambda prefix: [cols[h] for h in header if h[0] == prefix and h[1:].isdigit()]
        return cls(
            times=data[:, cols["t"]],
            states=data[:, pick("x")],
            discrete_inputs=data[:-1, pick("u")],
            continuous_inputs=data[:-1, pick("c")],
            running_cost=data[:, cols["running_cost"]],
            terminal_cost=terminal_cost,
        )


def euler_step(spec: ProblemSpec, x, u, c, t: float, h: float, node: int | None = None):
    """One explicit Euler step ``x + h f(x, u, c, t)``."""
    if not h > 0:
        raise ValidationError(f"Euler step needs h > 0, got {h}")
    x = np.asarray(x, dtype=float)
    dx = spec.dynamics(x[None], np.atleast_2d(u).astype(float), np.atleast_2d(c).astype(float),
                       np.array([t], dtype=float))[0]
    with np.errstate(over="ignore", invalid="ignore"):
        out = x + h * dx
    if not np.all(np.isfinite(out)):
        raise IntegrationError(f"non-finite state after Euler step at node {node}", node=node)
    return out


def simulate(spec: ProblemSpec, times, discrete_inputs, continuous_inputs, x0=None) -> Trajectory:
    """Forward Euler rollout with left-endpoint cost quadrature.

    ``times`` holds the grid nodes; inputs hold one row per interval.
    """
    times = np.asarray(times, dtype=float)
    u = np.asarray(discrete_inputs, dtype=float).reshape(len(times) - 1, spec.discrete_input_dim)
    c = np.asarray(continuous_inputs, dtype=float).reshape(len(times) - 1, spec.continuous_input_dim)
    x = np.array(spec.x0 if x0 is None else x0, dtype=float)
    if abs(times[0] - spec.t0) > 1e-9:
        raise ValidationError("simulation grid must start at t0")
    states = np.empty((len(times), spec.state_dim))
    running = np.zeros(len(times))
    states[0] = x
    for k in range(len(times) - 1):
        h = times[k + 1] - times[k]
        tk = np.array([times[k]])
        rate = spec.stage_cost(x[None], u[k : k + 1], c[k : k + 1], tk)[0]
        running[k + 1] = running[k] + h * rate
        x = euler_step(spec, x, u[k], c[k], times[k], h, node=k)
        states[k + 1] = x
    return Trajectory(times, states, u, c, running, spec.eval_terminal(states[-1]))


def uniform_grid(spec: ProblemSpec, n_nodes: int) -> np.ndarray:
    return np.linspace(spec.t0, spec.tf, n_nodes)
