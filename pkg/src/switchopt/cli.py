"""Command-line front end: ``switchopt {relax,round,isto,simulate,compare}``.

Configuration comes from an optional ``key = value`` file, then from flag
overrides.  Stages exchange data through files in the output directory.
Exit codes: 0 success, 2 invalid input, 3 solver failure, 4 infeasible.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import plotting
from .cia import ControlGrid, dwell_violations, solve_cia_bnb
from .errors import EvaluationError, InfeasibleError, IntegrationError, SolverError, ValidationError
from .model import DoubleTankParams, ProblemSpec, Trajectory, double_tank, read_key_value, reference, simulate
from .relaxed import solve_relaxed
from .seqopt import enumerate_initial_sequence, run_isto, write_iteration_log
from .sto import Sequence, uptime_bounds

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_SOLVER = 3
EXIT_INFEASIBLE = 4

#: Length of the default initial sequence.
INITIAL_LENGTH = 7

#: Published runtimes (s) of an IPOPT/Pycombina implementation, for context only.
REFERENCE_RUNTIMES = {
    "relaxed": 0.5,
    "cia": 0.8,
    "isto_uptime": [0.53, 0.20, 0.11, 0.10, 0.26, 0.12],
    "isto_free": [0.54, 0.13, 0.11],
}


def parse_sequence(text: str) -> Sequence:
    """``"1 1; 0 1; 1 0"`` (or commas inside a stage) -> :class:`Sequence`."""
    stages = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        try:
            stages.append(tuple(float(v) for v in part.replace(",", " ").split()))
        except ValueError as exc:
            raise ValidationError(f"bad stage '{part}' in sequence") from exc
    if not stages:
        raise ValidationError("empty sequence")
    return Sequence(tuple(stages))


def format_sequence(seq: Sequence) -> str:
    return "; ".join(" ".join(f"{v:g}" for v in s) for s in seq.stages)


@dataclass
class RunConfig:
    """Everything a command needs; validated on construction."""

    params: DoubleTankParams = field(default_factory=DoubleTankParams)
    N: int = 300
    m: int | None = None
    min_uptime: float = 0.5
    initial_sequence: Sequence | None = None
    out_dir: Path = Path("out")

    def __post_init__(self):
        if isinstance(self.N, bool) or not isinstance(self.N, (int, np.integer)) or self.N < 2:
            raise ValidationError(f"N must be an integer >= 2, got {self.N!r}")
        if self.m is not None and (not isinstance(self.m, (int, np.integer)) or self.m < 1):
            raise ValidationError(f"m must be a positive integer, got {self.m!r}")
        if not (math.isfinite(self.min_uptime) and self.min_uptime >= 0):
            raise ValidationError(f"min_uptime must be finite and >= 0, got {self.min_uptime}")
        self.out_dir = Path(self.out_dir)
        spec = self.spec()
        if self.initial_sequence is None:
            self.initial_sequence = enumerate_initial_sequence(spec.discrete_value_set, INITIAL_LENGTH)
        self.initial_sequence.check_admissible(spec)

    def spec(self) -> ProblemSpec:
        return double_tank(self.params)

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        values = dict(values)
        constants = {f.name for f in fields(DoubleTankParams)}
        params = DoubleTankParams.from_mapping({k: values.pop(k) for k in list(values) if k in constants})
        kwargs = {"params": params}
        try:
            if "N" in values:
                kwargs["N"] = _as_int(values.pop("N"), "N")
            if "m" in values:
                raw = str(values.pop("m")).strip()
                kwargs["m"] = None if raw.lower() in ("", "auto", "none") else _as_int(raw, "m")
            if "min_uptime" in values:
                kwargs["min_uptime"] = float(values.pop("min_uptime"))
        except ValueError as exc:
            raise ValidationError(str(exc)) from exc
        if "initial_sequence" in values:
            kwargs["initial_sequence"] = parse_sequence(str(values.pop("initial_sequence")))
        if "out_dir" in values:
            kwargs["out_dir"] = Path(str(values.pop("out_dir")))
        if values:
            raise ValidationError(f"unknown configuration keys: {sorted(values)}")
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            **{f.name: getattr(self.params, f.name) for f in fields(DoubleTankParams)},
            "N": self.N,
            "m": self.m,
            "min_uptime": self.min_uptime,
            "initial_sequence": format_sequence(self.initial_sequence),
        }


def _as_int(value, name: str) -> int:
    try:
        f = float(value)
    except (TypeError, ValueError):
        raise ValidationError(f"{name} must be an integer, got {value!r}") from None
    if not f.is_integer():
        raise ValidationError(f"{name} must be an integer, got {value!r}")
    return int(f)


def _write_json(path: Path, data) -> None:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2)
        fh.write("\n")


def _describe_source(path, out: Path) -> str:
    """Input file name for reports; relative to ``out`` so reports do not depend on it."""
    if path is None:
        return "lower bounds"
    path = Path(path)
    try:
        return str(path.resolve().relative_to(out.resolve()))
    except ValueError:
        return str(path)


def _tracking_error(traj: Trajectory) -> float:
    return float(np.max(np.abs(traj.states[:, 1] - reference(traj.times))))


# ---------------------------------------------------------------------------
# Commands


def cmd_relax(config: RunConfig, echo=print) -> dict:
    """Solve the relaxed problem; writes trajectory, control grid and report."""
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    sol = solve_relaxed(config.spec(), config.N)
    sol.trajectory.to_csv(out / "relaxed_trajectory.csv")
    sol.relaxed_control_grid.to_csv(out / "relaxed_grid.csv")
    report = {"config": config.to_dict(), **sol.report()}
    _write_json(out / "relaxed_report.json", report)
    echo(f"relax objective={sol.objective_value:.6f} status={sol.nlp.status} "
         f"iterations={sol.nlp.iterations} wall_time={sol.wall_time:.2f}")
    return report


def project_grid(spec: ProblemSpec, grid: ControlGrid, min_uptime: float, continuous=None):
    """Round ``grid`` and simulate; returns ``(CiaResult, Trajectory)``.

    ``continuous`` holds one row of continuous inputs per interval; the lower
    input bounds are used when it is missing.
    """
    times = np.concatenate([grid.t_left, grid.t_right[-1:]])
    if np.any(np.abs(grid.t_left[1:] - grid.t_right[:-1]) > 1e-9):
        raise ValidationError("grid intervals must be contiguous")
    if continuous is None:
        continuous = np.tile(spec.continuous_input_bounds[:, 0], (len(grid.t_left), 1))
    continuous = np.asarray(continuous, dtype=float)
    if continuous.shape != (len(grid.t_left), spec.continuous_input_dim):
        raise ValidationError("continuous inputs do not match the control grid")
    res = solve_cia_bnb(grid, min_uptime)
    traj = simulate(spec, times, res.grid.values, continuous)
    return res, traj


def cmd_round(config: RunConfig, grid_path=None, trajectory_path=None, echo=print) -> dict:
    """Project a relaxed control grid onto binary values and simulate it.

    Continuous inputs come from ``trajectory_path`` (by default the relaxed
    trajectory in the output directory, when present).
    """
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    grid_path = Path(grid_path) if grid_path else out / "relaxed_grid.csv"
    grid = ControlGrid.from_csv(grid_path)
    if trajectory_path is None and (out / "relaxed_trajectory.csv").exists():
        trajectory_path = out / "relaxed_trajectory.csv"
    continuous = None
    if trajectory_path is not None:
        src = Trajectory.from_csv(trajectory_path)
        if not np.allclose(src.times[:-1], grid.t_left):
            raise ValidationError(f"{trajectory_path} and {grid_path} use different grids")
        continuous = src.continuous_inputs
    res, traj = project_grid(config.spec(), grid, config.min_uptime, continuous)
    res.grid.to_csv(out / "projected_grid.csv")
    traj.to_csv(out / "projected_trajectory.csv")
    report = {
        "config": config.to_dict(),
        "min_uptime": config.min_uptime,
        "eta": res.eta,
        "optimal": res.optimal,
        "nodes_expanded": res.nodes_expanded,
        "dwell_violations": len(dwell_violations(res.grid, config.min_uptime)),
        "simulated_cost": traj.cost,
        "max_tracking_error": _tracking_error(traj),
        "continuous_inputs_from": _describe_source(trajectory_path, out),
        "wall_time": res.wall_time,
    }
    _write_json(out / "projected_report.json", report)
    echo(f"round eta={res.eta:.6f} simulated_cost={traj.cost:.6f} "
         f"max_tracking_error={report['max_tracking_error']:.4f} wall_time={res.wall_time:.2f}")
    return report


def cmd_isto(config: RunConfig, prefix: str = "isto", echo=print) -> dict:
    """Iterative sequence optimisation from the configured initial sequence."""
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    spec = config.spec()
    seq = config.initial_sequence
    lb = uptime_bounds(seq, config.min_uptime)
    records = []
    try:
        sol, records = run_isto(spec, seq, lb, m=config.m, echo=echo)
    except (SolverError, InfeasibleError) as exc:
        if getattr(exc, "log", None):
            write_iteration_log(exc.log, out / f"{prefix}_log.json")
        raise
    sol.trajectory.to_csv(out / f"{prefix}_trajectory.csv")
    sol.write_json(out / f"{prefix}_solution.json")
    write_iteration_log(records, out / f"{prefix}_log.json")
    report = {
        "config": config.to_dict(),
        "iterations": len(records),
        "final_sequence": sol.sequence.to_list(),
        "w": sol.W.w.tolist(),
        "cost": sol.cost,
        "max_tracking_error": _tracking_error(sol.trajectory),
        "runtimes": [r.wall_time for r in records],
    }
    echo(f"isto iterations={len(records)} cost={sol.cost:.6f} "
         f"sequence=[{format_sequence(sol.sequence)}]")
    return report


def cmd_simulate(config: RunConfig, controls_path, output=None, constant=None, echo=print) -> dict:
    """Simulate piecewise-constant inputs.

    ``controls_path`` is either a trajectory CSV (its inputs are replayed) or a
    control grid CSV (continuous inputs at their upper bounds).  With
    ``constant=(u, c)`` both inputs are held on a uniform ``N``-node grid.
    """
    spec = config.spec()
    if constant is not None:
        u, c = (np.asarray(v, dtype=float) for v in constant)
        if u.shape != (spec.discrete_input_dim,) or c.shape != (spec.continuous_input_dim,):
            raise ValidationError("constant inputs have the wrong dimension")
        times = np.linspace(spec.t0, spec.tf, config.N)
        traj = simulate(spec, times, np.tile(u, (config.N - 1, 1)), np.tile(c, (config.N - 1, 1)))
    else:
        controls_path = Path(controls_path)
        with open(controls_path) as fh:
            header = fh.readline().strip().split(",")
        if header[:2] == ["t_left", "t_right"]:
            grid = ControlGrid.from_csv(controls_path)
            c = np.tile(spec.continuous_input_bounds[:, 1], (len(grid.t_left), 1))
            times = np.concatenate([grid.t_left, grid.t_right[-1:]])
            traj = simulate(spec, times, grid.values, c)
        else:
            src = Trajectory.from_csv(controls_path)
            traj = simulate(spec, src.times, src.discrete_inputs, src.continuous_inputs)
    out = Path(output) if output else config.out_dir / "simulated_trajectory.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    traj.to_csv(out)
    report = {"cost": traj.cost, "max_tracking_error": _tracking_error(traj), "nodes": len(traj.times)}
    echo(f"simulate cost={traj.cost:.6f} max_tracking_error={report['max_tracking_error']:.4f}")
    return report


def cmd_compare(config: RunConfig, figures: bool = True, echo=print) -> dict:
    """Run the whole experiment and write a consolidated report.

    The report compares relaxed, projected and both iterative STO costs,
    lists runtimes per stage and per iteration, and writes a plot script.
    """
    out = config.out_dir
    relax = cmd_relax(config, echo=echo)
    rnd = cmd_round(config, echo=echo)
    constrained = cmd_isto(config, prefix="isto_uptime", echo=echo)
    free_cfg = RunConfig(config.params, config.N, config.m, 0.0, config.initial_sequence, out)
    free = cmd_isto(free_cfg, prefix="isto_free", echo=echo)
    costs = {
        "relaxed": relax["objective"],
        "isto_free": free["cost"],
        "isto_uptime": constrained["cost"],
        "projected": rnd["simulated_cost"],
    }
    order = list(costs)
    ordered = all(costs[a] < costs[b] for a, b in zip(order, order[1:]))
    report = {
        "config": config.to_dict(),
        "costs": costs,
        "ordering_holds": ordered,
        "iterations": {"isto_uptime": constrained["iterations"], "isto_free": free["iterations"]},
        "final_sequences": {
            "isto_uptime": constrained["final_sequence"],
            "isto_free": free["final_sequence"],
        },
        "runtimes": {
            "relaxed": relax["wall_time"],
            "cia": rnd["wall_time"],
            "isto_uptime": constrained["runtimes"],
            "isto_free": free["runtimes"],
        },
        "reference_runtimes": REFERENCE_RUNTIMES,
    }
    _write_json(out / "compare_report.json", report)
    lines = ["stage,cost,iterations,runtimes_s,reference_runtimes_s"]
    for name in order:
        rt = report["runtimes"]["cia" if name == "projected" else name]
        ref = REFERENCE_RUNTIMES["cia" if name == "projected" else name]
        its = report["iterations"].get(name, "")
        lines.append(f"{name},{costs[name]:.6f},{its},{_fmt_runtimes(rt)},{_fmt_runtimes(ref)}")
    (out / "compare_summary.csv").write_text("\n".join(lines) + "\n")
    plotting.write_plot_script(out)
    if figures:
        plotting.render_figures(out)
    echo("---")
    for line in lines:
        echo(line)
    echo(f"ordering relaxed < isto_free < isto_uptime < projected: {'yes' if ordered else 'no'}")
    return report


def _fmt_runtimes(value) -> str:
    if isinstance(value, list):
        return "[" + " ".join(f"{v:.2f}" for v in value) + "]"
    return f"{value:.2f}"


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("--min-uptime", type=float, help="minimum uptime in seconds (0 disables)")
    common.add_argument("--nodes", type=int, help="relaxed grid nodes N")
    common.add_argument("--out-dir", help="output directory")

    parser = argparse.ArgumentParser(prog="switchopt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("relax", parents=[common], help="solve the relaxed problem")
    p = sub.add_parser("round", parents=[common], help="project a relaxed grid onto binary controls")
    p.add_argument("--grid", help="relaxed control grid CSV (default: OUT_DIR/relaxed_grid.csv)")
    p.add_argument("--trajectory", help="trajectory CSV providing the continuous inputs")
    sub.add_parser("isto", parents=[common], help="iterative switching time optimisation")
    p = sub.add_parser("simulate", parents=[common], help="simulate given controls")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--controls", help="trajectory CSV or control grid CSV")
    src.add_argument("--constant", nargs=2, metavar=("U", "C"),
                     help="constant inputs, comma separated, e.g. '0,1' '10,10'")
    p.add_argument("--output", help="output trajectory CSV")
    p = sub.add_parser("compare", parents=[common], help="run the full comparison experiment")
    p.add_argument("--no-figures", action="store_true", help="skip rendering PNG figures")
    return parser


def load_config(args) -> RunConfig:
    values = read_key_value(args.config) if args.config else {}
    for item in args.set:
        if "=" not in item:
            raise ValidationError(f"--set expects KEY=VALUE, got '{item}'")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    if args.min_uptime is not None:
        values["min_uptime"] = args.min_uptime
    if args.nodes is not None:
        values["N"] = args.nodes
    if args.out_dir is not None:
        values["out_dir"] = args.out_dir
    return RunConfig.from_mapping(values)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args)
        if args.command == "relax":
            cmd_relax(config)
        elif args.command == "round":
            cmd_round(config, args.grid, args.trajectory)
        elif args.command == "isto":
            cmd_isto(config)
        elif args.command == "simulate":
            constant = None
            if args.constant:
                constant = [[float(v) for v in s.split(",")] for s in args.constant]
            cmd_simulate(config, args.controls, args.output, constant)
        else:
            cmd_compare(config, figures=not args.no_figures)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (SolverError, IntegrationError, EvaluationError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
