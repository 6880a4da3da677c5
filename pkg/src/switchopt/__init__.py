"""Mixed-integer optimal control of switched systems.

Relaxed multiple shooting with combinatorial integral approximation, and
switching time optimisation with iterative sequence reduction, demonstrated
on a two-pipe Double Tank problem.
"""

from .cia import ControlGrid, solve_cia_bnb, sum_up_rounding
from .errors import (
    EvaluationError,
    InfeasibleError,
    IntegrationError,
    SolverError,
    SwitchoptError,
    ValidationError,
)
from .model import DoubleTankParams, ProblemSpec, Trajectory, double_tank, simulate
from .nlp import NlpProblem, NlpSolution, SolverOptions, solve
from .relaxed import RelaxedSolution, solve_relaxed, transcribe_relaxed
from .seqopt import CostSchedule, IterationRecord, SequenceFilter, enumerate_initial_sequence, run_isto
from .sto import DurationSet, Sequence, StoSolution, solve_sto, transcribe_sto, uptime_bounds

__version__ = "0.1.0"
