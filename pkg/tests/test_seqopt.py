import re
from types import SimpleNamespace

import numpy as np
import pytest

from switchopt.errors import InfeasibleError, ValidationError
from switchopt.seqopt import (
    CostSchedule,
    SequenceFilter,
    alternate_costs,
    enumerate_initial_sequence,
    read_iteration_log,
    remove_zero_stages,
    run_isto,
    select_candidate,
    write_iteration_log,
)
from switchopt.sto import DurationSet, Sequence, uptime_bounds

SUMMARY = re.compile(r"^iter=\d+ cost=\S+ removed=\[[\d, ]*\] candidate=(-|\d+) a=\S+ b=\S+$")


def test_schedule_rows_and_extension():
    s = CostSchedule()
    assert [s.row(k) for k in range(5)] == [(1.0, 0.0), (0.0, 10.0), (100.0, 0.0), (0.0, 1000.0), (1e4, 0.0)]
    assert s.row(5) == (0.0, 1e5)
    assert s.row(8) == (1e8, 0.0)
    with pytest.raises(InfeasibleError):
        s.row(9)
    assert s.max_repetition == 8
    with pytest.raises(ValidationError):
        s.row(-1)


def test_initial_sequence_cycles_value_set(spec):
    seq = enumerate_initial_sequence(spec.discrete_value_set, 7)
    assert seq.stages == ((1, 1), (0, 1), (1, 0), (0, 0), (1, 1), (0, 1), (1, 0))
    assert enumerate_initial_sequence(spec.discrete_value_set, 2).stages == ((1, 1), (0, 1))
    with pytest.raises(ValidationError):
        enumerate_initial_sequence(spec.discrete_value_set, 0)


def test_initial_sequence_respects_filter(spec):
    f = SequenceFilter(forbidden_transitions=(((1, 1), (0, 1)),))
    seq = enumerate_initial_sequence(spec.discrete_value_set, 4, f)
    assert seq.stages == ((1, 1), (1, 0), (0, 0), (1, 1))
    assert f.accepts(seq.stages)
    never = SequenceFilter(predicate=lambda stages: False)
    with pytest.raises(ValidationError):
        enumerate_initial_sequence(spec.discrete_value_set, 2, never)


def test_filter_prerequisites():
    f = SequenceFilter(prerequisites=(((1, 1), ((0, 1),)),))
    assert f.accepts([(0, 1), (1, 1)])
    assert not f.accepts([(1, 1), (0, 1)])
    assert SequenceFilter(predicate=lambda s: len(s) < 3).accepts([(0, 0)] * 2)


def test_select_candidate_ties_and_tolerance():
    sol = SimpleNamespace(slacks=np.array([0.0, 0.3, 0.3 + 5e-10, 0.1]))
    assert select_candidate(sol) == 1
    sol = SimpleNamespace(slacks=np.array([0.0, 0.3, 0.3 + 1e-8]))
    assert select_candidate(sol) == 2
    assert select_candidate(SimpleNamespace(slacks=np.array([1e-7, 0.0]))) is None


def test_remove_zero_stages():
    seq = Sequence(((1, 1), (0, 1), (1, 0)))
    sol = SimpleNamespace(W=DurationSet([1e-7, 9.9, 0.1]))
    new, removed = remove_zero_stages(sol, seq)
    assert removed == [0] and new.stages == ((0, 1), (1, 0))
    with pytest.raises(ValidationError):
        remove_zero_stages(SimpleNamespace(W=DurationSet([0.0, 0.0, 0.0])), seq)
    with pytest.raises(ValidationError):
        remove_zero_stages(SimpleNamespace(W=DurationSet([1.0])), seq)


def test_alternate_costs_advances_one_stage():
    counters = [0, 0, 0]
    assert alternate_costs(counters, 1, CostSchedule()) == (0.0, 10.0)
    assert alternate_costs(counters, 1, CostSchedule()) == (100.0, 0.0)
    assert counters == [0, 2, 0]
    with pytest.raises(ValidationError):
        alternate_costs(counters, 3, CostSchedule())


def test_optimal_single_stage_is_a_fixed_point(spec):
    lines = []
    sol, records = run_isto(spec, Sequence(((0, 1),)), m=60, echo=lines.append)
    assert len(records) == 1
    assert records[0].removed == [] and records[0].candidate is None
    assert sol.sequence.stages == ((0, 1),)
    assert len(lines) == 1 and SUMMARY.match(lines[0])


def _replay(initial, records):
    seq = list(initial.stages)
    seen = 0
    for rec in records:
        assert Sequence(tuple(seq)) == rec.sequence
        for i in sorted(rec.removed, reverse=True):
            del seq[i]
            seen += 1
        assert Sequence(tuple(seq)) == rec.sequence_after
    return Sequence(tuple(seq)), seen


@pytest.fixture(scope="module")
def small_run(spec):
    initial = Sequence(((1, 1), (0, 1), (1, 0), (0, 0)))
    lines = []
    sol, records = run_isto(spec, initial, uptime_bounds(initial, 0.5), m=15, echo=lines.append)
    return initial, sol, records, lines


def test_log_is_complete_and_consistent(small_run):
    initial, sol, records, lines = small_run
    final, removed = _replay(initial, records)
    assert final == sol.sequence
    assert removed == initial.ns - sol.sequence.ns
    assert len(records) < 10 * initial.ns
    assert all(SUMMARY.match(line) for line in lines)
    assert [r.iteration for r in records] == list(range(1, len(records) + 1))
    # the loop ends clean: no active slack and no zero-length stage
    assert np.all(sol.slacks <= 1e-6) and np.all(sol.W.w >= 1e-6)


def test_run_is_deterministic(spec, small_run):
    initial, _, records, _ = small_run
    _, again = run_isto(spec, initial, uptime_bounds(initial, 0.5), m=15)

    def strip(rs):
        out = []
        for r in rs:
            d = r.to_dict()
            d.pop("wall_time")
            out.append(d)
        return out

    assert strip(records) == strip(again)


def test_iteration_log_round_trip(small_run, tmp_path):
    _, _, records, _ = small_run
    path = tmp_path / "log.json"
    write_iteration_log(records, path)
    data = read_iteration_log(path)
    assert [d["iteration"] for d in data] == [r.iteration for r in records]
    assert data[-1]["sequence_after"] == records[-1].sequence_after.to_list()
    path.write_text("{}")
    with pytest.raises(ValidationError):
        read_iteration_log(path)


def test_exhausted_schedule_signals_infeasibility(spec):
    # two stages that both need six seconds of a ten second horizon
    seq = Sequence(((0, 1), (1, 0)))
    schedule = CostSchedule(table=((1.0, 0.0),), cap=1.0)
    with pytest.raises(InfeasibleError) as info:
        run_isto(spec, seq, [6.0, 6.0], schedule, m=10)
    assert len(info.value.log) >= 1


def test_invalid_arguments(spec):
    seq = Sequence(((0, 1), (1, 0)))
    with pytest.raises(ValidationError):
        run_isto(spec, seq, [0.5], m=10)
    with pytest.raises(ValidationError):
        run_isto(spec, seq, sequence_filter=SequenceFilter(predicate=lambda s: False), m=10)
