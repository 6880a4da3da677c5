import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_difference, relative_error
from switchopt.errors import ValidationError
from switchopt.model import simulate
from switchopt.sto import (
    DurationSet,
    Sequence,
    StoTranscription,
    default_nodes_per_stage,
    read_sto_json,
    solve_sto,
    tau_of_time,
    time_of_tau,
    uptime_bounds,
    w_of_tau,
)


def random_durations(rng):
    ns = int(rng.integers(1, 9))
    w = rng.uniform(0, 3, ns)
    w[rng.uniform(size=ns) < 0.25] = 0.0
    if w.sum() == 0:
        w[-1] = 1.0
    return DurationSet(w)


def test_time_transform_identities_on_random_duration_sets():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        W = random_durations(rng)
        w = W.w
        ns = W.ns
        cum = [0.0]
        for v in w:
            cum.append(cum[-1] + v)
        # t at stage boundaries is the running sum of durations
        for k in range(ns + 1):
            worst = max(worst, abs(time_of_tau(W, float(k)) - cum[k]))
        # inside a stage t grows linearly with slope w_i
        tau = rng.uniform(0, ns)
        i = min(int(tau), ns - 1)
        worst = max(worst, abs(time_of_tau(W, tau) - (cum[i] + (tau - i) * w[i])))
        assert w_of_tau(W, tau) == w[i]
        # the inverse maps back to the same physical time and is the smallest such tau
        t = rng.uniform(0, W.total)
        s = tau_of_time(W, t)
        worst = max(worst, abs(time_of_tau(W, s) - t))
        probe = np.linspace(0, s, 50)[:-1]
        assert all(time_of_tau(W, p) < t + 1e-12 for p in probe)
        for k in range(ns + 1):
            first = min(j for j in range(ns + 1) if cum[j] == cum[k])
            assert tau_of_time(W, cum[k]) == first
        # integral transfer, exact per stage for polynomial integrands:
        # int_0^t s ds = t^2/2 and int_0^t s^2 ds = t^3/3
        lhs1, lhs2 = t**2 / 2, t**3 / 3
        rhs1 = rhs2 = 0.0
        for j in range(ns):
            a, b = float(j), min(float(j + 1), s)
            if b <= a:
                break
            ta, tb, tm = time_of_tau(W, a), time_of_tau(W, b), time_of_tau(W, 0.5 * (a + b))
            # Simpson's rule is exact for the quadratic t(tau)^2 w and linear t(tau) w
            rhs1 += (b - a) / 6 * (ta + 4 * tm + tb) * w[j]
            rhs2 += (b - a) / 6 * (ta**2 + 4 * tm**2 + tb**2) * w[j]
        worst = max(worst, abs(rhs1 - lhs1), abs(rhs2 - lhs2))
    assert worst < 1e-12, worst


def test_transform_rejects_out_of_range():
    W = DurationSet([1.0, 2.0])
    with pytest.raises(ValidationError):
        time_of_tau(W, 2.5)
    with pytest.raises(ValidationError):
        tau_of_time(W, 3.5)
    with pytest.raises(ValidationError):
        DurationSet([1.0, -0.1])


def test_sequence_helpers(spec):
    seq = Sequence(((1, 1), (0, 1), (1, 0), (0, 0)))
    assert seq.ns == 4
    np.testing.assert_array_equal(uptime_bounds(seq, 0.5), [0.5, 0.5, 0.5, 0.0])
    assert seq.without([0, 2]).stages == ((0.0, 1.0), (0.0, 0.0))
    assert seq.to_list() == [[1, 1], [0, 1], [1, 0], [0, 0]]
    with pytest.raises(ValidationError):
        Sequence(((0, 2),)).check_admissible(spec)
    with pytest.raises(ValidationError):
        Sequence(())
    with pytest.raises(ValidationError):
        Sequence(((0, 1), (1,)))
    assert default_nodes_per_stage(1) == 300
    assert default_nodes_per_stage(7) == 43
    assert default_nodes_per_stage(30) == 20


def test_problem_layout(spec):
    seq = Sequence(((0, 1), (1, 0), (0, 0)))
    tr = StoTranscription(spec, seq, 4, lower_bounds=[0.5, 0.5, 0.0], a=[1.0, 0.0, 1.0])
    # stage 0 is softened; stage 1 has a zero price and stage 2 no bound
    np.testing.assert_array_equal(tr.soft, [0])
    assert tr.K == 12
    assert tr.n == 13 * 2 + 12 + 3 + 2
    assert tr.m_eq == 2 + 12 * 2 + 1 + 1


def test_derivatives_match_central_differences(spec):
    rng = np.random.default_rng(8)
    seq = Sequence(((1, 1), (0, 1), (1, 0)))
    tr = StoTranscription(spec, seq, 3, lower_bounds=[0.5, 0.5, 0.5], a=[1.0, 10.0, 0.0], b=[0.0, 2.0, 5.0])
    for _ in range(10):
        z = np.empty(tr.n)
        z[tr.ix] = rng.uniform(0.5, 4.0, tr.ix.shape)
        z[tr.ic] = rng.uniform(0, 10, tr.ic.shape)
        z[tr.iw] = rng.uniform(0.2, 6.0, tr.ns)
        z[tr.ie] = rng.uniform(0, 1, len(tr.ie))
        z[tr.isur] = rng.uniform(0, 1, len(tr.isur))
        _, g = tr.objective(z)
        assert relative_error(g, central_difference(lambda v: tr.objective(v)[0], z)).max() < 1e-5
        J = tr.jacobian(z).toarray()
        assert relative_error(J, central_difference(tr.constraints, z)).max() < 1e-5
        y = rng.normal(size=tr.m_eq)
        np.testing.assert_allclose(tr.jacobian_vjp(z, y), J.T @ y, atol=1e-10)


@pytest.fixture(scope="module")
def three_stage(spec):
    seq = Sequence(((0, 1), (1, 0), (0, 0)))
    return solve_sto(spec, seq, 12, uptime_bounds(seq, 0.5))


def test_durations_sum_to_horizon(three_stage):
    assert three_stage.nlp.converged
    assert abs(three_stage.W.total - 10.0) < 1e-7
    assert np.all(three_stage.W.w >= 0)


def test_resimulation_reproduces_cost(spec, three_stage):
    traj = three_stage.trajectory
    replay = simulate(spec, traj.times, traj.discrete_inputs, traj.continuous_inputs)
    assert replay.cost == pytest.approx(three_stage.cost, rel=1e-2)
    np.testing.assert_allclose(replay.states, traj.states, atol=1e-5)


def test_warm_start_from_own_solution(spec, three_stage):
    tr = three_stage.transcription
    again = solve_sto(spec, three_stage.sequence, tr.m, tr.lb, tr.a, tr.b, warm_start=three_stage)
    assert again.nlp.converged
    assert again.nlp.iterations <= 3
    np.testing.assert_allclose(again.W.w, three_stage.W.w, atol=1e-6)


def test_warm_start_after_removal(spec, three_stage):
    seq = three_stage.sequence.without([2])
    sol = solve_sto(spec, seq, 12, uptime_bounds(seq, 0.5), warm_start=three_stage, kept=[0, 1])
    assert sol.nlp.converged
    with pytest.raises(ValidationError):
        solve_sto(spec, seq, 12, warm_start=three_stage, kept=[1, 0])


def test_unpriced_bound_reports_violation(spec):
    seq = Sequence(((0, 1), (1, 1)))
    tr = StoTranscription(spec, seq, 2, lower_bounds=[0.5, 0.5], a=[1.0, 0.0])
    z = tr.initial_guess()
    z[tr.iw] = [9.8, 0.2]
    e = tr.slacks(z)
    assert e[1] == pytest.approx(0.3)


def test_zero_length_stage_is_skipped_in_trajectory(spec):
    seq = Sequence(((0, 1), (1, 1), (0, 0)))
    tr = StoTranscription(spec, seq, 3)
    z = tr.initial_guess()
    z[tr.iw] = [4.0, 0.0, 6.0]
    traj = tr.trajectory(z)
    assert len(traj.times) == 7
    assert np.all(np.diff(traj.times) > 0)
    assert not np.any(np.all(traj.discrete_inputs == [1, 1], axis=1))


def test_solution_json_round_trip(three_stage, tmp_path):
    path = tmp_path / "sto.json"
    three_stage.write_json(path)
    data = read_sto_json(path)
    assert data["sequence"] == three_stage.sequence
    np.testing.assert_array_equal(data["w"].w, three_stage.W.w)
    assert data["cost"] == three_stage.cost
    raw = json.loads(path.read_text())
    del raw["cost"]
    path.write_text(json.dumps(raw))
    with pytest.raises(ValidationError):
        read_sto_json(path)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 5, allow_nan=False), min_size=1, max_size=6).filter(lambda w: sum(w) > 1e-3),
       st.floats(0, 1))
def test_inverse_transform_round_trip(w, frac):
    W = DurationSet(w)
    t = frac * W.total
    assert abs(time_of_tau(W, tau_of_time(W, t)) - t) < 1e-12
