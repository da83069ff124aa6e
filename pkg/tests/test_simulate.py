import io
import math

import numpy as np
import pytest

from jumplq.errors import OutOfRange, StateBlowUp
from jumplq.examples import builtin
from jumplq.laws import Feedback, OpenLoopTable, Zero
from jumplq.model import JumpMeasure, validate_problem
from jumplq.riccati import solve_riccati
from jumplq.simulate import (TimeGrid, brownian_and_count_at, march, path_rng, replay,
                             sample_jump_times, sample_noise, simulate_state)


def scalar(**kw):
    spec = {"n": 1, "m": 1, "T": 1.0, "jump_measure": [{"id": "z", "intensity": 1.0}]}
    spec.update(kw)
    return validate_problem(spec)


def test_time_grid_validation():
    with pytest.raises(ValueError):
        TimeGrid([0.0, 0.5, 0.5, 1.0])
    with pytest.raises(ValueError):
        TimeGrid([0.0])
    g = TimeGrid.uniform(0.0, 1.0, h=0.3)
    assert g.n_steps == 4 and g.stop == 1.0
    assert TimeGrid.uniform(0.0, 2.0, 8).h == 0.25


def test_path_stream_depends_only_on_seed_and_index():
    a = path_rng(7, 3).standard_normal(5)
    assert np.array_equal(a, path_rng(7, 3).standard_normal(5))
    assert not np.array_equal(a, path_rng(7, 4).standard_normal(5))
    assert not np.array_equal(a, path_rng(8, 3).standard_normal(5))


def test_jump_times_lie_in_horizon_and_are_sorted():
    jm = JumpMeasure((("a", 5.0),))
    ev = sample_jump_times(jm, 0.2, 1.0, path_rng(0, 0))
    times = [e.time for e in ev]
    assert all(0.2 < s <= 1.0 for s in times)
    assert times == sorted(times)


def test_jump_count_and_mark_frequencies():
    jm = JumpMeasure((("a", 1.0), ("b", 3.0)))
    grid = TimeGrid.uniform(0.0, 0.5, 4)
    nz = sample_noise(jm, grid, seed=11, indices=range(20_000))
    counts = nz.jump.sum(axis=1)
    # N(T) ~ Poisson(2)
    assert abs(counts.mean() - 2.0) < 4 * math.sqrt(2.0 / counts.size)
    assert abs(counts.var() - 2.0) < 0.1
    marks = nz.mark[nz.jump]
    frac_b = np.mean(marks == 1)
    assert abs(frac_b - 0.75) < 4 * math.sqrt(0.75 * 0.25 / marks.size)


def test_jump_times_are_inserted_as_knots():
    jm = JumpMeasure.single(3.0)
    grid = TimeGrid.uniform(0.0, 1.0, 10)
    nz = sample_noise(jm, grid, 0, range(50))
    for p in range(nz.n_paths):
        L1 = nz.n_knots[p]
        t = nz.t[p, :L1]
        assert L1 == 11 + len(nz.events[p])
        assert np.all(np.diff(t) > 0)
        assert np.allclose(t[nz.jump[p, :L1]], [e.time for e in nz.events[p]], rtol=0, atol=0)
        assert set(grid.knots) <= set(t)


def test_replay_of_recorded_noise_reproduces_the_path():
    ex = builtin("counterexample_6_2")
    law = Feedback(solve_riccati(ex.problem))
    path = simulate_state(ex.problem, law, [1.0], TimeGrid.uniform(0.0, 1.0, 200), seed=3, index=9)
    again = replay(ex.problem, law, [1.0], path.to_noise())
    assert np.array_equal(path.X, again.X)
    assert np.array_equal(path.u, again.u)
    assert again.index == 9 and again.seed == 3


def test_simulate_state_matches_batch_row():
    ex = builtin("example_9_2")
    grid = TimeGrid.uniform(0.0, 1.0, 100)
    law = OpenLoopTable.constant([0.5], 0.0, 1.0)
    path = simulate_state(ex.problem, law, [1.0, 1.0], grid, seed=4, index=17)
    nz = sample_noise(ex.problem.jump_measure, grid, 4, range(10, 20))
    res = march(ex.problem, law, [1.0, 1.0], nz)
    assert np.array_equal(path.X[-1], res.X_T[7])


def test_result_of_a_path_does_not_depend_on_its_batch():
    ex = builtin("example_9_2")
    grid = TimeGrid.uniform(0.0, 1.0, 100)
    law = OpenLoopTable.constant([1.0], 0.0, 1.0)
    big = march(ex.problem, law, [1.0, 1.0], sample_noise(ex.problem.jump_measure, grid, 1, range(64)))
    small = march(ex.problem, law, [1.0, 1.0], sample_noise(ex.problem.jump_measure, grid, 1, range(40, 45)))
    assert np.array_equal(big.X_T[40:45], small.X_T)


def test_compensated_jumps_leave_the_mean_unchanged():
    p = scalar(coefficients={"E": [[0.5]]})
    grid = TimeGrid.uniform(0.0, 1.0, 1000)
    res = march(p, Zero(), [1.0], sample_noise(p.jump_measure, grid, 5, range(20_000)))
    # E X(T) = 1 exactly in continuous time; var X(T) = e^{1/4} - 1
    se = math.sqrt(math.exp(0.25) - 1.0) / math.sqrt(20_000)
    assert abs(res.X_T.mean() - 1.0) < 4 * se + 1e-3


def test_full_negative_jump_annihilates_exactly():
    ex = builtin("counterexample_6_1")
    grid = TimeGrid.uniform(0.0, 1.0, 50)
    res = march(ex.problem, Zero(), [1.0], sample_noise(ex.problem.jump_measure, grid, 0, range(2000)))
    jumped = res.N_T > 0
    assert np.all(res.X_T[jumped] == 0.0)
    assert np.all(res.X_T[~jumped] > 1.0)
    assert abs(jumped.mean() - (1 - math.exp(-1))) < 0.05


def test_state_overflow_names_the_path():
    p = scalar(coefficients={"A": [[2000.0]]})
    nz = sample_noise(p.jump_measure, TimeGrid.uniform(0.0, 1.0, 100), 0, range(3, 6))
    with pytest.raises(StateBlowUp) as err:
        march(p, Zero(), [1.0], nz)
    assert err.value.path_index in (3, 4, 5)
    assert 0.0 < err.value.time <= 1.0


def test_grid_must_span_the_horizon():
    ex = builtin("example_9_1")
    with pytest.raises(OutOfRange):
        simulate_state(ex.problem, Zero(), [1.0], TimeGrid.uniform(0.0, 0.5, 10))


def test_wrong_initial_state_size():
    ex = builtin("example_9_2")
    nz = sample_noise(ex.problem.jump_measure, TimeGrid.uniform(0.0, 1.0, 10), 0, range(2))
    with pytest.raises(ValueError):
        march(ex.problem, Zero(), [1.0], nz)


def test_csv_layout():
    ex = builtin("example_9_2")
    path = simulate_state(ex.problem, OpenLoopTable.constant([1.0], 0.0, 1.0), [1.0, 1.0],
                          TimeGrid.uniform(0.0, 1.0, 10), seed=2)
    buf = io.StringIO()
    path.to_csv(buf, mark_ids=ex.problem.jump_measure.ids)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "t,X_1,X_2,u_1,is_jump,mark_id"
    assert len(lines) == 1 + path.t.size
    assert lines[-1].split(",")[3] == ""  # no control after the horizon


def test_brownian_and_count_at_horizon_match_march():
    ex = builtin("example_9_1")
    nz = sample_noise(ex.problem.jump_measure, TimeGrid.uniform(0.0, 1.0, 20), 9, range(100))
    res = march(ex.problem, Zero(), [1.0], nz)
    W, N = brownian_and_count_at(nz, 1.0)
    assert np.allclose(W, res.W_T, atol=1e-14)
    assert np.array_equal(N, res.N_T)
