import json
import math

import numpy as np
import pytest

from jumplq.costs import MCEstimate, batch_costs, chunk_ranges, mc_cost, pathwise_cost, value_quadratic
from jumplq.examples import builtin
from jumplq.laws import Feedback, OpenLoopTable, Zero
from jumplq.riccati import solve_riccati
from jumplq.simulate import TimeGrid, replay, sample_noise


def test_estimate_from_samples():
    est = MCEstimate.from_samples([1.0, 2.0, 3.0, 4.0], seed=5)
    assert est.mean == 2.5
    assert est.stderr == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)
    assert est.half_width == pytest.approx(2.5758293035489 * est.stderr)
    assert est.within(2.5 + 2.9 * est.stderr) and not est.within(2.5 + 3.1 * est.stderr)
    assert json.loads(est.to_json())["seed"] == 5
    with pytest.raises(ValueError):
        MCEstimate.from_samples([1.0])


def test_chunk_ranges_cover_paths():
    assert chunk_ranges(5, 2) == [(0, 2), (2, 4), (4, 5)]


def test_uncontrolled_example_9_2_cost_is_deterministic():
    est = mc_cost(builtin("example_9_2").problem, Zero(), [1.0, 1.0], 200, seed=1,
                  grid=TimeGrid.uniform(0.0, 1.0, 50))
    assert est.mean == 4.0 and est.stderr == 0.0


def test_uncontrolled_counterexample_6_2_cost():
    est = mc_cost(builtin("counterexample_6_2").problem, Zero(), [1.0], 50, seed=1,
                  grid=TimeGrid.uniform(0.0, 1.0, 64))
    # X stays at 1: int Q ds + G = 2 + 2
    assert est.mean == pytest.approx(4.0, abs=1e-12)


def test_optimal_cost_matches_value():
    ex = builtin("counterexample_6_2")
    sol = solve_riccati(ex.problem)
    assert value_quadratic(sol, 0.0, [1.0]) == pytest.approx(2.0, abs=1e-8)
    est = mc_cost(ex.problem, Feedback(sol), [1.0], 10_000, seed=3, grid=TimeGrid.uniform(0.0, 1.0, 1000))
    assert abs(est.mean - 2.0) < 3 * est.stderr + 5e-3


def test_unit_control_from_origin_example_9_1():
    # J = -3/4 E X(T)^2 + int (s^2 + 2) ds with E X(T)^2 = 2: total 5/6
    est = mc_cost(builtin("example_9_1").problem, OpenLoopTable.constant([1.0], 0.0, 1.0), [0.0],
                  20_000, seed=4, grid=TimeGrid.uniform(0.0, 1.0, 500))
    assert abs(est.mean - 5.0 / 6.0) < 4 * est.stderr + 1e-3


def test_pathwise_and_batch_costs_agree():
    ex = builtin("counterexample_6_2")
    law = Feedback(solve_riccati(ex.problem))
    nz = sample_noise(ex.problem.jump_measure, TimeGrid.uniform(0.0, 1.0, 100), 8, range(20))
    batch = batch_costs(ex.problem, law, [1.0], nz)
    single = [pathwise_cost(replay(ex.problem, law, [1.0], nz, row=r), ex.problem.weights)
              for r in range(20)]
    assert np.allclose(batch, single, rtol=1e-12, atol=1e-14)


def test_chunk_size_does_not_change_the_estimate():
    ex = builtin("example_9_1")
    law = OpenLoopTable.constant([0.7], 0.0, 1.0)
    grid = TimeGrid.uniform(0.0, 1.0, 100)
    a = mc_cost(ex.problem, law, [1.0], 300, seed=2, grid=grid, chunk_size=37)
    b = mc_cost(ex.problem, law, [1.0], 300, seed=2, grid=grid, chunk_size=300)
    assert a.mean == b.mean and a.stderr == b.stderr


def test_stderr_shrinks_like_root_n():
    ex = builtin("example_9_1")
    law = OpenLoopTable.constant([1.0], 0.0, 1.0)
    grid = TimeGrid.uniform(0.0, 1.0, 50)
    small = mc_cost(ex.problem, law, [1.0], 1_000, seed=6, grid=grid)
    big = mc_cost(ex.problem, law, [1.0], 10_000, seed=6, grid=grid)
    assert 2.5 <= small.stderr / big.stderr <= 4.0
    assert math.isfinite(big.wall_time)
