import logging

import numpy as np
import pytest

from jumplq.errors import (ConfigError, DimensionMismatch, InvalidHorizon, InvalidIntensity,
                           NonFiniteCoefficient, OutOfRange)
from jumplq.examples import builtin
from jumplq.model import (CallableMatrix, ConstantMatrix, GridMatrix, JumpMeasure,
                          standard_condition_check, symmetrize, validate_problem)
from jumplq.simulate import TimeGrid


def spec(**kw):
    base = {"n": 1, "m": 1, "T": 1.0, "jump_measure": [{"id": "z", "intensity": 1.0}]}
    base.update(kw)
    return base


def test_missing_entries_default_to_zero_and_identity_R():
    p = validate_problem({"n": 2, "m": 1, "T": 2.0, "jump_measure": [{"id": "z", "intensity": 0.5}]})
    assert np.array_equal(p.coefficients.A(0.3), np.zeros((2, 2)))
    assert np.array_equal(p.weights.R(0.3), np.eye(1))
    assert np.array_equal(p.weights.G, np.zeros((2, 2)))
    assert p.jump_measure.total_intensity == 0.5


@pytest.mark.parametrize("bad, exc", [
    (spec(coefficients={"A": [[1.0, 2.0]]}), DimensionMismatch),
    (spec(jump_measure=[{"id": "z", "intensity": -1.0}]), InvalidIntensity),
    (spec(jump_measure=[{"id": "z", "intensity": float("nan")}]), InvalidIntensity),
    (spec(jump_measure=[]), InvalidIntensity),
    (spec(jump_measure=[{"id": "z", "intensity": 1.0}, {"id": "z", "intensity": 2.0}]), ConfigError),
    (spec(T=0.0), InvalidHorizon),
    (spec(coefficients={"Z": [[1.0]]}), ConfigError),
    (spec(coefficients={"F": {"other": [[1.0]]}}), ConfigError),
    (spec(coefficients={"A": {"knots": [0.0, 0.5], "values": [[[1.0]], [[1.0]]]}}), ConfigError),
    (spec(coefficients={"A": lambda t: np.full(np.shape(t) + (1, 1), np.nan)}), NonFiniteCoefficient),
    ({"m": 1, "T": 1.0}, ConfigError),
])
def test_invalid_configs_are_rejected(bad, exc):
    with pytest.raises(exc):
        validate_problem(bad)


def test_error_messages_name_the_field():
    with pytest.raises(DimensionMismatch, match="A"):
        validate_problem(spec(coefficients={"A": [[1.0, 2.0]]}))
    with pytest.raises(ConfigError, match="'Z'"):
        validate_problem(spec(coefficients={"Z": [[1.0]]}))


def test_per_mark_coefficients_accept_dict_list_and_single_matrix():
    jm = [{"id": "a", "intensity": 1.0}, {"id": "b", "intensity": 2.0}]
    by_dict = validate_problem(spec(jump_measure=jm, coefficients={"E": {"b": [[2.0]], "a": [[1.0]]}}))
    by_list = validate_problem(spec(jump_measure=jm, coefficients={"E": [[[1.0]], [[2.0]]]}))
    single = validate_problem(spec(jump_measure=jm, coefficients={"E": [[3.0]]}))
    assert [e.at(0.0)[0, 0] for e in by_dict.coefficients.E] == [1.0, 2.0]
    assert [e.at(0.0)[0, 0] for e in by_list.coefficients.E] == [1.0, 2.0]
    assert [e.at(0.0)[0, 0] for e in single.coefficients.E] == [3.0, 3.0]


def test_builtin_key_resolves_to_named_problem():
    p = validate_problem({"builtin": "counterexample_6_1", "params": {"intensity": 2.0}})
    assert p.jump_measure.total_intensity == 2.0
    assert p.name == "counterexample_6_1"


def test_revalidating_a_problem_is_a_fixed_point():
    p = builtin("example_9_2").problem
    q = validate_problem(p)
    for t in (0.0, 0.4, 1.0):
        assert np.array_equal(q.weights.R(t), p.weights.R(t))
        assert np.array_equal(q.coefficients.D(t), p.coefficients.D(t))
    assert np.array_equal(q.weights.G, p.weights.G)


def test_symmetric_constant_passes_through_untouched():
    G = ConstantMatrix([[2.0, 1.0], [1.0, 3.0]])
    assert symmetrize(G, "G") is G


def test_asymmetric_input_is_symmetrized_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        S = symmetrize(ConstantMatrix([[1.0, 2.0], [0.0, 1.0]]), "Q")
    assert np.array_equal(S.value, [[1.0, 1.0], [1.0, 1.0]])
    assert any("Q" in r.getMessage() for r in caplog.records)


def test_symmetrization_is_idempotent():
    fn = CallableMatrix(lambda t: np.array([[t, 2 * t], [0.0, 1.0]]), (2, 2))
    once = symmetrize(fn, "Q")
    twice = symmetrize(once, "Q", probe_times=np.linspace(0, 1, 11))
    t = np.linspace(0, 1, 11)
    assert np.array_equal(once(t), twice(t))
    assert np.array_equal(once(t), np.swapaxes(once(t), -1, -2))


def test_grid_provider_interpolates_and_rejects_outside_times():
    g = GridMatrix([0.0, 1.0], [[[0.0]], [[2.0]]])
    assert g(np.array([0.25]))[0, 0, 0] == pytest.approx(0.5)
    with pytest.raises(OutOfRange):
        g(np.array([1.5]))


def test_callable_provider_accepts_scalar_only_functions():
    fn = CallableMatrix(lambda t: [[float(t) ** 2]], (1, 1))
    out = fn(np.array([0.5, 2.0]))
    assert out.shape == (2, 1, 1)
    assert out[:, 0, 0].tolist() == [0.25, 4.0]


def test_jump_measure_summaries():
    jm = JumpMeasure((("a", 0.5), ("b", 1.5)))
    assert jm.ids == ["a", "b"]
    assert jm.total_intensity == 2.0
    assert len(jm) == 2


def test_standard_conditions_on_builtins():
    grid = TimeGrid.uniform(0.0, 1.0, 100)
    r91 = standard_condition_check(builtin("example_9_1").problem, grid)
    assert not r91.convex1 and r91.g_min_eig == -0.75
    r62 = standard_condition_check(builtin("counterexample_6_2").problem, grid)
    assert r62.convex1 and r62.convex1_margin == 1.0
    assert r62.convex2 and r62.convex2_margin == 1.0  # F = 1, G = 2


def test_convex_margin_grows_with_control_weight():
    grid = TimeGrid.uniform(0.0, 1.0, 50)
    margins = []
    for c in (0.5, 1.0, 2.0, 4.0):
        p = validate_problem(spec(weights={"R": [[c]], "G": [[1.0]], "Q": [[1.0]]}))
        margins.append(standard_condition_check(p, grid).convex1_margin)
    assert margins == sorted(margins) and margins[0] == 0.5


def test_second_condition_uses_either_channel():
    grid = TimeGrid.uniform(0.0, 1.0, 50)
    p = validate_problem(spec(coefficients={"F": [[2.0]]}, weights={"R": [[0.0]], "G": [[1.0]]}))
    rep = standard_condition_check(p, grid)
    assert rep.convex2 and rep.convex2_margin == 1.0
