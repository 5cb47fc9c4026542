import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from timecon.errors import ProblemValidationError, SizeError, StructureError
from timecon.services.bsde import (
    BSDEProblem,
    ControlPolicy,
    EnvelopeStructure,
    PolicySpace,
    best_index,
    dedupe_points,
    envelope_bsde,
    reachable_set,
    solve_bsde,
    static_value,
    validate_problem,
)
from timecon.services.lattice import TimeGrid, TreeMode, TreeRandomVariable, build_tree


def test_static_value_plays_top_control(drift_problem, path_tree):
    result = static_value(drift_problem, path_tree)
    assert result.value == pytest.approx(1.0, abs=1e-12)
    assert not result.heuristic
    assert result.evaluated == 3 ** 7
    for level in range(3):
        assert_array_equal(result.policy.at(level), 2)


def test_deterministic_space_matches_for_drift(drift_problem, path_tree):
    result = static_value(drift_problem, path_tree, PolicySpace.DETERMINISTIC)
    assert result.value == pytest.approx(1.0, abs=1e-12)
    assert result.evaluated == 27


def test_solve_bsde_constant_policy(drift_problem, path_tree):
    xi = TreeRandomVariable(3, drift_problem.terminal_values(path_tree))
    solution = solve_bsde(drift_problem, path_tree, ControlPolicy.constant(path_tree, 0), 3, xi)
    # Y_k = B_k - (T - t_k), Z = 1
    for k in range(4):
        assert_allclose(solution.y_at(k)[:, 0], path_tree.values[k][:, 0] - (1.0 - path_tree.time(k)), atol=1e-12)
    for k in range(3):
        assert_allclose(solution.z_at(k), 1.0, atol=1e-12)


def test_cap_exceeded_without_fallback(drift_problem, path_tree):
    with pytest.raises(SizeError):
        static_value(drift_problem, path_tree, cap=10)


def test_fallback_reaches_the_optimum(drift_problem, path_tree):
    result = static_value(drift_problem, path_tree, cap=10, fallback=True)
    assert result.heuristic
    assert result.value == pytest.approx(1.0, abs=1e-12)


def test_best_index_prefers_smallest_among_ties():
    assert best_index(np.array([1.0, 1.0 + 1e-13, 0.5])) == 0
    assert best_index(np.array([0.0, 2.0, 1.0])) == 1


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=20))
def test_best_index_is_within_tolerance_of_max(values):
    values = np.array(values)
    j = best_index(values)
    assert values[j] >= values.max() - 1e-12 * (1 + abs(values.max()))
    assert np.all(values[:j] < values.max() - 1e-12 * (1 + abs(values.max())))


def test_reachable_set_of_open_loop_drift(drift_problem, path_tree):
    reach = reachable_set(drift_problem, path_tree, 0, PolicySpace.DETERMINISTIC)
    assert_allclose(reach.points[0][:, 0], np.arange(-3, 4) / 3.0, atol=1e-12)


def test_dedupe_points_sorts_and_merges():
    pts = np.array([[1.0, 0.0], [0.0, 1.0], [1.0 + 1e-12, 0.0]])
    assert_allclose(dedupe_points(pts), [[0.0, 1.0], [1.0, 0.0]])


def test_validate_problem_rejects_wrong_lipschitz(path_tree):
    problem = BSDEProblem(
        value_dim=1,
        generator=lambda nodes, y, z, u: 2.0 * y,
        terminal=lambda nodes: nodes.brownian[:, :1],
        utility=lambda y: np.asarray(y)[..., 0],
        control_set=np.array([0.0]),
        lipschitz=1.0,
    )
    with pytest.raises(ProblemValidationError):
        validate_problem(problem, path_tree)
    validate_problem(problem.with_(lipschitz=2.0), path_tree)


def test_envelope_matches_brute_force_for_increasing_utility(drift_problem, path_tree):
    solution, report = envelope_bsde(drift_problem, path_tree)
    assert not report.violation
    assert report.max_residual <= 1e-10
    assert solution.y_at(0)[0, 0] == pytest.approx(1.0, abs=1e-12)
    for level in range(3):
        assert_array_equal(report.argmax[level][:, 0], 2)


def test_envelope_structure_probe_rejects_z_coupling():
    tree = build_tree(TimeGrid(1.0, 2), 1, TreeMode.PATH)
    problem = BSDEProblem(
        value_dim=2,
        generator=lambda nodes, y, z, u: np.stack([z[:, 1, 0], np.asarray(u, dtype=float).reshape(-1)], axis=1),
        terminal=lambda nodes: np.zeros((len(nodes), 2)),
        utility=lambda y: np.asarray(y).sum(axis=-1),
        control_set=np.array([0.0, 1.0]),
        lipschitz=1.0,
    )
    with pytest.raises(StructureError):
        envelope_bsde(problem, tree, EnvelopeStructure.COMPONENTWISE)
