import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from timecon.errors import DomainError, EmptySetError
from timecon.experiments.duality import deterministic_hjb_config, deterministic_markovian, identity_problem
from timecon.services.bsde import PolicySpace, reachable_set
from timecon.services.duality import (
    HJBConfig,
    NodalSet,
    check_geometric_dpp,
    check_w_regularity,
    dual_static_value,
    dual_value_direct,
    extract_nodal_set,
    grid_points,
    hausdorff,
    solve_dual_hjb,
)
from timecon.services.lattice import TimeGrid, TreeMode, build_tree

Y_AXIS = np.linspace(-1.0, 1.0, 9)


@pytest.fixture
def small_tree():
    return build_tree(TimeGrid(1.0, 2), 1, TreeMode.RECOMBINING)


def test_grid_points_are_lexicographic():
    pts = grid_points([np.array([0.0, 1.0]), np.array([5.0, 6.0])])
    assert_allclose(pts, [[0, 5], [0, 6], [1, 5], [1, 6]])


def test_tree_dual_value_of_identity_is_squared_distance(small_tree):
    problem = identity_problem().to_bsde_problem()
    w = dual_value_direct(problem, small_tree, 0, Y_AXIS[:, None], [-1.0, 0.0, 1.0])
    assert_allclose(w.values[0], Y_AXIS**2, atol=1e-12)


def test_nodal_set_of_identity_is_origin(small_tree):
    problem = identity_problem().to_bsde_problem()
    w = dual_value_direct(problem, small_tree, 0, Y_AXIS[:, None], [-1.0, 0.0, 1.0])
    nodal = extract_nodal_set(w, 0, 0, 0.01)
    assert not nodal.empty
    assert_allclose(nodal.points, [[0.0]])
    assert dual_static_value(nodal, lambda y: np.asarray(y)[..., 0]).value == 0.0


def test_hjb_identity_solution_is_exact_on_trusted_region():
    dual = solve_dual_hjb(identity_problem(), TimeGrid(1.0, 2), HJBConfig(dx=0.1, dy=[0.1]))
    exact = (dual.y_axes[0][None, :] - dual.x[:, None]) ** 2
    assert np.any(dual.trusted)
    assert np.max(np.abs(dual.values[0] - exact)[dual.trusted]) <= 0.05
    assert np.all(dual.values >= 0.0)


def test_geometric_dpp_on_identity(small_tree):
    problem = identity_problem().to_bsde_problem()
    report = check_geometric_dpp(problem, small_tree, 0.05, 0, 1, Y_AXIS[:, None], [-1.0, 0.0, 1.0])
    assert report.inclusion_a
    assert report.inclusion_b
    assert report.rho <= report.rho_bound
    assert report.nodal_size == 1


def test_deterministic_nodal_set_tracks_reachable_set():
    tree = build_tree(TimeGrid(2.0, 2), 1, TreeMode.RECOMBINING)
    problem = deterministic_markovian(2.0).to_bsde_problem()
    reach = reachable_set(problem, tree, 0, PolicySpace.DETERMINISTIC).points[0]
    assert_allclose(reach, [[0, 0], [0, 1], [1, 1], [1, 2]], atol=1e-12)
    dy = 0.1
    axes = [np.round(np.arange(-1.0, 1.0 + dy / 2, dy), 12), np.round(np.arange(-0.2, 2.2 + dy / 2, dy), 12)]
    w = dual_value_direct(problem, tree, 0, grid_points(axes), [0.0], PolicySpace.DETERMINISTIC)
    nodal = extract_nodal_set(w, 0, 0, 0.5 * dy * dy)
    assert nodal.points.shape[0] == 4
    assert hausdorff(nodal.points, reach) <= 1e-9


def test_deterministic_hjb_config_scales_epsilon_with_dy():
    config = deterministic_hjb_config(2.0, 0.02)
    assert config.nodal_epsilon() == pytest.approx(0.005)
    assert config.y_min == [-1.0, -0.5]
    assert config.y_max == [1.0, 2.5]
    assert deterministic_hjb_config(2.0, 0.02, epsilon=1e-3).nodal_epsilon() == 1e-3


def test_deterministic_problem_needs_horizon_above_one():
    with pytest.raises(DomainError):
        deterministic_markovian(1.0)


def test_nodal_set_rejects_nonpositive_epsilon(small_tree):
    problem = identity_problem().to_bsde_problem()
    w = dual_value_direct(problem, small_tree, 0, Y_AXIS[:, None], [0.0])
    with pytest.raises(DomainError):
        extract_nodal_set(w, 0, 0, 0.0)


def test_dual_static_value_of_empty_set():
    empty = NodalSet(0, 0, 1e-3, np.zeros((0, 1)), True)
    with pytest.raises(EmptySetError):
        dual_static_value(empty, lambda y: np.asarray(y)[..., 0])


def test_hausdorff_is_symmetric():
    a = np.array([[0.0], [1.0]])
    b = np.array([[0.0]])
    assert hausdorff(a, b) == hausdorff(b, a) == 1.0


def test_regularity_of_quadratic_dual_value(small_tree):
    problem = identity_problem().to_bsde_problem()
    w = dual_value_direct(problem, small_tree, 0, Y_AXIS[:, None], [-1.0, 0.0, 1.0])
    report = check_w_regularity(w, 0, 0, bound=1.0)
    assert report.holds
    assert report.pairs == 36


@settings(max_examples=25, deadline=None)
@given(eps=st.floats(1e-4, 1.0), factor=st.floats(1.0, 4.0))
def test_nodal_sets_grow_with_epsilon(eps, factor):
    tree = build_tree(TimeGrid(1.0, 2), 1, TreeMode.RECOMBINING)
    w = dual_value_direct(identity_problem().to_bsde_problem(), tree, 0, Y_AXIS[:, None], [-1.0, 0.0, 1.0])
    small = {tuple(p) for p in extract_nodal_set(w, 0, 0, eps).points}
    large = {tuple(p) for p in extract_nodal_set(w, 0, 0, eps * factor).points}
    assert small <= large
