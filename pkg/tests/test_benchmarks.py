import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from timecon.errors import ConfigError, DomainError, OutOfScopeError
from timecon.services import benchmarks as bm
from timecon.services.bsde import static_value
from timecon.services.lattice import TimeGrid, TreeMode, build_tree


def path_tree_of(steps: int, horizon: float = 1.0):
    return build_tree(TimeGrid(horizon, steps), 1, TreeMode.PATH)


@pytest.mark.parametrize("t,expected", [(0.0, 0.5), (0.5, 0.5), (1.5, 0.375)])
def test_deterministic_value(t, expected):
    assert bm.deterministic_value(t, 2.0) == pytest.approx(expected, abs=1e-12)


def test_deterministic_example_needs_long_horizon():
    with pytest.raises(DomainError):
        bm.deterministic_example(1.0)


def test_deterministic_reachable_mask():
    inside = np.array([[0.0, 0.0], [0.5, 1.0], [-0.5, 1.0], [0.0, 2.0], [0.0, 1.0]])
    outside = np.array([[0.6, 1.0], [0.0, 2.1], [-0.6, 1.0], [0.1, 0.0]])
    assert bm.deterministic_reachable_mask(2.0, inside).all()
    assert not bm.deterministic_reachable_mask(2.0, outside).any()


def test_deterministic_reachable_points_cover_the_set():
    points = bm.deterministic_reachable_points(2.0, 0.05)
    assert bm.deterministic_reachable_mask(2.0, points, tol=1e-9).all()
    assert points[:, 0].max() == pytest.approx(0.5, abs=1e-12)
    assert points[:, 1].min() == pytest.approx(0.0) and points[:, 1].max() == pytest.approx(2.0)
    with pytest.raises(DomainError):
        bm.deterministic_reachable_points(2.0, 0.0)


def test_deterministic_witness():
    bench = bm.deterministic_example(2.0)
    tree = build_tree(TimeGrid(2.0, 8), 1, TreeMode.RECOMBINING)
    witness = bm.deterministic_witness(bench, tree, 2)
    assert witness.time == pytest.approx(0.5)
    assert witness.expected_levels == [4, 5]
    assert witness.disagreement_levels == [4, 5]
    assert witness.margin == pytest.approx(0.1875, abs=1e-12)
    assert witness.ok


def test_witness_level_must_be_interior():
    bench = bm.deterministic_example(2.0)
    tree = build_tree(TimeGrid(2.0, 4), 1, TreeMode.RECOMBINING)
    with pytest.raises(DomainError):
        bm.deterministic_witness(bench, tree, 0)


def test_one_dim_reference():
    bench = bm.one_dimensional()
    assert bench.params["c"] == 1.0
    assert bench.reference.optimal_value == 0.0
    assert bench.reference.optimal_control == "u* = -1"
    assert bm.one_dimensional(c=0.2).reference.optimal_control.startswith("any u")


def test_one_dim_static_value_is_exact():
    bench = bm.one_dimensional()
    result = static_value(bench.problem, path_tree_of(3))
    assert result.value == pytest.approx(0.0, abs=1e-12)


def test_one_dim_witness_plays_up():
    bench = bm.one_dimensional()
    report = bm.one_dim_witness(bench, path_tree_of(8))
    assert report.nodes > 0
    assert report.coincide


def test_one_dim_restoration():
    bench = bm.one_dimensional()
    tree = path_tree_of(3)
    restored = bm.one_dim_restoration(bench, tree, restored=True)
    assert restored.nodes == 7
    assert restored.coincide
    assert not bm.one_dim_restoration(bench, tree, restored=False).coincide


def test_principal_agent_reference():
    bench = bm.principal_agent()
    assert bench.params["u_star"] == pytest.approx(2 / 3)
    assert bench.params["x0"] == pytest.approx(0.0)
    assert bm.market_value(bench, 0.0, np.zeros(1))[0] == -1.0


def test_principal_agent_rejects_positive_reservation():
    with pytest.raises(DomainError):
        bm.principal_agent(reservation=0.5)


def test_agent_terminal_is_optimal_contract():
    bench = bm.principal_agent(gamma_a=2.0)
    tree = path_tree_of(4)
    states = bm.agent_terminal(bench, tree, bench.params["u_star"])
    assert_allclose(states, bm.optimal_contract(bench, tree.values[4][:, 0]), atol=1e-10)


def test_contract_consistency_needs_moving_reservation():
    bench = bm.principal_agent(gamma_a=2.0)
    tree = path_tree_of(4)
    restored = bm.contract_consistency(bench, tree, restored=True)
    assert restored.consistent
    assert restored.checked == 5 * 16
    assert not bm.contract_consistency(bench, tree, restored=False).consistent


def test_contract_consistency_needs_path_tree():
    bench = bm.principal_agent()
    with pytest.raises(DomainError):
        bm.contract_consistency(bench, build_tree(TimeGrid(1.0, 3), 1, TreeMode.RECOMBINING))


def test_mean_variance_reference():
    bench = bm.mean_variance()
    assert bm.mv_risk_process(bench, 0.0, np.array([1.0]))[0] == 1.0
    assert bm.mv_feedback(bench)(0.0, 0.0, 1.0) == pytest.approx(math.e)
    assert bm.mv_utility(np.array([[1.0, 1.0]]), 1.0)[0] == pytest.approx(1.0)


def test_mean_variance_restoration_on_tree():
    bench = bm.mean_variance()
    tree = path_tree_of(3)
    restored = bm.mv_restoration(bench, tree, restored=True)
    static = bm.mv_restoration(bench, tree, restored=False)
    assert restored.nodes == 6
    # on three steps the Euler tree keeps the node optimum O(dt) away from the restricted intercept
    assert restored.intercept_gap == pytest.approx(0.5192, abs=2e-3)
    assert static.intercept_gap == pytest.approx(1.1878, abs=2e-3)
    assert not static.coincide


def test_tree_risk_process_approaches_closed_form():
    bench = bm.mean_variance()
    coarse = bm.mv_risk_gap(bench, path_tree_of(3))
    fine = bm.mv_risk_gap(bench, path_tree_of(6))
    assert coarse == pytest.approx(0.5192, abs=2e-3)
    assert fine < 0.7 * coarse


def test_tree_risk_process_at_origin():
    bench = bm.mean_variance()
    tree = path_tree_of(4)
    assert bm.mv_tree_risk_process(bench, tree, 0, 0, bench.params["x0"]) == pytest.approx(bench.params["c"])


def test_out_of_scope_benchmark():
    with pytest.raises(OutOfScopeError):
        bm.get_benchmark("probability_distortion")


def test_unknown_benchmark():
    with pytest.raises(ConfigError) as info:
        bm.get_benchmark("nope")
    assert "one_dim" in str(info.value)


def test_get_benchmark_passes_parameters():
    assert bm.get_benchmark("deterministic", horizon=3.0).horizon == 3.0
