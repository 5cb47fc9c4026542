import numpy as np
import pytest
from numpy.testing import assert_allclose

from timecon.errors import ConfigError, DegenerateUtilityError, DomainError
from timecon.experiments.utilities import euler_coefficients, euler_grid, tree_coefficients
from timecon.services import benchmarks as bm
from timecon.services.bsde import PolicySpace
from timecon.services.dynutil import (
    OVERSHOOT_LIMIT,
    DeterministicUtility,
    LinearUtilityCoeffs,
    ProcessUtility,
    StaticUtility,
    aligned_pairs,
    build_linear_utility,
    check_comparison,
    check_linear_comparison,
    check_overshoot,
    deterministic_phi,
    linear_problem,
    maximizer_process,
    random_pairs,
    select_maximizer,
    simulate_switching,
    verify_tau_bound,
)
from timecon.services.lattice import TimeGrid, TreeMode, build_tree


def linear_clock() -> LinearUtilityCoeffs:
    """A_hat' = 1 from 0 in the first regime, A_hat' = -A_hat^2 in the second: one switch at t = 2."""
    return LinearUtilityCoeffs(
        alpha=np.array([[0.0, 0.0], [1.0, 0.0]]),
        beta=np.zeros((2, 2, 1)),
        a1=0.0,
        a2=1.0,
    )


def test_deterministic_ratio_switches_once():
    grid = TimeGrid(3.0, 150)
    ensemble = simulate_switching(linear_clock(), grid, 3, seed=0)
    assert_allclose(ensemble.hat[:, 50], 1.0, atol=1e-12)
    assert np.all(ensemble.switch_counts() == 1)
    tau = ensemble.tau(1)
    assert np.all((tau >= 2.0 - 1e-9) & (tau <= 2.02 + 1e-9))
    assert ensemble.max_overshoot <= OVERSHOOT_LIMIT
    path = ensemble.path(0)
    k = int(np.flatnonzero(path.is_switch)[0])
    assert path.regime[k - 1] == 1 and path.regime[k] == 2
    assert abs(path.hat[k]) <= 0.5 + 1e-12
    assert np.max(np.abs(path.weights[k] - path.weights[k - 1])) <= 0.02 + 1e-9
    assert path.switch_times.shape == (1,)


def test_switching_requires_fine_enough_grid():
    with pytest.raises(ConfigError):
        check_overshoot(euler_coefficients(), TimeGrid(1.0, 8))
    grid = euler_grid(euler_coefficients(), 1.0, 8)
    assert check_overshoot(euler_coefficients(), grid) <= OVERSHOOT_LIMIT


def test_euler_ensemble_is_reproducible():
    grid = euler_grid(euler_coefficients(), 1.0, 64)
    first = simulate_switching(euler_coefficients(), grid, 50, seed=11)
    second = simulate_switching(euler_coefficients(), grid, 50, seed=11)
    np.testing.assert_array_equal(first.hat, second.hat)
    assert first.switch_counts().max() >= 1


def test_degenerate_weights():
    coeffs = LinearUtilityCoeffs(alpha=np.zeros((2, 2)), beta=np.zeros((2, 2, 1)), a1=0.0, a2=0.0)
    with pytest.raises(DegenerateUtilityError):
        simulate_switching(coeffs, TimeGrid(1.0, 10), 2, seed=0)


def test_tree_realisation_needs_path_mode():
    tree = build_tree(TimeGrid(1.0, 3), 1, TreeMode.RECOMBINING)
    with pytest.raises(DomainError):
        build_linear_utility(tree_coefficients(), tree)


def test_tau_bound_report_on_rotating_ratio():
    grid = euler_grid(euler_coefficients(), 1.0, 64)
    report = verify_tau_bound(euler_coefficients(), grid, n_max=3, n_paths=400, seed=5)
    assert report.c_fitted > 0
    assert [row.n for row in report.rows] == [1, 2, 3]
    assert report.ok


def test_linear_comparison_holds_on_tree():
    tree = build_tree(TimeGrid(1.0, 3), 1, TreeMode.PATH)
    coeffs = tree_coefficients()
    problem = linear_problem(
        coeffs,
        terminal=lambda nodes: np.stack([nodes.brownian[:, 0], -0.5 * nodes.brownian[:, 0]], axis=1),
        control_set=np.array([-1.0, 1.0]),
    )
    weights = build_linear_utility(coeffs, tree).utility.weights[3]
    pairs = aligned_pairs(weights, problem.terminal_values(tree), 5, seed=3)
    report = check_linear_comparison(coeffs, problem, tree, pairs)
    assert report.tested == 5
    assert report.ok
    assert report.reduction_gap <= tree.dt


def test_static_utility_violates_comparison_on_deterministic_example():
    bench = bm.deterministic_example(2.0)
    tree = build_tree(TimeGrid(2.0, 2), 1, TreeMode.RECOMBINING)
    n_leaves = tree.node_count(2)
    eta = np.zeros((n_leaves, 2))
    eta_t = np.tile([0.0, 1.0], (n_leaves, 1))
    report = check_comparison(StaticUtility(bench.problem.utility), bench.problem, tree, 0, 2, [(eta, eta_t)], PolicySpace.ADAPTED)
    assert report.tested == 1
    assert not report.ok


def test_premise_failures_are_skipped(path_tree, drift_problem):
    n = path_tree.node_count(3)
    pairs = [(np.ones((n, 1)), np.zeros((n, 1)))]
    report = check_comparison(StaticUtility(drift_problem.utility), drift_problem, path_tree, 0, 3, pairs)
    assert report.skipped == 1 and report.tested == 0


def test_deterministic_phi_at_time_zero_is_phi():
    bench = bm.deterministic_example(2.0)
    tree = build_tree(TimeGrid(2.0, 4), 1, TreeMode.RECOMBINING)
    y = np.array([[0.3, 1.0], [-1.0, 0.0]])
    assert_allclose(deterministic_phi(bench.problem, tree, 0, y), [0.3, -1.0])


def test_static_utility_initial_gap_is_zero():
    phi = lambda y: np.asarray(y)[..., 0]
    assert StaticUtility(phi).initial_gap(phi, 2) == 0.0


def test_process_utility_reads_node_parameters():
    utility = ProcessUtility([np.array([1.0]), np.array([2.0, 3.0])], lambda c, y: -(y[:, 0] - c) ** 2)
    assert_allclose(utility(1, np.array([0, 1]), np.array([[2.0], [2.0]])), [0.0, -1.0])


def test_select_maximizer_breaks_ties_lexicographically():
    utility = StaticUtility(lambda y: np.asarray(y).sum(axis=-1))
    chosen = select_maximizer(utility, 0, 0, np.array([[0.0, 1.0], [1.0, 0.0], [0.2, 0.2]]))
    assert_allclose(chosen, [1.0, 0.0])


def test_random_pairs_are_seeded():
    a = random_pairs((4, 2), 3, seed=9)
    b = random_pairs((4, 2), 3, seed=9)
    for (x1, y1), (x2, y2) in zip(a, b):
        np.testing.assert_array_equal(x1, x2)
        np.testing.assert_array_equal(y1, y2)


@pytest.mark.parametrize("level_from", [0, 1])
def test_deterministic_utility_satisfies_comparison(level_from):
    bench = bm.deterministic_example(2.0)
    tree = build_tree(TimeGrid(2.0, 2), 1, TreeMode.RECOMBINING)
    n_leaves = tree.node_count(2)
    eta = np.zeros((n_leaves, 2))
    eta_t = np.tile([0.5, 0.0], (n_leaves, 1))
    utility = DeterministicUtility(bench.problem, tree)
    report = check_comparison(utility, bench.problem, tree, level_from, 2, [(eta, eta_t)], PolicySpace.DETERMINISTIC)
    assert report.tested == 1
    assert report.ok


def test_maximizer_process_picks_per_node():
    utility = StaticUtility(lambda y: np.asarray(y)[..., 0])
    chosen = maximizer_process(utility, 1, [np.array([[0.0], [2.0]]), np.array([[-1.0]])])
    assert_allclose(chosen, [[2.0], [-1.0]])
