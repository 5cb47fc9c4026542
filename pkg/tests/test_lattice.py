import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from timecon.errors import DomainError, SizeError, TreeModeError
from timecon.services.lattice import (
    TimeGrid,
    TreeMode,
    TreeRandomVariable,
    build_tree,
    conditional_expectation,
    evaluate_functional,
    path_functional,
    riemann_integral,
)

modes = st.sampled_from([TreeMode.PATH, TreeMode.RECOMBINING])


def test_single_step_path_tree():
    tree = build_tree(TimeGrid(1.0, 1), 1, TreeMode.PATH)
    assert tree.node_count(0) == 1
    assert_allclose(tree.values[1][:, 0], [-1.0, 1.0])


def test_recombining_level_sizes():
    tree = build_tree(TimeGrid(1.0, 2), 1, TreeMode.RECOMBINING)
    assert [tree.node_count(k) for k in range(3)] == [1, 2, 3]


def test_path_tree_leaf_probabilities():
    tree = build_tree(TimeGrid(1.0, 3), 1, TreeMode.PATH)
    assert tree.node_count(3) == 8
    assert_allclose(tree.probabilities(3), np.full(8, 1 / 8))


def test_path_cap_is_enforced():
    with pytest.raises(SizeError) as info:
        build_tree(TimeGrid(1.0, 12), 2, TreeMode.PATH)
    assert info.value.limit == 22


def test_invalid_grid():
    with pytest.raises(DomainError):
        TimeGrid(1.0, 0)
    with pytest.raises(DomainError):
        TimeGrid(-1.0, 3)


@settings(max_examples=30, deadline=None)
@given(steps=st.integers(1, 5), dim=st.integers(1, 2), mode=modes)
def test_probabilities_sum_to_one(steps, dim, mode):
    tree = build_tree(TimeGrid(1.0, steps), dim, mode)
    for k in range(steps + 1):
        assert abs(tree.probabilities(k).sum() - 1.0) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(steps=st.integers(1, 5), mode=modes, seed=st.integers(0, 2**32 - 1))
def test_tower_property(steps, mode, seed):
    tree = build_tree(TimeGrid(1.0, steps), 1, mode)
    rv = TreeRandomVariable.on(tree, steps, np.random.default_rng(seed).normal(size=tree.node_count(steps)))
    for k in range(steps + 1):
        for j in range(k + 1):
            via = conditional_expectation(tree, conditional_expectation(tree, rv, k), j)
            direct = conditional_expectation(tree, rv, j)
            assert_allclose(via.values, direct.values, rtol=0, atol=1e-14)


@settings(max_examples=20, deadline=None)
@given(steps=st.integers(1, 5), dim=st.integers(1, 2), mode=modes)
def test_brownian_martingale(steps, dim, mode):
    tree = build_tree(TimeGrid(1.0, steps), dim, mode)
    rv = TreeRandomVariable.on(tree, steps, tree.values[steps])
    for k in range(steps + 1):
        assert_allclose(conditional_expectation(tree, rv, k).values, tree.values[k], atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(steps=st.integers(1, 5), seed=st.integers(0, 2**32 - 1))
def test_increments_orthogonal_to_past(steps, seed):
    tree = build_tree(TimeGrid(1.0, steps), 1, TreeMode.PATH)
    rng = np.random.default_rng(seed)
    for k in range(steps):
        g = rng.normal(size=tree.node_count(k))
        child = tree.values[k + 1][:, 0] - tree.values[k][tree.parents(k + 1), 0]
        product = TreeRandomVariable.on(tree, k + 1, child * g[tree.parents(k + 1)])
        assert abs(conditional_expectation(tree, product, 0).values[0]) <= 1e-14 * (1 + np.abs(g).max())


def test_second_moment_of_terminal_value():
    tree = build_tree(TimeGrid(1.0, 6), 1, TreeMode.RECOMBINING)
    rv = TreeRandomVariable.on(tree, 6, tree.values[6][:, 0] ** 2)
    assert conditional_expectation(tree, rv, 0).values[0] == pytest.approx(1.0, abs=1e-12)


def test_constants_are_preserved():
    tree = build_tree(TimeGrid(1.0, 4), 2, TreeMode.RECOMBINING)
    rv = TreeRandomVariable.on(tree, 4, np.full(tree.node_count(4), 3.5))
    assert_allclose(conditional_expectation(tree, rv, 1).values, 3.5)


def test_modes_agree_on_markovian_functionals():
    grid = TimeGrid(1.0, 4)
    path, rec = build_tree(grid, 1, TreeMode.PATH), build_tree(grid, 1, TreeMode.RECOMBINING)
    f = lambda b: np.cos(b[:, 0]) + b[:, 0] ** 3
    for k in range(5):
        p = conditional_expectation(path, TreeRandomVariable.on(path, 4, f(path.values[4])), k).values
        r = conditional_expectation(rec, TreeRandomVariable.on(rec, 4, f(rec.values[4])), k).values
        # every path node maps to the recombining node with the same value
        lookup = {round(v, 12): r[i] for i, v in enumerate(rec.values[k][:, 0])}
        assert_allclose(p, [lookup[round(v, 12)] for v in path.values[k][:, 0]], atol=1e-12)


def test_target_level_above_source_is_rejected(path_tree):
    rv = TreeRandomVariable.on(path_tree, 1, path_tree.values[1][:, 0])
    with pytest.raises(DomainError):
        conditional_expectation(path_tree, rv, 2)


def test_path_functional_terminal_value():
    tree = build_tree(TimeGrid(1.0, 4), 1, TreeMode.PATH)
    node = int(np.flatnonzero(np.isclose(tree.values[1][:, 0], 0.5))[0])
    assert path_functional(tree, 1, node, lambda t, p: p[-1, 0]) == pytest.approx(0.5)


def test_path_functional_running_max():
    tree = build_tree(TimeGrid(1.0, 2), 1, TreeMode.PATH)
    # sign sequence (+, -): index 0b10
    value = path_functional(tree, 2, 2, lambda t, p: np.max(np.abs(p[:, 0])))
    assert value == pytest.approx(math.sqrt(0.5))


def test_path_functional_left_endpoint_integral():
    tree = build_tree(TimeGrid(1.0, 1), 1, TreeMode.PATH)
    assert path_functional(tree, 1, 1, lambda t, p: riemann_integral(p[:, 0], 1.0)) == 0.0


def test_path_functional_needs_path_mode(recombining_tree):
    with pytest.raises(TreeModeError):
        path_functional(recombining_tree, 2, 0, lambda t, p: p.max())
    value = path_functional(recombining_tree, 2, 2, lambda t, p: p[-1, 0], markovian=True)
    assert value == pytest.approx(1.0)


def test_evaluate_functional_stacks_nodes(path_tree):
    rv = evaluate_functional(path_tree, 2, lambda t, p: p[-1, 0])
    assert rv.level == 2
    assert_array_equal(rv.values, path_tree.values[2][:, 0])


def test_path_descendants_on_recombining_tree(recombining_tree):
    cols = recombining_tree.path_descendants(1, 2)
    assert cols.shape == (2, 4)
    assert_array_equal(cols[0], [0, 1, 1, 2])
