import numpy as np
import pytest

from timecon.errors import DomainError, InvalidCylinderError, StructureError, TreeModeError
from timecon.experiments.forward import analytic_residual, linear_problem, squared_brownian
from timecon.services.dynutil import random_pairs
from timecon.services.lattice import TimeGrid, TreeMode, build_tree
from timecon.services.master import (
    DPP_TOL,
    CylinderFunctional,
    check_forward_dpp,
    check_lipschitz,
    demo_problem,
    forward_value,
    illposed_demo,
    master_residual,
    path_derivative_probe,
    z_generator,
    zero_generator,
)


def test_forward_value_at_horizon_is_static_value(drift_problem, path_tree):
    xi = drift_problem.terminal_values(path_tree)
    assert forward_value(drift_problem, path_tree, 3, xi) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("level_from,level_to", [(0, 1), (0, 3), (1, 3), (2, 3)])
def test_forward_dpp_is_exact(drift_problem, path_tree, level_from, level_to):
    eta = np.random.default_rng(4).normal(size=(path_tree.node_count(level_to), 1))
    report = check_forward_dpp(drift_problem, path_tree, level_from, level_to, eta)
    assert not report.heuristic
    assert report.residual <= DPP_TOL
    assert report.ok


def test_forward_dpp_on_a_single_level(drift_problem, path_tree):
    report = check_forward_dpp(drift_problem, path_tree, 2, 2, np.zeros((4, 1)))
    assert report.residual == 0.0
    assert report.segments == 1


def test_forward_dpp_rejects_reversed_levels(drift_problem, path_tree):
    with pytest.raises(DomainError):
        check_forward_dpp(drift_problem, path_tree, 2, 1, np.zeros((2, 1)))


def test_lipschitz_in_terminal_variable(drift_problem, path_tree):
    pairs = random_pairs((path_tree.node_count(3), 1), 20, seed=1)
    pairs.append((np.ones((8, 1)), np.ones((8, 1))))
    report = check_lipschitz(drift_problem, path_tree, 3, pairs)
    assert report.tested == 20 and report.skipped == 1
    assert report.bound == pytest.approx(1.0)
    assert report.holds


def test_master_residual_matches_closed_form():
    tree = build_tree(TimeGrid(1.0, 4), 1, TreeMode.PATH)
    result = master_residual(linear_problem(), tree, squared_brownian(), 2)
    expected = analytic_residual(1.0, tree.dt, 2)
    assert result.residual == pytest.approx(expected, rel=1e-6, abs=1e-6)
    assert result.to_dict()["level"] == 2


def test_master_residual_needs_path_tree(recombining_tree):
    with pytest.raises(TreeModeError):
        master_residual(linear_problem(), recombining_tree, squared_brownian(), 2)


def test_master_residual_needs_positive_level(path_tree):
    with pytest.raises(DomainError):
        master_residual(linear_problem(), path_tree, squared_brownian(), 0)


def test_probe_accepts_exact_derivatives():
    tree = build_tree(TimeGrid(1.0, 16), 1, TreeMode.RECOMBINING)
    assert path_derivative_probe(squared_brownian(), tree).max_residual <= 1e-12


def test_probe_rejects_missing_space_derivative():
    tree = build_tree(TimeGrid(1.0, 16), 1, TreeMode.RECOMBINING)
    wrong = CylinderFunctional(
        value=lambda t, paths: paths[:, -1, 0] ** 2,
        d_t=lambda t, paths: np.zeros(paths.shape[0]),
        d_omega=lambda t, paths: np.zeros(paths.shape[0]),
        d_omega2=lambda t, paths: np.full(paths.shape[0], 2.0),
        markovian=True,
    )
    with pytest.raises(InvalidCylinderError):
        path_derivative_probe(wrong, tree)


def test_path_dependent_cylinder_needs_path_tree(recombining_tree):
    cyl = CylinderFunctional(
        value=lambda t, paths: paths[:, :, 0].max(axis=1),
        d_t=lambda t, paths: np.zeros(paths.shape[0]),
        d_omega=lambda t, paths: np.zeros(paths.shape[0]),
        d_omega2=lambda t, paths: np.zeros(paths.shape[0]),
    )
    with pytest.raises(TreeModeError):
        path_derivative_probe(cyl, recombining_tree)


def test_illposed_gap_equals_horizon(path_tree):
    report = illposed_demo(demo_problem(), path_tree, zero_generator, z_generator)
    assert report.rhs_identical
    assert report.psi_first == pytest.approx(0.0, abs=1e-12)
    assert report.gap == pytest.approx(1.0, abs=1e-12)
    assert report.witness


def test_illposed_needs_generators_agreeing_at_zero(path_tree):
    with pytest.raises(StructureError):
        illposed_demo(demo_problem(), path_tree, zero_generator, lambda nodes, y, z, u: y)
