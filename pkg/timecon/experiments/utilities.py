"""Linear dynamic utilities: switching weights, switch-count tails and the comparison principle."""

import logging

import numpy as np

from timecon.experiments.registry import ExperimentRouter, RunContext
from timecon.models import CheckResult, ExperimentName
from timecon.services import benchmarks as bm
from timecon.services.bsde import PolicySpace
from timecon.services.dynutil import (
    OVERSHOOT_LIMIT,
    SWITCH_LEVEL,
    LinearUtilityCoeffs,
    StaticUtility,
    SwitchingEnsemble,
    aligned_pairs,
    build_linear_utility,
    check_comparison,
    check_linear_comparison,
    linear_problem,
    overshoot_bound,
    simulate_switching,
    verify_tau_bound,
)
from timecon.services.lattice import TimeGrid, TreeMode

logger = logging.getLogger(__name__)

router = ExperimentRouter()

COMPARISON_PAIRS = 50
MAX_TREE_STEPS = 4
MAX_EULER_STEPS = 1 << 15


def euler_coefficients() -> LinearUtilityCoeffs:
    """Rotation-type coupling with mild multiplicative noise: A_hat is pushed to +-2 about twice per unit time."""
    r, s = 2.0, 0.1
    return LinearUtilityCoeffs(
        alpha=np.array([[0.0, -r], [r, 0.0]]),
        beta=np.array([[[s], [0.0]], [[0.0], [0.0]]]),
        a1=1.0,
        a2=1.0,
    )


def tree_coefficients() -> LinearUtilityCoeffs:
    """Small coefficients so the switching construction is stable on coarse trees."""
    return LinearUtilityCoeffs(
        alpha=np.array([[0.01, 0.002], [0.002, 0.0]]),
        beta=np.array([[[0.002], [0.001]], [[0.001], [0.0]]]),
        a1=1.0,
        a2=0.5,
        cost=lambda nodes, u: np.stack([np.asarray(u, dtype=float).reshape(-1), -np.asarray(u, dtype=float).reshape(-1)], axis=1),
    )


def euler_grid(coeffs: LinearUtilityCoeffs, horizon: float, steps: int) -> TimeGrid:
    """Smallest doubling of `steps` whose overshoot slack is within the limit."""
    grid = TimeGrid(horizon, steps)
    while overshoot_bound(coeffs, grid) > OVERSHOOT_LIMIT and grid.steps < MAX_EULER_STEPS:
        grid = TimeGrid(horizon, grid.steps * 2)
    return grid


def switch_band(ensemble: SwitchingEnsemble):
    """Post-switch |A_hat| range and pre-switch overshoot."""
    after = np.abs(ensemble.hat[ensemble.is_switch])
    lo = float(after.min()) if after.size else 1.0 / SWITCH_LEVEL
    hi = float(after.max()) if after.size else 1.0 / SWITCH_LEVEL
    return lo, hi, ensemble.max_overshoot


def weight_jumps(ensemble: SwitchingEnsemble) -> float:
    """Largest relative change of (A1, A2) over a step that ends in a switch."""
    prev, nxt = ensemble.weights[:, :-1], ensemble.weights[:, 1:]
    mask = ensemble.is_switch[:, 1:]
    if not np.any(mask):
        return 0.0
    jump = np.max(np.abs(nxt - prev), axis=-1)[mask]
    scale = np.max(np.abs(prev), axis=-1)[mask]
    return float(np.max(jump / scale))


@router.experiment(ExperimentName.DYNAMIC_UTILITY_LINEAR, "Theorem 5.4", "linear dynamic utility: switching weights and the comparison principle")
def dynamic_utility_linear(ctx: RunContext) -> None:
    coeffs = euler_coefficients()
    grid = euler_grid(coeffs, ctx.config.horizon, ctx.config.steps)
    slack = overshoot_bound(coeffs, grid)
    ensemble = simulate_switching(coeffs, grid, ctx.config.monte_carlo_size, ctx.seed)
    counts = ensemble.switch_counts()
    lo, hi, overshoot = switch_band(ensemble)
    ctx.note(euler_steps=grid.steps, overshoot_slack=slack, paths_with_switch=int(np.sum(counts > 0)), max_switches=int(counts.max()))
    band_ok = lo >= 1.0 / (SWITCH_LEVEL + OVERSHOOT_LIMIT) - 1e-12 and hi <= 1.0 / SWITCH_LEVEL + 1e-12
    ctx.check(CheckResult.holds("switch_band", band_ok, detail=f"post-switch |A_hat| in [{lo:.4g}, {hi:.4g}]"))
    ctx.check(CheckResult.at_most("switch_overshoot", overshoot, OVERSHOOT_LIMIT))
    ctx.check(CheckResult.at_most("weights_continuous", weight_jumps(ensemble), slack, detail="relative jump over switching steps"))

    histogram = np.bincount(counts)
    ctx.store.write_csv("switch_counts.csv", ["switches", "paths"], enumerate(histogram))
    ctx.store.write_records("switching_path0.csv", ensemble.path(0).rows())

    # tree comparison: reduced scalar BSDE per policy and max over policies
    tree = ctx.tree(steps=min(ctx.config.steps, MAX_TREE_STEPS), mode=TreeMode.PATH, dim=1)
    tcoeffs = tree_coefficients()
    problem = linear_problem(
        tcoeffs,
        terminal=lambda nodes: np.stack([nodes.brownian[:, 0], -0.5 * nodes.brownian[:, 0]], axis=1),
        control_set=np.array([-1.0, 1.0]),
        name="linear",
    )
    weights = build_linear_utility(tcoeffs, tree).utility.weights[tree.steps]
    xi = problem.terminal_values(tree)
    pairs = aligned_pairs(weights, xi, COMPARISON_PAIRS, ctx.seed)
    report = check_linear_comparison(tcoeffs, problem, tree, pairs, PolicySpace.ADAPTED, ctx.cap, ctx.config.comparison_tol)
    ctx.note(linear_tested=report.tested, linear_skipped=report.skipped, reduction_gap=report.reduction_gap, worst_slack=report.worst_slack)
    ctx.check(CheckResult.holds("linear_comparison", report.ok, measured=report.per_policy_violations + report.max_violations))
    ctx.check(CheckResult.at_most("reduction_gap", report.reduction_gap, tree.dt, detail="|A_0 . Y_0 - Y_hat_0| within one step of scheme error"))

    # control group: static phi on the deterministic example
    horizon = ctx.config.horizon if ctx.config.horizon > 1 else 2.0
    bench = bm.deterministic_example(horizon)
    det_tree = ctx.tree(steps=min(ctx.config.steps, MAX_TREE_STEPS), mode=TreeMode.RECOMBINING, horizon=horizon, dim=1)
    n_leaves = det_tree.node_count(det_tree.steps)
    det_pairs = aligned_pairs(np.tile([1.0, 0.0], (n_leaves, 1)), np.zeros((n_leaves, 2)), COMPARISON_PAIRS, ctx.seed + 1)
    control = check_comparison(StaticUtility(bench.problem.utility), bench.problem, det_tree, 0, det_tree.steps, det_pairs,
                               PolicySpace.ADAPTED, ctx.cap, ctx.config.comparison_tol)
    ctx.check(CheckResult.holds("control_group_violates", not control.ok, measured=len(control.violations)))
    ctx.store.write_csv(
        "comparison.csv",
        ["run", "tested", "skipped", "violations", "worst_slack"],
        [
            ("linear", report.tested, report.skipped, report.per_policy_violations + report.max_violations, report.worst_slack),
            ("static_deterministic", control.tested, control.skipped, len(control.violations), control.worst_slack),
        ],
    )


@router.experiment(ExperimentName.TAU_BOUND, "Theorem 5.4 Step 3", "linear dynamic utility: tail of the number of regime switches")
def tau_bound(ctx: RunContext) -> None:
    coeffs = euler_coefficients()
    grid = euler_grid(coeffs, ctx.config.horizon, ctx.config.steps)
    report = verify_tau_bound(coeffs, grid, ctx.config.tau_paths_n, ctx.config.monte_carlo_size, ctx.seed)
    ctx.note(c_fitted=report.c_fitted, delta=report.delta, m=report.m, euler_steps=grid.steps)
    ctx.store.write_csv(
        "tau_bound.csv",
        ["n", "frequency", "std_error", "bound", "vacuous", "ok"],
        ((r.n, r.frequency, r.std_error, r.bound, r.vacuous, r.ok) for r in report.rows),
    )
    ctx.store.write_records("one_step.csv", report.one_step)
    for row in report.rows:
        ctx.check(CheckResult.at_most(f"tau_{row.n}", row.frequency, row.bound + 3 * row.std_error,
                                      detail="vacuous bound" if row.vacuous else ""))
    for step in report.one_step:
        ctx.check(CheckResult.at_most(f"one_step_{step['k']}", step["frequency"], 0.5 + 3 * step["std_error"]))
