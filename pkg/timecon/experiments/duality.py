"""Dual control problem: HJB grid, nodal sets against reachable sets, geometric DPP."""

import logging
from typing import Dict, Optional

import numpy as np

from timecon.errors import DomainError
from timecon.experiments.registry import ExperimentRouter, RunContext
from timecon.models import CheckResult, ExperimentName
from timecon.services import benchmarks as bm
from timecon.services.bsde import PolicySpace, reachable_set
from timecon.services.duality import (
    DualGrid,
    HJBConfig,
    MarkovianProblem,
    NodalSet,
    check_geometric_dpp,
    dual_static_value,
    dual_value_direct,
    extract_nodal_set,
    grid_points,
    hausdorff,
    solve_dual_hjb,
)
from timecon.services.lattice import TimeGrid, TreeMode

logger = logging.getLogger(__name__)

router = ExperimentRouter()

# tree-exact dual runs enumerate every (z, u) cone policy, so they stay small
DUAL_TREE_STEPS = 3
# unit steps put every open-loop reachable point of the deterministic example on the y-grid
REACH_HORIZON = 2.0
REACH_STEPS = 2
GEOMETRIC_REFINEMENTS = (0.2, 0.1)
DET_DY = 0.02
DET_HJB_LEVELS = 4
HJB_REFINEMENTS = (0.04, 0.02)
# n at which the dual static value must reach the fine tolerance
FINE_STEPS = 256
COARSE_TOLERANCE = 5e-2
FINE_TOLERANCE = 1e-2
# the first-order scheme lifts W by O(dy) near moving fronts, so nodal thresholds scale with dy
VISCOSITY_EPSILON = 0.25


def identity_problem() -> MarkovianProblem:
    """f = 0, xi = B_T: W(t, x, y) = (y - x)^2 exactly."""
    return MarkovianProblem(
        value_dim=1,
        generator=lambda t, x, y, z, u: np.zeros_like(y),
        terminal=lambda x: np.asarray(x, dtype=float)[:, :1],
        utility=lambda y: np.asarray(y)[..., 0],
        control_set=np.array([0.0]),
        name="identity",
    )


def deterministic_markovian(horizon: float) -> MarkovianProblem:
    """The deterministic benchmark written in (t, x, y, z, u) form."""
    if not horizon > 1:
        raise DomainError(f"the deterministic example needs T > 1, got {horizon}")

    def generator(t, x, y, z, u):
        u = np.asarray(u, dtype=float).reshape(-1)
        return np.stack([u - y[:, 1], u], axis=1)

    return MarkovianProblem(
        value_dim=2,
        generator=generator,
        terminal=lambda x: np.zeros((np.asarray(x).shape[0], 2)),
        utility=lambda y: np.asarray(y)[..., 0],
        control_set=np.array([0.0, 1.0]),
        lipschitz=1.0,
        name="deterministic",
    )


def deterministic_hjb_config(horizon: float, dy: float, epsilon: Optional[float] = None) -> HJBConfig:
    # W does not depend on x here; three x-nodes carry the quadratic padding
    return HJBConfig(
        x_min=-0.5, x_max=0.5, dx=0.5,
        y_min=[-0.5 * (horizon - 1.0) ** 2 - 0.5, -0.5], y_max=[1.0, horizon + 0.5], dy=[dy, dy],
        z_values=[0.0], epsilon=VISCOSITY_EPSILON * dy if epsilon is None else epsilon,
    )


def _deterministic_nodal(problem: MarkovianProblem, horizon: float, dy: float, epsilon: Optional[float], cache: Dict[float, DualGrid]) -> NodalSet:
    config = deterministic_hjb_config(horizon, dy, epsilon)
    if dy not in cache:
        cache[dy] = solve_dual_hjb(problem, TimeGrid(horizon, DET_HJB_LEVELS), config)
    dual = cache[dy]
    return extract_nodal_set(dual, 0, int(np.argmin(np.abs(dual.x))), config.nodal_epsilon())


def _deterministic_axes(dy: float):
    return [np.round(np.arange(-1.0, 1.0 + dy / 2, dy), 12), np.round(np.arange(-0.2, 2.2 + dy / 2, dy), 12)]


def _deterministic_horizon(ctx: RunContext) -> float:
    return ctx.config.horizon if ctx.config.horizon > 1 else 2.0


@router.experiment(ExperimentName.DUALITY, "§4", "duality: dual HJB value, nodal sets and reachable sets")
def duality_experiment(ctx: RunContext) -> None:
    # identity problem on the HJB grid
    problem = identity_problem()
    config = HJBConfig(epsilon=ctx.config.epsilon)
    dual = solve_dual_hjb(problem, TimeGrid(ctx.config.horizon, ctx.config.steps), config)
    x, y = dual.x, dual.y_axes[0]
    exact = (y[None, :] - x[:, None]) ** 2
    error = np.abs(dual.values[0] - exact)
    trusted_error = float(np.max(error[dual.trusted])) if np.any(dual.trusted) else float("inf")
    ctx.note(hjb_substeps=dual.substeps, hjb_dt=dual.dt_max, hjb_trusted_error=trusted_error)
    ctx.check(CheckResult.at_most("hjb_identity_error", trusted_error, 0.05, detail="max |W - (y-x)^2| on the trusted interior"))

    ix0 = int(np.argmin(np.abs(x)))
    nodal = extract_nodal_set(dual, 0, ix0, config.nodal_epsilon())
    distance = hausdorff(nodal.points, np.zeros((1, 1))) if not nodal.empty else float("inf")
    ctx.check(CheckResult.at_most("nodal_set_at_origin", distance, config.dy[0] * (1 + 1e-9), detail="Hausdorff distance to {0}"))
    ctx.store.write_csv(
        "hjb_identity.csv",
        ["x", "y", "W", "exact", "trusted"],
        ((x[i], y[j], dual.values[0, i, j], exact[i, j], dual.trusted[i, j]) for i in range(x.size) for j in range(y.size)),
    )

    # deterministic example: HJB dual static value, finer y-grid for longer trees
    horizon = _deterministic_horizon(ctx)
    det = deterministic_markovian(horizon)
    duals = {}
    dy = min(DET_DY, horizon / ctx.config.steps)
    tolerance = FINE_TOLERANCE if ctx.config.steps >= FINE_STEPS else COARSE_TOLERANCE
    det_nodal = _deterministic_nodal(det, horizon, dy, ctx.config.epsilon, duals)
    analytic = bm.deterministic_value(0.0, horizon)
    ctx.note(dual_dy=dy, dual_epsilon=det_nodal.epsilon)
    if det_nodal.empty:
        ctx.check(CheckResult.holds("dual_static_value", False, detail="empty nodal set"))
    else:
        dsv = dual_static_value(det_nodal, det.utility)
        ctx.note(dual_static_value=dsv.value, dual_y_star=dsv.y_star)
        ctx.check(CheckResult.at_most("dual_static_value", abs(dsv.value - analytic), tolerance,
                                      detail=f"max phi over the nodal set vs 1/2 at dy={dy:g}, n={ctx.config.steps}"))

    # HJB nodal sets against the closed-form relaxed reachable set at two refinements
    reference = bm.deterministic_reachable_points(horizon, min(HJB_REFINEMENTS) / 4)
    rows, distances = [], []
    for dy_ref in HJB_REFINEMENTS:
        nodal = _deterministic_nodal(det, horizon, dy_ref, ctx.config.epsilon, duals)
        h = hausdorff(nodal.points, reference) if not nodal.empty else float("inf")
        distances.append(h)
        rows.append((dy_ref, nodal.epsilon, nodal.points.shape[0], reference.shape[0], h, h / dy_ref))
        # upwind viscosity moves the zero front by O(sqrt(dy)), so two cells is reported, not required
        ctx.check(CheckResult.at_most(f"hjb_nodal_vs_reachable_dy{dy_ref:g}", h, 2.0 * dy_ref,
                                      detail=f"Hausdorff <= 2 grid cells ({h / dy_ref:.2f} cells)", flag=True))
    ctx.check(CheckResult.holds("hjb_hausdorff_decreases", distances[1] < distances[0], measured=distances[1],
                                detail=f"{distances[0]:.4g} at dy={HJB_REFINEMENTS[0]:g}"))
    ctx.store.write_csv("nodal_vs_reachable.csv", ["dy", "epsilon", "nodal_points", "reachable_points", "hausdorff", "cells"], rows)

    # tree-exact dual value vanishes on the open-loop reachable points
    bsde = det.to_bsde_problem()
    tree = ctx.tree(steps=REACH_STEPS, mode=TreeMode.RECOMBINING, horizon=REACH_HORIZON, dim=1)
    reachable = reachable_set(bsde, tree, 0, PolicySpace.DETERMINISTIC, ctx.cap).points[0]
    tree_dy = HJB_REFINEMENTS[0]
    w = dual_value_direct(bsde, tree, 0, grid_points(_deterministic_axes(tree_dy)), [0.0], PolicySpace.DETERMINISTIC, np.array([0]), ctx.cap)
    nodal_tree = extract_nodal_set(w, 0, 0, 0.5 * tree_dy * tree_dy)
    h_tree = hausdorff(nodal_tree.points, reachable) if not nodal_tree.empty else float("inf")
    ctx.check(CheckResult.at_most("tree_nodal_equals_reachable", h_tree, 1e-9, detail=f"{reachable.shape[0]} reachable points on the grid"))
    ctx.store.write_csv("reachable.csv", ["y1", "y2"], reachable)


@router.experiment(ExperimentName.GEOMETRIC_DPP, "Theorem 4.5", "geometric DPP: epsilon-inclusions between nodal sets of consecutive times")
def geometric_dpp_experiment(ctx: RunContext) -> None:
    horizon = _deterministic_horizon(ctx)
    cases = [
        ("identity", identity_problem().to_bsde_problem(), ctx.config.horizon, [-1.0, 0.0, 1.0],
         lambda dy: [np.round(np.arange(-2.0, 2.0 + dy / 2, dy), 12)]),
        ("deterministic", deterministic_markovian(horizon).to_bsde_problem(), horizon, [0.0], _deterministic_axes),
    ]
    rows = []
    for name, problem, t_end, z_values, axes in cases:
        tree = ctx.tree(steps=DUAL_TREE_STEPS, mode=TreeMode.RECOMBINING, horizon=t_end, dim=1)
        for level_to in (1, 2):
            rhos = []
            for dy in GEOMETRIC_REFINEMENTS:
                points = grid_points(axes(dy))
                epsilon = ctx.config.epsilon or 10.0 * problem.value_dim * dy * dy / 4.0
                rep = check_geometric_dpp(problem, tree, epsilon, 0, level_to, points, z_values, 0, PolicySpace.ADAPTED, ctx.cap)
                rhos.append(rep.rho)
                rows.append((name, 0, level_to, dy, epsilon, rep.rho, rep.rho_bound, rep.inclusion_a, rep.inclusion_b, rep.nodal_size, rep.steerable_size))
                ctx.check(CheckResult.at_most(f"{name}_0_{level_to}_dy{dy:g}_inclusion_a", rep.rho, rep.rho_bound + 1e-12))
                ctx.check(CheckResult.holds(f"{name}_0_{level_to}_dy{dy:g}_inclusion_b", rep.inclusion_b, measured=rep.worst_b_slack))
            ctx.check(CheckResult.holds(f"{name}_0_{level_to}_rho_shrinks", rhos[1] <= rhos[0], measured=rhos[1]))
    ctx.store.write_csv(
        "geometric_dpp.csv",
        ["problem", "level_from", "level_to", "dy", "epsilon", "rho", "rho_bound", "inclusion_a", "inclusion_b", "nodal_size", "steerable_size"],
        rows,
    )
