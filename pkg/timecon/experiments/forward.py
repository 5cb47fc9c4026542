"""Forward value: DPP in the terminal variable, master equation residual, ill-posed z-free variant."""

import logging
import math

import numpy as np

from timecon.experiments.registry import ExperimentRouter, RunContext
from timecon.models import CheckResult, ExperimentName
from timecon.services import benchmarks as bm
from timecon.services import random_streams
from timecon.services.bsde import BSDEProblem, PolicySpace
from timecon.services.dynutil import random_pairs
from timecon.services.lattice import TreeMode
from timecon.services.master import (
    DPP_TOL,
    CylinderFunctional,
    check_forward_dpp,
    check_lipschitz,
    demo_problem,
    illposed_demo,
    master_residual,
    z_generator,
    zero_generator,
)

logger = logging.getLogger(__name__)

router = ExperimentRouter()

MAX_DPP_STEPS = 4
LIPSCHITZ_PAIRS = 100
LIPSCHITZ_LEVEL = 3
MASTER_RATE = 1.0
HALVING_BAND = (1.5, 3.0)


def dpp_problems(horizon: float):
    one_dim = bm.one_dimensional(horizon=horizon, controls=np.array([-1.0, 0.0, 1.0])).problem
    deterministic = bm.deterministic_example(horizon if horizon > 1 else 2.0).problem
    return [one_dim, deterministic]


@router.experiment(ExperimentName.FORWARD_DPP, "Lemma 6.1", "forward value: DPP in the terminal variable and Lipschitz bound")
def forward_dpp(ctx: RunContext) -> None:
    rows, lip_rows = [], []
    for problem in dpp_problems(ctx.config.horizon):
        horizon = ctx.config.horizon if problem.name != "deterministic" else max(ctx.config.horizon, 2.0)
        tree = ctx.tree(steps=min(ctx.config.steps, MAX_DPP_STEPS), mode=TreeMode.RECOMBINING, horizon=horizon, dim=1)
        n = tree.steps
        rng = random_streams.generator(ctx.seed, 31)
        for level_to in range(1, n + 1):
            eta = rng.normal(size=(tree.node_count(level_to), problem.value_dim))
            for level_from in range(level_to):
                rep = check_forward_dpp(problem, tree, level_from, level_to, eta, PolicySpace.ADAPTED, ctx.cap, fallback=True)
                rows.append((problem.name, level_from, level_to, rep.direct, rep.split, rep.residual, rep.segments, rep.heuristic))
                if not rep.heuristic:
                    ctx.check(CheckResult.at_most(f"{problem.name}_dpp_{level_from}_{level_to}", rep.residual, DPP_TOL))

        level = min(n, LIPSCHITZ_LEVEL)
        pairs = random_pairs((tree.node_count(level), problem.value_dim), LIPSCHITZ_PAIRS, ctx.seed)
        lip = check_lipschitz(problem, tree, level, pairs, PolicySpace.ADAPTED, ctx.cap)
        lip_rows.append((problem.name, level, lip.ratio, lip.bound, lip.tested, lip.skipped))
        ctx.check(CheckResult.at_most(f"{problem.name}_lipschitz", lip.ratio, lip.bound * (1 + 1e-9)))
    ctx.store.write_csv("forward_dpp.csv", ["problem", "level_from", "level_to", "direct", "split", "residual", "segments", "heuristic"], rows)
    ctx.store.write_csv("lipschitz.csv", ["problem", "level", "ratio", "bound", "tested", "skipped"], lip_rows)


def linear_problem(rate: float = MASTER_RATE) -> BSDEProblem:
    """Control-free f = rate * y, phi = id."""
    return BSDEProblem(
        value_dim=1,
        generator=lambda nodes, y, z, u: rate * y,
        terminal=lambda nodes: nodes.brownian[:, :1] ** 2,
        utility=lambda y: np.asarray(y)[..., 0],
        control_set=np.array([0.0]),
        lipschitz=abs(rate),
        name="linear",
    )


def squared_brownian() -> CylinderFunctional:
    """eta(t, omega) = omega_t^2 with its path derivatives."""
    return CylinderFunctional(
        value=lambda t, paths: paths[:, -1, 0] ** 2,
        d_t=lambda t, paths: np.zeros(paths.shape[0]),
        d_omega=lambda t, paths: 2.0 * paths[:, -1, :1],
        d_omega2=lambda t, paths: np.full(paths.shape[0], 2.0),
        markovian=True,
    )


def analytic_residual(rate: float, dt: float, level: int) -> float:
    """Exact tree residual of the linear case: -rate dt (1 + rate dt)^(k-1) (1 + rate t_k)."""
    return -rate * dt * (1 + rate * dt) ** (level - 1) * (1 + rate * level * dt)


@router.experiment(ExperimentName.MASTER_RESIDUAL, "Theorem 6.3", "master equation: residual of the forward value along a cylinder functional")
def master_residual_experiment(ctx: RunContext) -> None:
    problem, cyl = linear_problem(), squared_brownian()
    base = 4 if ctx.config.steps >= 4 else 2
    rows, residuals = [], []
    for n in (base, 2 * base, 4 * base):
        tree = ctx.tree(steps=n, mode=TreeMode.PATH, dim=1)
        level = n // 2
        res = master_residual(problem, tree, cyl, level)
        expected = analytic_residual(MASTER_RATE, tree.dt, level)
        residuals.append(abs(res.residual))
        rows.append((n, tree.dt, level, res.residual, expected, res.d_minus, res.drift_term, res.sup_term))
        ctx.check(CheckResult.at_most(f"residual_n{n}_matches_exact", abs(res.residual - expected), 1e-6 * (1 + abs(expected))))
    for coarse, fine, n in zip(residuals, residuals[1:], (base, 2 * base)):
        ratio = coarse / fine if fine > 0 else math.inf
        ctx.check(CheckResult.holds(f"halving_{n}_{2 * n}", HALVING_BAND[0] <= ratio <= HALVING_BAND[1], measured=ratio))
    ctx.store.write_csv("master_residual.csv", ["n", "dt", "level", "residual", "exact", "d_minus", "drift_term", "sup_term"], rows)


@router.experiment(ExperimentName.ILLPOSED_DEMO, "§6.1", "z-free master equation: same right side, different forward values")
def illposed_experiment(ctx: RunContext) -> None:
    tree = ctx.tree()
    report = illposed_demo(demo_problem(), tree, zero_generator, z_generator)
    horizon = tree.grid.horizon
    ctx.note(**report.to_dict())
    ctx.store.write_json("illposed.json", report.to_dict())
    ctx.check(CheckResult.holds("rhs_identical", report.rhs_identical))
    ctx.check(CheckResult.at_most("gap_equals_T", abs(report.gap - horizon), 1e-12 * (1 + horizon) * tree.steps))
    ctx.check(CheckResult.holds("witness", report.witness))
