"""Dynamic utilities Phi(t, node, y) and the checks built around them.

A dynamic utility starts from the static utility (Phi(0, ., y) = phi(y)) and is
time consistent when it satisfies the comparison principle: whenever
Phi(t2, eta) <= Phi(t2, eta~) node-wise, the best Phi(t1, Y_t1) reachable from
eta is dominated by the one reachable from eta~.

For linear phi(y) = a1 y1 + a2 y2 with linear generators the weights A1, A2 are
built from a truncated Riccati-type SDE for the ratio A_hat that switches
regime whenever |A_hat| reaches 2.
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from timecon.errors import ConfigError, DegenerateUtilityError, DomainError, EmptySetError, StructureError
from timecon.services import random_streams
from timecon.services.bsde import (
    BSDEProblem,
    PolicySpace,
    Utility,
    check_cap,
    cone_values,
    decode_policies,
)
from timecon.services.lattice import NodeBatch, ScenarioTree, TimeGrid, TreeMode

logger = logging.getLogger(__name__)

COMPARISON_TOL = 1e-10
LINEAR_COMPARISON_TOL = 1e-8
SWITCH_LEVEL = 2.0
OVERSHOOT_LIMIT = 0.1


class DynamicUtility(ABC):
    """Phi(level, nodes (M,), y (M, d')) -> (M,)."""

    @abstractmethod
    def __call__(self, level: int, nodes: np.ndarray, y: np.ndarray) -> np.ndarray:
        ...

    def initial_gap(self, utility: Utility, value_dim: int, seed: int = 0, probes: int = 64) -> float:
        """max |Phi(0, root, y) - phi(y)| over random probe points."""
        y = random_streams.generator(seed, 13).normal(scale=2.0, size=(probes, value_dim))
        own = np.asarray(self(0, np.zeros(probes, dtype=int), y), dtype=float).reshape(-1)
        return float(np.max(np.abs(own - np.asarray(utility(y), dtype=float).reshape(-1))))


class StaticUtility(DynamicUtility):
    """Phi(t, ., y) = phi(y) for every t."""

    def __init__(self, utility: Utility):
        self.utility = utility

    def __call__(self, level, nodes, y):
        return np.asarray(self.utility(y), dtype=float).reshape(-1)


class ProcessUtility(DynamicUtility):
    """Phi(t, node, y) = form(theta_t(node), y) for a node-indexed parameter process theta."""

    def __init__(self, process: Sequence[np.ndarray], form: Callable[[np.ndarray, np.ndarray], np.ndarray]):
        self.process = [np.asarray(p, dtype=float) for p in process]
        self.form = form

    def __call__(self, level, nodes, y):
        params = self.process[level][np.asarray(nodes)]
        return np.asarray(self.form(params, y), dtype=float).reshape(-1)


class LinearDynamicUtility(DynamicUtility):
    """Phi(t, node, y) = A_t(node) . y with node-indexed weights per level."""

    def __init__(self, weights: Sequence[np.ndarray]):
        self.weights = [np.asarray(w, dtype=float) for w in weights]

    def __call__(self, level, nodes, y):
        return np.sum(self.weights[level][np.asarray(nodes)] * y, axis=-1)


# Deterministic problems

def _deterministic_sweep(problem: BSDEProblem, tree: ScenarioTree, level: int, y: np.ndarray, digits: np.ndarray) -> np.ndarray:
    """Y_0 for terminal value y at `level` under deterministic controls, Z = 0: (P, G, d')."""
    dv = problem.value_dim
    n_pol, n_pts = digits.shape[0], y.shape[0]
    cur = np.broadcast_to(y[None], (n_pol, n_pts, dv)).copy()
    zero = np.zeros((n_pol * n_pts, dv, tree.dim))
    for j in range(level - 1, -1, -1):
        u = problem.control_set[np.repeat(digits[:, j], n_pts)]
        nodes = tree.nodes(j, np.zeros(n_pol * n_pts, dtype=int))
        f = np.asarray(problem.generator(nodes, cur.reshape(-1, dv), zero, u), dtype=float)
        cur = cur + f.reshape(n_pol, n_pts, dv) * tree.dt
    return cur


def deterministic_phi(problem: BSDEProblem, tree: ScenarioTree, level: int, y: np.ndarray, cap: Optional[int] = None) -> np.ndarray:
    """Phi(t, y) = max over deterministic controls on [0, t] of phi(Y^{t,y,u}_0), one value per row of y."""
    y = np.asarray(y, dtype=float).reshape(-1, problem.value_dim)
    tree.check_level(level)
    total = problem.n_controls**level
    check_cap(total, cap)
    digits = decode_policies(np.arange(total), level, problem.n_controls)
    y0 = _deterministic_sweep(problem, tree, level, y, digits)
    values = np.asarray(problem.utility(y0.reshape(-1, problem.value_dim)), dtype=float)
    return np.max(values.reshape(total, y.shape[0]), axis=0)


class DeterministicUtility(DynamicUtility):
    def __init__(self, problem: BSDEProblem, tree: ScenarioTree, cap: Optional[int] = None):
        self.problem, self.tree, self.cap = problem, tree, cap

    def __call__(self, level, nodes, y):
        return deterministic_phi(self.problem, self.tree, level, y, self.cap)


# Comparison principle

@dataclass
class ComparisonReport:
    level_from: int
    level_to: int
    tested: int
    skipped: int
    violations: List[dict] = field(default_factory=list)
    worst_slack: float = -math.inf

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "level_from": self.level_from,
            "level_to": self.level_to,
            "tested": self.tested,
            "skipped": self.skipped,
            "violations": self.violations,
            "worst_slack": self.worst_slack,
        }


def _best_phi(utility: DynamicUtility, problem: BSDEProblem, tree: ScenarioTree, t1: int, t2: int, eta: np.ndarray, space, cap) -> np.ndarray:
    values = cone_values(problem, tree, t1, t2 - t1, eta, space, cap)
    n_pol, n_nodes, dv = values.shape
    nodes = np.tile(np.arange(n_nodes), n_pol)
    phi = np.asarray(utility(t1, nodes, values.reshape(-1, dv)), dtype=float).reshape(n_pol, n_nodes)
    return np.max(phi, axis=0)


def check_comparison(
    utility: DynamicUtility,
    problem: BSDEProblem,
    tree: ScenarioTree,
    level_from: int,
    level_to: int,
    pairs: Sequence[Tuple[np.ndarray, np.ndarray]],
    space: PolicySpace = PolicySpace.ADAPTED,
    cap: Optional[int] = None,
    tol: float = COMPARISON_TOL,
) -> ComparisonReport:
    """Test the comparison principle on pairs (eta, eta~) of level-`level_to` variables."""
    if not 0 <= level_from < level_to <= tree.steps:
        raise DomainError(f"need 0 <= t1 < t2 <= n, got {level_from}, {level_to}")
    report = ComparisonReport(level_from, level_to, 0, 0)
    n_to = tree.node_count(level_to)
    nodes_to = np.arange(n_to)
    for i, (eta, eta_t) in enumerate(pairs):
        eta = np.asarray(eta, dtype=float).reshape(n_to, problem.value_dim)
        eta_t = np.asarray(eta_t, dtype=float).reshape(n_to, problem.value_dim)
        if np.any(utility(level_to, nodes_to, eta) > utility(level_to, nodes_to, eta_t) + tol):
            report.skipped += 1
            continue
        report.tested += 1
        lhs = _best_phi(utility, problem, tree, level_from, level_to, eta, space, cap)
        rhs = _best_phi(utility, problem, tree, level_from, level_to, eta_t, space, cap)
        slack = lhs - rhs
        report.worst_slack = max(report.worst_slack, float(np.max(slack)))
        for node in np.flatnonzero(slack > tol):
            report.violations.append({"pair": i, "node": int(node), "lhs": float(lhs[node]), "rhs": float(rhs[node]), "slack": float(slack[node])})
    if report.skipped:
        logger.info("Comparison check skipped %d pairs failing the premise", report.skipped)
    if report.violations:
        logger.warning("Comparison principle violated on %d (pair, node) cases, worst slack %.3g", len(report.violations), report.worst_slack)
    return report


def random_pairs(shape: Tuple[int, ...], count: int, seed: int, scale: float = 1.0) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Seeded (eta, eta~) pairs with independent Gaussian entries; premise filtering is left to the check."""
    rng = random_streams.generator(seed, 17)
    return [(rng.normal(scale=scale, size=shape), rng.normal(scale=scale, size=shape)) for _ in range(count)]


def select_maximizer(utility: DynamicUtility, level: int, node: int, candidates: np.ndarray, tol: float = COMPARISON_TOL) -> np.ndarray:
    """Lexicographically largest candidate among those within tol of the max of Phi(level, node, .)."""
    candidates = np.asarray(candidates, dtype=float)
    if candidates.size == 0:
        raise EmptySetError(f"no candidate values at level {level}, node {node}")
    candidates = candidates.reshape(candidates.shape[0], -1)
    values = np.asarray(utility(level, np.full(candidates.shape[0], node), candidates), dtype=float).reshape(-1)
    tied = candidates[values >= np.max(values) - tol]
    return tied[np.lexsort(tied.T[::-1])[-1]]


def maximizer_process(utility: DynamicUtility, level: int, candidate_sets: Sequence[np.ndarray]) -> np.ndarray:
    """Y_bar at every node of a level from per-node candidate sets."""
    return np.stack([select_maximizer(utility, level, i, pts) for i, pts in enumerate(candidate_sets)])


# Linear construction

Coefficient = Union[np.ndarray, Callable[[float, np.ndarray], np.ndarray]]


@dataclass
class LinearUtilityCoeffs:
    """f_i = sum_j alpha^{ij} y_j + beta^{ij} . z_j + c_i(nodes, u), phi(y) = a1 y1 + a2 y2.

    alpha is (2, 2) and beta (2, 2, d), or callables of (t, B (M, d)) returning
    (M, 2, 2) and (M, 2, 2, d).
    """

    alpha: Coefficient
    beta: Coefficient
    a1: float
    a2: float
    cost: Optional[Callable[[NodeBatch, np.ndarray], np.ndarray]] = None
    dim: int = 1

    def alpha_at(self, t: float, b: np.ndarray) -> np.ndarray:
        if callable(self.alpha):
            return np.asarray(self.alpha(t, b), dtype=float).reshape(-1, 2, 2)
        return np.broadcast_to(np.asarray(self.alpha, dtype=float), (b.shape[0], 2, 2))

    def beta_at(self, t: float, b: np.ndarray) -> np.ndarray:
        if callable(self.beta):
            return np.asarray(self.beta(t, b), dtype=float).reshape(-1, 2, 2, self.dim)
        return np.broadcast_to(np.asarray(self.beta, dtype=float).reshape(2, 2, self.dim), (b.shape[0], 2, 2, self.dim))

    def costs(self, nodes: NodeBatch, u: np.ndarray) -> np.ndarray:
        if self.cost is None:
            return np.zeros((len(nodes), 2))
        return np.asarray(self.cost(nodes, u), dtype=float).reshape(len(nodes), 2)


def hat_coefficients(alpha: np.ndarray, beta: np.ndarray, x: np.ndarray, swap: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Drift b_hat (M,) and diffusion sigma_hat (M, d) of the weight ratio; swap exchanges the roles of 1 and 2."""
    if swap:
        alpha = alpha[:, ::-1, ::-1]
        beta = beta[:, ::-1, ::-1]
    a11, a12, a21, a22 = alpha[:, 0, 0], alpha[:, 0, 1], alpha[:, 1, 0], alpha[:, 1, 1]
    b11, b12, b21, b22 = beta[:, 0, 0], beta[:, 0, 1], beta[:, 1, 0], beta[:, 1, 1]

    def dot(p, q):
        return np.sum(p * q, axis=-1)

    drift = (
        dot(b12, b12) * x**3
        - (a12 + dot(b12, b11 - b22) - dot(b12, b22)) * x**2
        + (a11 - a22 - dot(b22, b11 - b22) - dot(b12, b21)) * x
        + (a21 - dot(b21, b22))
    )
    diffusion = -b12 * (x**2)[:, None] + (b11 - b22) * x[:, None] + b21
    return drift, diffusion


@dataclass
class SwitchingPath:
    times: np.ndarray
    hat: np.ndarray
    regime: np.ndarray
    weights: np.ndarray
    is_switch: np.ndarray

    @property
    def switch_times(self) -> np.ndarray:
        return self.times[self.is_switch]

    def rows(self) -> List[dict]:
        return [
            {"t": float(t), "A_hat": float(h), "regime": int(r), "A1": float(w[0]), "A2": float(w[1]), "is_switch": bool(s)}
            for t, h, r, w, s in zip(self.times, self.hat, self.regime, self.weights, self.is_switch)
        ]


@dataclass
class SwitchingEnsemble:
    """Paths of (A_hat, regime, A1, A2); regime 1 is the odd (A1-ratio) regime, 2 the even one."""

    times: np.ndarray
    hat: np.ndarray
    regime: np.ndarray
    weights: np.ndarray
    is_switch: np.ndarray
    max_overshoot: float = 0.0

    @property
    def n_paths(self) -> int:
        return self.hat.shape[0]

    def path(self, i: int) -> SwitchingPath:
        return SwitchingPath(self.times, self.hat[i], self.regime[i], self.weights[i], self.is_switch[i])

    def switch_counts(self) -> np.ndarray:
        """Switches strictly before the horizon, per path."""
        return np.sum(self.is_switch[:, :-1], axis=1)

    def tau(self, n: int) -> np.ndarray:
        """Time of the n-th switch (horizon if fewer than n happen before it)."""
        horizon = self.times[-1]
        out = np.full(self.n_paths, horizon)
        cum = np.cumsum(self.is_switch[:, :-1], axis=1)
        for i in range(self.n_paths):
            hits = np.flatnonzero(cum[i] >= n)
            if hits.size:
                out[i] = self.times[hits[0]]
        return out


@dataclass
class _State:
    hat: np.ndarray
    odd: np.ndarray
    anchor: np.ndarray

    def weights(self) -> np.ndarray:
        moving = self.anchor * self.hat
        return np.where(self.odd[:, None], np.stack([moving, self.anchor], axis=1), np.stack([self.anchor, moving], axis=1))

    def take(self, idx: np.ndarray) -> "_State":
        return _State(self.hat[idx], self.odd[idx], self.anchor[idx])


def _initial_state(coeffs: LinearUtilityCoeffs, size: int) -> _State:
    a1, a2 = float(coeffs.a1), float(coeffs.a2)
    if a1 == 0.0 and a2 == 0.0:
        raise DegenerateUtilityError("a1 = a2 = 0: phi vanishes and V_0 = 0")
    if abs(a1) <= abs(a2):
        hat, odd, anchor = a1 / a2, True, a2
    else:
        hat, odd, anchor = a2 / a1, False, a1
    return _State(np.full(size, hat), np.full(size, odd), np.full(size, anchor))


def _advance(coeffs: LinearUtilityCoeffs, t: float, b: np.ndarray, state: _State, dt: float, db: np.ndarray, switching: bool = True) -> Tuple[_State, np.ndarray]:
    alpha, beta = coeffs.alpha_at(t, b), coeffs.beta_at(t, b)
    x = np.clip(state.hat, -SWITCH_LEVEL, SWITCH_LEVEL)
    drift1, diff1 = hat_coefficients(alpha, beta, x)
    drift2, diff2 = hat_coefficients(alpha, beta, x, swap=True)
    drift = np.where(state.odd, drift1, drift2)
    diffusion = np.where(state.odd[:, None], diff1, diff2)
    hat = state.hat + drift * dt + np.sum(diffusion * db, axis=1)
    if not switching:
        return _State(hat, state.odd, state.anchor), np.zeros(hat.size, dtype=bool)
    switched = np.abs(hat) >= SWITCH_LEVEL
    anchor = np.where(switched, state.anchor * hat, state.anchor)
    with np.errstate(divide="ignore"):
        hat = np.where(switched, 1.0 / np.where(switched, hat, 1.0), hat)
    odd = np.where(switched, ~state.odd, state.odd)
    return _State(hat, odd, anchor), switched


def overshoot_bound(coeffs: LinearUtilityCoeffs, grid: TimeGrid, probes: int = 41) -> float:
    """max|b_hat| dt + 6 max|sigma_hat| sqrt(dt) over |x| <= 2, both regimes, sampled (t, B)."""
    x = np.linspace(-SWITCH_LEVEL, SWITCH_LEVEL, probes)
    spread = 3.0 * math.sqrt(grid.horizon)
    b_probe = np.linspace(-spread, spread, 7)[:, None] * np.ones((1, coeffs.dim))
    worst_b = worst_s = 0.0
    for t in np.linspace(0.0, grid.horizon, 5):
        for b in b_probe:
            rows = np.repeat(b[None], probes, axis=0)
            alpha, beta = coeffs.alpha_at(float(t), rows), coeffs.beta_at(float(t), rows)
            for swap in (False, True):
                drift, diffusion = hat_coefficients(alpha, beta, x, swap)
                worst_b = max(worst_b, float(np.max(np.abs(drift))))
                worst_s = max(worst_s, float(np.max(np.linalg.norm(diffusion, axis=1))))
    return worst_b * grid.dt + 6.0 * worst_s * grid.sqrt_dt


def check_overshoot(coeffs: LinearUtilityCoeffs, grid: TimeGrid) -> float:
    slack = overshoot_bound(coeffs, grid)
    if slack > OVERSHOOT_LIMIT:
        raise ConfigError(f"Euler step too coarse for switching: overshoot slack {slack:.3g} > {OVERSHOOT_LIMIT}; increase the step count")
    return slack


def _ensemble(coeffs: LinearUtilityCoeffs, grid: TimeGrid, brownian: np.ndarray, increments: np.ndarray, state: _State, switching: bool = True) -> SwitchingEnsemble:
    n_paths, n_steps = increments.shape[0], increments.shape[1]
    hat = np.empty((n_paths, n_steps + 1))
    regime = np.empty((n_paths, n_steps + 1), dtype=int)
    weights = np.empty((n_paths, n_steps + 1, 2))
    is_switch = np.zeros((n_paths, n_steps + 1), dtype=bool)
    hat[:, 0], regime[:, 0], weights[:, 0] = state.hat, np.where(state.odd, 1, 2), state.weights()
    overshoot = 0.0
    for k in range(n_steps):
        state, switched = _advance(coeffs, grid.time(k), brownian[:, k], state, grid.dt, increments[:, k], switching)
        if np.any(switched):
            overshoot = max(overshoot, float(np.max(1.0 / np.abs(state.hat[switched]))) - SWITCH_LEVEL)
        hat[:, k + 1], regime[:, k + 1], weights[:, k + 1] = state.hat, np.where(state.odd, 1, 2), state.weights()
        is_switch[:, k + 1] = switched
    return SwitchingEnsemble(grid.times, hat, regime, weights, is_switch, overshoot)


def simulate_switching(coeffs: LinearUtilityCoeffs, grid: TimeGrid, n_paths: int, seed: int) -> SwitchingEnsemble:
    """Euler realisation of the switching construction on Philox Gaussian increments."""
    check_overshoot(coeffs, grid)
    increments = random_streams.gaussian_increments(seed, n_paths, grid.steps, grid.dt, coeffs.dim)
    brownian = np.concatenate([np.zeros((n_paths, 1, coeffs.dim)), np.cumsum(increments, axis=1)], axis=1)
    ensemble = _ensemble(coeffs, grid, brownian, increments, _initial_state(coeffs, n_paths))
    logger.info("Simulated %d switching paths: mean switches %.3f, max overshoot %.3g", n_paths, float(np.mean(ensemble.switch_counts())), ensemble.max_overshoot)
    return ensemble


def tree_switching(coeffs: LinearUtilityCoeffs, tree: ScenarioTree) -> SwitchingEnsemble:
    """Switching construction along every path of a path-mode tree; one ensemble row per leaf."""
    if tree.mode is not TreeMode.PATH:
        raise DomainError("the switching weights are path dependent; build the tree with mode='path'")
    if tree.dim != coeffs.dim:
        raise DomainError(f"coefficients are for d = {coeffs.dim}, tree has d = {tree.dim}")
    check_overshoot(coeffs, tree.grid)
    paths = tree.paths(tree.steps)
    increments = np.diff(paths, axis=1)
    return _ensemble(coeffs, tree.grid, paths, increments, _initial_state(coeffs, paths.shape[0]))


def _level_view(tree: ScenarioTree, ensemble: SwitchingEnsemble, values: np.ndarray, level: int) -> np.ndarray:
    """Leaf-indexed path data at `level` -> node-indexed (first leaf below each node)."""
    width = tree.branching ** (tree.steps - level)
    return values[::width, level]


@dataclass
class LinearUtility:
    utility: Optional[LinearDynamicUtility]
    ensemble: SwitchingEnsemble
    hat: Optional[List[np.ndarray]] = None
    regime: Optional[List[np.ndarray]] = None


def build_linear_utility(
    coeffs: LinearUtilityCoeffs,
    tree: Optional[ScenarioTree] = None,
    grid: Optional[TimeGrid] = None,
    n_paths: int = 0,
    seed: int = 0,
) -> LinearUtility:
    """Tree realisation (gives Phi on nodes) or, without a tree, an Euler ensemble of switching paths."""
    if tree is not None:
        ensemble = tree_switching(coeffs, tree)
        levels = range(tree.steps + 1)
        weights = [_level_view(tree, ensemble, ensemble.weights, k) for k in levels]
        return LinearUtility(
            LinearDynamicUtility(weights),
            ensemble,
            hat=[_level_view(tree, ensemble, ensemble.hat, k) for k in levels],
            regime=[_level_view(tree, ensemble, ensemble.regime, k) for k in levels],
        )
    if grid is None or n_paths < 1:
        raise DomainError("an Euler realisation needs a time grid and a positive path count")
    return LinearUtility(None, simulate_switching(coeffs, grid, n_paths, seed))


# Probability of many switches

@dataclass
class TauBoundRow:
    n: int
    frequency: float
    std_error: float
    bound: float
    vacuous: bool
    ok: bool


@dataclass
class TauBoundReport:
    c_fitted: float
    delta: float
    m: int
    n_paths: int
    rows: List[TauBoundRow]
    one_step: List[dict]
    seed: int

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.rows) and all(s["ok"] for s in self.one_step)


PILOT_STARTS = (-1.0, -0.5, 0.0, 0.5, 1.0)


def fit_moment_constant(coeffs: LinearUtilityCoeffs, grid: TimeGrid, n_paths: int, seed: int) -> float:
    """2 * max_t E[sup_{s<=t} |A_hat_s - A_hat_0|^2] / t over both regimes and a spread of starts."""
    increments = random_streams.gaussian_increments(seed, n_paths, grid.steps, grid.dt, coeffs.dim)
    brownian = np.concatenate([np.zeros((n_paths, 1, coeffs.dim)), np.cumsum(increments, axis=1)], axis=1)
    worst = 0.0
    for odd in (True, False):
        for start in PILOT_STARTS:
            state = _State(np.full(n_paths, start), np.full(n_paths, odd), np.ones(n_paths))
            ens = _ensemble(coeffs, grid, brownian, increments, state, switching=False)
            running = np.maximum.accumulate((ens.hat - start) ** 2, axis=1)
            ratio = np.mean(running[:, 1:], axis=0) / grid.times[1:]
            worst = max(worst, float(np.max(ratio)))
    return 2.0 * worst


def verify_tau_bound(coeffs: LinearUtilityCoeffs, grid: TimeGrid, n_max: int = 6, n_paths: int = 10_000, seed: int = 0) -> TauBoundReport:
    """Empirical P(tau_n < T) against min(1, (2n)^m / 2^n) with delta = 1/(2C)."""
    if n_paths < 1:
        raise DomainError("need at least one path")
    pilot = max(256, n_paths // 10)
    c_fit = fit_moment_constant(coeffs, grid, pilot, seed + 1)
    delta = math.inf if c_fit == 0 else 1.0 / (2.0 * c_fit)
    m = 0 if math.isinf(delta) else max(0, math.ceil(grid.horizon / delta) - 1)
    ensemble = simulate_switching(coeffs, grid, n_paths, seed)
    counts = ensemble.switch_counts()

    rows = []
    for n in range(1, n_max + 1):
        freq = float(np.mean(counts >= n))
        se = math.sqrt(freq * (1 - freq) / n_paths)
        bound = min(1.0, (2 * n) ** m / 2**n)
        rows.append(TauBoundRow(n, freq, se, bound, vacuous=bound >= 1.0, ok=freq <= bound + 3 * se))

    one_step = []
    previous = np.zeros(n_paths)
    for k in range(n_max):
        current = ensemble.tau(k + 1)
        alive = previous < grid.horizon if k else np.ones(n_paths, dtype=bool)
        if not np.any(alive):
            break
        hit = (current[alive] < grid.horizon) & (current[alive] <= previous[alive] + delta)
        freq = float(np.mean(hit))
        se = math.sqrt(freq * (1 - freq) / int(np.sum(alive)))
        one_step.append({"k": k, "paths": int(np.sum(alive)), "frequency": freq, "std_error": se, "ok": freq <= 0.5 + 3 * se})
        previous = current
    report = TauBoundReport(c_fit, delta, m, n_paths, rows, one_step, seed)
    for row in rows:
        if not row.ok:
            logger.warning("P(tau_%d < T) = %.4f exceeds bound %.4f (seed %d)", row.n, row.frequency, row.bound, seed)
    return report


# Linear problems and their reduced scalar BSDE

def linear_problem(coeffs: LinearUtilityCoeffs, terminal, control_set, name: str = "linear") -> BSDEProblem:
    """f_i = sum_j alpha^{ij} y_j + beta^{ij} . z_j + c_i(u), phi(y) = a1 y1 + a2 y2."""
    weights = np.array([coeffs.a1, coeffs.a2], dtype=float)

    def generator(nodes: NodeBatch, y, z, u):
        alpha = coeffs.alpha_at(nodes.time, nodes.brownian)
        beta = coeffs.beta_at(nodes.time, nodes.brownian)
        return np.einsum("mij,mj->mi", alpha, y) + np.einsum("mijd,mjd->mi", beta, z) + coeffs.costs(nodes, u)

    probe = np.zeros((1, coeffs.dim))
    bound = float(np.max(np.abs(coeffs.alpha_at(0.0, probe))) + np.max(np.abs(coeffs.beta_at(0.0, probe)))) * 2.0
    return BSDEProblem(
        value_dim=2,
        generator=generator,
        terminal=terminal,
        utility=lambda y: np.asarray(y) @ weights,
        control_set=control_set,
        lipschitz=bound,
        utility_lipschitz=float(np.linalg.norm(weights)),
        name=name,
    )


def _check_linearity(coeffs: LinearUtilityCoeffs, problem: BSDEProblem, tree: ScenarioTree, seed: int = 0, probes: int = 32) -> None:
    rng = random_streams.generator(seed, 19)
    for level in range(tree.steps):
        nodes = tree.nodes(level, rng.integers(0, tree.node_count(level), size=probes))
        u = problem.control_set[rng.integers(0, problem.n_controls, size=probes)]
        y = rng.normal(size=(probes, 2))
        z = rng.normal(size=(probes, 2, tree.dim))
        base = np.asarray(problem.generator(nodes, np.zeros_like(y), np.zeros_like(z), u), dtype=float)
        full = np.asarray(problem.generator(nodes, y, z, u), dtype=float)
        alpha = coeffs.alpha_at(nodes.time, nodes.brownian)
        beta = coeffs.beta_at(nodes.time, nodes.brownian)
        expected = base + np.einsum("mij,mj->mi", alpha, y) + np.einsum("mijd,mjd->mi", beta, z)
        if np.max(np.abs(full - expected)) > 1e-9 * (1 + np.max(np.abs(full))):
            raise StructureError(f"generator of '{problem.name}' is not the declared linear form at level {level}")


def reduced_problem(coeffs: LinearUtilityCoeffs, problem: BSDEProblem, linear: LinearUtility) -> BSDEProblem:
    """Scalar BSDE for Y_hat = A1 Y1 + A2 Y2 with alpha_hat, beta_hat read off the active regime."""
    hats, regimes, weights = linear.hat, linear.regime, linear.utility.weights

    def generator(nodes: NodeBatch, y, z, u):
        idx = nodes.index.reshape(-1)
        hat, odd = hats[nodes.level][idx], regimes[nodes.level][idx] == 1
        alpha = coeffs.alpha_at(nodes.time, nodes.brownian)
        beta = coeffs.beta_at(nodes.time, nodes.brownian)
        a_hat = np.where(odd, alpha[:, 0, 1] * hat + alpha[:, 1, 1], alpha[:, 1, 0] * hat + alpha[:, 0, 0])
        b_hat = np.where(odd[:, None], beta[:, 0, 1] * hat[:, None] + beta[:, 1, 1], beta[:, 1, 0] * hat[:, None] + beta[:, 0, 0])
        drive = np.sum(weights[nodes.level][idx] * coeffs.costs(nodes, u), axis=1)
        return (a_hat * y[:, 0] + np.sum(b_hat * z[:, 0, :], axis=1) + drive)[:, None]

    return BSDEProblem(
        value_dim=1,
        generator=generator,
        terminal=lambda nodes: np.zeros(len(nodes)),
        utility=lambda y: np.asarray(y)[..., 0],
        control_set=problem.control_set,
        name=f"{problem.name}-reduced",
    )


def aligned_pairs(weights: np.ndarray, base: np.ndarray, count: int, seed: int, scale: float = 1.0) -> List[Tuple[np.ndarray, np.ndarray]]:
    """(xi, xi + s A/|A|^2 + r A_perp) with s >= 0, so A . xi <= A . xi~ node-wise."""
    rng = random_streams.generator(seed, 23)
    weights = np.asarray(weights, dtype=float)
    norm2 = np.sum(weights**2, axis=1, keepdims=True)
    safe = np.where(norm2 > 0, norm2, 1.0)
    perp = np.stack([-weights[:, 1], weights[:, 0]], axis=1)
    pairs = []
    for _ in range(count):
        s = rng.uniform(0, scale, size=(weights.shape[0], 1))
        r = rng.normal(scale=scale, size=(weights.shape[0], 1))
        pairs.append((base, base + np.where(norm2 > 0, s * weights / safe, 0.0) + r * perp))
    logger.debug("Generated %d aligned comparison pairs (seed %d)", count, seed)
    return pairs


@dataclass
class LinearComparisonReport:
    tested: int
    skipped: int
    per_policy_violations: int
    max_violations: int
    worst_slack: float
    reduction_gap: float
    comparison: Optional[ComparisonReport] = None

    @property
    def ok(self) -> bool:
        return self.per_policy_violations == 0 and self.max_violations == 0


def check_linear_comparison(
    coeffs: LinearUtilityCoeffs,
    problem: BSDEProblem,
    tree: ScenarioTree,
    pairs: Sequence[Tuple[np.ndarray, np.ndarray]],
    space: PolicySpace = PolicySpace.ADAPTED,
    cap: Optional[int] = None,
    tol: float = LINEAR_COMPARISON_TOL,
) -> LinearComparisonReport:
    """Per-policy comparison of the reduced scalar BSDE at every level, then the max-over-policies check."""
    _check_linearity(coeffs, problem, tree)
    linear = build_linear_utility(coeffs, tree)
    reduced = reduced_problem(coeffs, problem, linear)
    n = tree.steps
    a_final = linear.utility.weights[n]
    tested = skipped = per_policy = max_violations = 0
    worst = -math.inf
    accepted = []
    for xi, xi_t in pairs:
        xi, xi_t = np.asarray(xi, dtype=float), np.asarray(xi_t, dtype=float)
        lo, hi = np.sum(a_final * xi, axis=1), np.sum(a_final * xi_t, axis=1)
        if np.any(lo > hi + 1e-12):
            skipped += 1
            continue
        tested += 1
        accepted.append((xi, xi_t))
        for t in range(n):
            left = cone_values(reduced, tree, t, n - t, lo[:, None], space, cap)[..., 0]
            right = cone_values(reduced, tree, t, n - t, hi[:, None], space, cap)[..., 0]
            slack = left - right
            worst = max(worst, float(np.max(slack)))
            per_policy += int(np.sum(slack > tol))
            max_violations += int(np.sum(np.max(left, axis=0) > np.max(right, axis=0) + tol))

    gap = 0.0
    if accepted:
        xi = accepted[0][0]
        full = cone_values(problem, tree, 0, n, xi, space, cap)[:, 0, :]
        scalar = cone_values(reduced, tree, 0, n, np.sum(a_final * xi, axis=1)[:, None], space, cap)[:, 0, 0]
        gap = float(np.max(np.abs(full @ linear.utility.weights[0][0] - scalar)))

    comparison = check_comparison(linear.utility, problem, tree, 0, n, accepted, space, cap, tol) if accepted else None
    report = LinearComparisonReport(
        tested=tested,
        skipped=skipped,
        per_policy_violations=per_policy,
        max_violations=max_violations,
        worst_slack=worst,
        reduction_gap=gap,
        comparison=comparison,
    )
    logger.info("Linear comparison: %d pairs, %d per-policy violations, reduction gap %.3g", tested, per_policy, gap)
    return report
