"""Forward value Psi(t, eta) = max_u phi(Y^u_0(t, eta)) and its master equation.

Psi is evaluated by enumerating policies on [0, t].  The master equation links
its left time derivative, its derivative in eta (identified with a node-indexed
random variable through per-node bumps) and the generator; residuals are
reported component by component.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from timecon.errors import DomainError, InvalidCylinderError, SizeError, StructureError, TreeModeError
from timecon.services import random_streams
from timecon.services.bsde import (
    BSDEProblem,
    ConeOptimum,
    Generator,
    PolicySpace,
    check_cap,
    cone_sweep,
    controls_from_digits,
    decode_policies,
    optimize_cone,
    policy_count,
)
from timecon.services.lattice import NodeBatch, ScenarioTree, TreeMode, TreeRandomVariable, tree_norm
from timecon.settings import get_settings

logger = logging.getLogger(__name__)

DPP_TOL = 1e-12
BUMP_SCALE = 1e-4
LIPSCHITZ_GROWTH = 2.0


def _as_values(problem: BSDEProblem, tree: ScenarioTree, level: int, eta) -> np.ndarray:
    values = eta.values if isinstance(eta, TreeRandomVariable) else eta
    if isinstance(eta, TreeRandomVariable) and eta.level != level:
        raise DomainError(f"eta lives at level {eta.level}, expected {level}")
    values = np.asarray(values, dtype=float)
    if values.size == problem.value_dim and tree.node_count(level) > 1:
        values = np.broadcast_to(values.reshape(1, -1), (tree.node_count(level), problem.value_dim))
    return values.reshape(tree.node_count(level), problem.value_dim)


@dataclass
class ForwardValue:
    """Psi(level, eta) for one problem on one tree with fixed enumeration settings."""

    problem: BSDEProblem
    tree: ScenarioTree
    space: PolicySpace = PolicySpace.ADAPTED
    cap: Optional[int] = None
    fallback: bool = False
    workers: int = 1

    def optimum(self, level: int, eta) -> ConeOptimum:
        values = _as_values(self.problem, self.tree, level, eta)
        return optimize_cone(self.problem, self.tree, 0, 0, level, values, self.space, self.cap, self.fallback, self.workers)

    def __call__(self, level: int, eta) -> float:
        return self.optimum(level, eta).value


def forward_value(
    problem: BSDEProblem,
    tree: ScenarioTree,
    level: int,
    eta,
    space: PolicySpace = PolicySpace.ADAPTED,
    cap: Optional[int] = None,
    fallback: bool = False,
) -> float:
    return ForwardValue(problem, tree, space, cap, fallback)(level, eta)


# Forward DPP

@dataclass
class ForwardDPPReport:
    level_from: int
    level_to: int
    direct: float
    split: float
    residual: float
    segments: int
    heuristic: bool

    @property
    def ok(self) -> bool:
        return self.heuristic or self.residual <= DPP_TOL


def segment_values(
    problem: BSDEProblem,
    tree: ScenarioTree,
    level_from: int,
    level_to: int,
    eta: np.ndarray,
    space: PolicySpace = PolicySpace.ADAPTED,
    cap: Optional[int] = None,
) -> np.ndarray:
    """Distinct Y_{t1}(t2, eta) over node-indexed policies on [t1, t2): (S, N_t1, d')."""
    depth = level_to - level_from
    if PolicySpace(space) is PolicySpace.DETERMINISTIC:
        widths = [1] * depth
    else:
        widths = [tree.node_count(level_from + r) for r in range(depth)]
    total = policy_count(problem.n_controls, widths)
    check_cap(total, cap, "segment policies")
    digits = decode_policies(np.arange(total), sum(widths), problem.n_controls)
    controls = []
    for r, c in enumerate(controls_from_digits(digits, widths)):
        c = c[:, 0, :]
        if c.shape[1] == 1:
            controls.append(c[:, :, None])
        else:
            controls.append(c[:, tree.descendants(level_from, r)])
    y = cone_sweep(problem, tree, level_from, depth, eta, controls).y
    flat = np.ascontiguousarray(y.reshape(total, -1))
    _, first = np.unique(flat, axis=0, return_index=True)
    return y[np.sort(first)]


def check_forward_dpp(
    problem: BSDEProblem,
    tree: ScenarioTree,
    level_from: int,
    level_to: int,
    eta,
    space: PolicySpace = PolicySpace.ADAPTED,
    cap: Optional[int] = None,
    fallback: bool = False,
) -> ForwardDPPReport:
    """|Psi(t2, eta) - max over [t1, t2) policies of Psi(t1, Y_t1(t2, eta))|."""
    if not 0 <= level_from <= level_to <= tree.steps:
        raise DomainError(f"need 0 <= t1 <= t2 <= n, got {level_from}, {level_to}")
    values = _as_values(problem, tree, level_to, eta)
    psi = ForwardValue(problem, tree, space, cap, fallback)
    direct = psi.optimum(level_to, values)
    if level_from == level_to:
        return ForwardDPPReport(level_from, level_to, direct.value, direct.value, 0.0, 1, direct.heuristic)

    limit = get_settings().policy_cap if cap is None else cap
    try:
        segments = segment_values(problem, tree, level_from, level_to, values, space, cap)
        split = max(psi(level_from, seg) for seg in segments)
        count = segments.shape[0]
        heuristic = direct.heuristic
    except SizeError:
        if not fallback:
            raise
        logger.warning("Segment enumeration above cap %d: splitting the heuristic optimum instead", limit)
        tail = [np.asarray(c, dtype=int) for c in direct.controls[level_from:level_to]]
        controls = []
        for r, c in enumerate(tail):
            controls.append(c.reshape(1, 1, 1) if c.size == 1 else c[tree.descendants(level_from, r)][None])
        y_from = cone_sweep(problem, tree, level_from, level_to - level_from, values, controls).y[0]
        split = psi(level_from, y_from)
        count, heuristic = 1, True
    report = ForwardDPPReport(level_from, level_to, direct.value, split, abs(direct.value - split), count, heuristic)
    logger.info("Forward DPP %d->%d: residual %.3g over %d segment values", level_from, level_to, report.residual, count)
    return report


# Lipschitz continuity in eta

@dataclass
class LipschitzReport:
    level: int
    ratio: float
    bound: float
    tested: int
    skipped: int

    @property
    def holds(self) -> bool:
        return self.ratio <= self.bound * (1 + 1e-9)


def lipschitz_bound(problem: BSDEProblem, horizon: float) -> float:
    return math.exp(LIPSCHITZ_GROWTH * problem.lipschitz * horizon) * problem.utility_lipschitz


def check_lipschitz(
    problem: BSDEProblem,
    tree: ScenarioTree,
    level: int,
    pairs: Sequence[Tuple[np.ndarray, np.ndarray]],
    space: PolicySpace = PolicySpace.ADAPTED,
    cap: Optional[int] = None,
) -> LipschitzReport:
    """max |Psi(t, eta1) - Psi(t, eta2)| / ||eta1 - eta2|| against exp(C L T) Lip(phi)."""
    psi = ForwardValue(problem, tree, space, cap)
    ratio, tested, skipped = 0.0, 0, 0
    for eta1, eta2 in pairs:
        eta1, eta2 = _as_values(problem, tree, level, eta1), _as_values(problem, tree, level, eta2)
        dist = tree_norm(tree, level, eta1 - eta2)
        if dist == 0.0:
            skipped += 1
            continue
        tested += 1
        ratio = max(ratio, abs(psi(level, eta1) - psi(level, eta2)) / dist)
    return LipschitzReport(level, ratio, lipschitz_bound(problem, tree.grid.horizon), tested, skipped)


# Cylinder functionals and path derivatives

PathMap = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class CylinderFunctional:
    """eta(t, path) with caller-supplied path derivatives.

    Each callable takes (t, paths (M, k+1, d)) and returns (M, d'), (M, d'),
    (M, d', d) and (M, d', d, d) respectively.
    """

    value: PathMap
    d_t: PathMap
    d_omega: PathMap
    d_omega2: PathMap
    value_dim: int = 1
    markovian: bool = False

    def _call(self, fn: PathMap, t: float, paths: np.ndarray, tail: Tuple[int, ...]) -> np.ndarray:
        return np.asarray(fn(t, paths), dtype=float).reshape((paths.shape[0], self.value_dim) + tail)

    def values(self, t, paths):
        return self._call(self.value, t, paths, ())

    def time_derivative(self, t, paths):
        return self._call(self.d_t, t, paths, ())

    def space_derivative(self, t, paths):
        return self._call(self.d_omega, t, paths, (paths.shape[-1],))

    def second_derivative(self, t, paths):
        d = paths.shape[-1]
        return self._call(self.d_omega2, t, paths, (d, d))


def _level_paths(cyl: CylinderFunctional, tree: ScenarioTree, level: int) -> np.ndarray:
    if tree.mode is TreeMode.PATH:
        return tree.paths(level)
    if not cyl.markovian:
        raise TreeModeError("path-dependent cylinder on a recombining tree; rebuild with mode='path'")
    return tree.values[level][:, None, :]


@dataclass
class ProbeReport:
    max_residual: float
    residual_by_level: List[float]
    dt: float
    threshold_factor: float


def path_derivative_probe(cyl: CylinderFunctional, tree: ScenarioTree, threshold_factor: float = 4.0) -> ProbeReport:
    """Residual of d eta = d_t eta dt + d_omega eta dB + 1/2 dB' H dB on every tree transition.

    A transition fails when its residual exceeds
    threshold_factor * dt^1.5 * (1 + |d_t eta| + |d_omega eta| + |H|) at the parent node.
    """
    dt = tree.dt
    residuals = []
    for k in range(tree.steps):
        t = tree.time(k)
        paths = _level_paths(cyl, tree, k)
        eta = cyl.values(t, paths)
        e_t = cyl.time_derivative(t, paths)
        e_w = cyl.space_derivative(t, paths)
        e_ww = cyl.second_derivative(t, paths)
        child_paths = _level_paths(cyl, tree, k + 1)
        child_eta = cyl.values(tree.time(k + 1), child_paths)
        scale = 1.0 + np.abs(e_t).max(axis=1) + np.abs(e_w).max(axis=(1, 2)) + np.abs(e_ww).max(axis=(1, 2, 3))
        worst = 0.0
        for c in range(tree.branching):
            db = tree.increments[c]
            predicted = e_t * dt + e_w @ db + 0.5 * np.einsum("mapq,p,q->ma", e_ww, db, db)
            actual = child_eta[tree.children[k][:, c]] - eta
            res = np.abs(actual - predicted).max(axis=1)
            bad = np.flatnonzero(res > threshold_factor * dt**1.5 * scale + 1e-12)
            if bad.size:
                i = int(bad[0])
                raise InvalidCylinderError(
                    f"functional Ito probe fails at level {k}, node {i}, child {c}: residual {res[i]:.3g} "
                    f"(allowed {threshold_factor * dt**1.5 * scale[i]:.3g}); check the supplied derivatives"
                )
            worst = max(worst, float(res.max()))
        residuals.append(worst)
    return ProbeReport(max(residuals, default=0.0), residuals, dt, threshold_factor)


# Master equation residual

@dataclass
class MasterResidual:
    level: int
    dt: float
    residual: float
    d_minus: float
    drift_term: float
    sup_term: float
    psi: float
    psi_frozen: float
    derivative: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "dt": self.dt,
            "residual": self.residual,
            "d_minus": self.d_minus,
            "drift_term": self.drift_term,
            "sup_term": self.sup_term,
            "psi": self.psi,
            "psi_frozen": self.psi_frozen,
        }


def frozen_values(cyl: CylinderFunctional, tree: ScenarioTree, level: int) -> np.ndarray:
    """eta evaluated at time t_level on paths stopped at level-1: one value per level-1 node."""
    paths = _level_paths(cyl, tree, level - 1)
    stopped = np.concatenate([paths, paths[:, -1:, :]], axis=1) if tree.mode is TreeMode.PATH else paths
    return cyl.values(tree.time(level), stopped)


def eta_derivative(psi: ForwardValue, level: int, eta: np.ndarray, scale: float = BUMP_SCALE) -> np.ndarray:
    """Riesz representative of D_eta Psi by central per-node bumps: (N_t, d')."""
    tree = psi.tree
    probs = tree.probabilities(level)
    out = np.empty_like(eta)
    for i in range(eta.shape[0]):
        h = scale * (1.0 + float(np.linalg.norm(eta[i])))
        for a in range(eta.shape[1]):
            up, down = eta.copy(), eta.copy()
            up[i, a] += h
            down[i, a] -= h
            out[i, a] = (psi(level, up) - psi(level, down)) / (2.0 * h * probs[i])
    return out


def hamiltonian(problem: BSDEProblem, tree: ScenarioTree, level: int, zeta: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Per node max over U of zeta . f(t, y, z, u): (N_t,)."""
    n, k = y.shape[0], problem.n_controls
    rows = tree.nodes(level, np.repeat(np.arange(n), k))
    reps = (n,) + (1,) * (problem.control_set.ndim - 1)
    f = np.asarray(
        problem.generator(rows, np.repeat(y, k, axis=0), np.repeat(z, k, axis=0), np.tile(problem.control_set, reps)),
        dtype=float,
    ).reshape(n, k, problem.value_dim)
    return np.max(np.einsum("nka,na->nk", f, zeta), axis=1)


def master_residual(
    problem: BSDEProblem,
    tree: ScenarioTree,
    cyl: CylinderFunctional,
    level: int,
    space: PolicySpace = PolicySpace.ADAPTED,
    cap: Optional[int] = None,
    bump_scale: float = BUMP_SCALE,
    probe: bool = True,
) -> MasterResidual:
    """D^-_t Psi - <D_eta Psi, d_t eta + tr(H)/2> - sup_u <D_eta Psi, f(t, eta, d_omega eta, u)>."""
    if tree.mode is not TreeMode.PATH:
        raise TreeModeError("the left time derivative stops paths; build the tree with mode='path'")
    if not 1 <= level <= tree.steps:
        raise DomainError(f"the left derivative needs 1 <= t <= n, got {level}")
    if cyl.value_dim != problem.value_dim:
        raise DomainError(f"cylinder has d' = {cyl.value_dim}, problem has d' = {problem.value_dim}")
    if probe:
        path_derivative_probe(cyl, tree)

    psi = ForwardValue(problem, tree, space, cap)
    t = tree.time(level)
    paths = tree.paths(level)
    eta = cyl.values(t, paths)
    psi_now = psi(level, eta)
    psi_frozen = psi(level - 1, frozen_values(cyl, tree, level))
    d_minus = (psi_now - psi_frozen) / tree.dt

    zeta = eta_derivative(psi, level, eta, bump_scale)
    probs = tree.probabilities(level)
    generator_in = cyl.time_derivative(t, paths) + 0.5 * np.trace(cyl.second_derivative(t, paths), axis1=2, axis2=3)
    drift = float(np.sum(probs * np.sum(zeta * generator_in, axis=1)))
    sup = float(np.sum(probs * hamiltonian(problem, tree, level, zeta, eta, cyl.space_derivative(t, paths))))
    out = MasterResidual(level, tree.dt, d_minus - drift - sup, d_minus, drift, sup, psi_now, psi_frozen, zeta)
    logger.info("Master residual at level %d (dt=%.4g): %.4g", level, tree.dt, out.residual)
    return out


# Ill-posedness of the z-free master equation

@dataclass
class IllPosedReport:
    psi_first: float
    psi_second: float
    gap: float
    delta: float
    rhs_identical: bool
    witness: bool

    def to_dict(self) -> dict:
        return {
            "psi_first": self.psi_first,
            "psi_second": self.psi_second,
            "gap": self.gap,
            "delta": self.delta,
            "rhs_identical": self.rhs_identical,
            "witness": self.witness,
        }


def _check_shared_zero(problem: BSDEProblem, tree: ScenarioTree, first: Generator, second: Generator, seed: int = 0, probes: int = 64) -> None:
    rng = random_streams.generator(seed, 29)
    for level in range(tree.steps):
        nodes = tree.nodes(level, rng.integers(0, tree.node_count(level), size=probes))
        y = rng.normal(size=(probes, problem.value_dim))
        z = np.zeros((probes, problem.value_dim, tree.dim))
        u = problem.control_set[rng.integers(0, problem.n_controls, size=probes)]
        if not np.array_equal(np.asarray(first(nodes, y, z, u), dtype=float), np.asarray(second(nodes, y, z, u), dtype=float)):
            raise StructureError(f"the two generators differ at z = 0 on level {level}")


def illposed_demo(
    problem: BSDEProblem,
    tree: ScenarioTree,
    first: Generator,
    second: Generator,
    delta: float = 1e-3,
    cap: Optional[int] = None,
) -> IllPosedReport:
    """Two generators agreeing at z = 0 give the same z-free master right side but different Psi(T, xi)."""
    _check_shared_zero(problem, tree, first, second)
    p1 = problem.with_(generator=first, name=f"{problem.name}-first")
    p2 = problem.with_(generator=second, name=f"{problem.name}-second")
    n = tree.steps
    xi = problem.terminal_values(tree)
    psi1 = ForwardValue(p1, tree, cap=cap)
    v1, v2 = psi1(n, xi), ForwardValue(p2, tree, cap=cap)(n, xi)

    zeta = eta_derivative(psi1, n, xi)
    zero = np.zeros((xi.shape[0], problem.value_dim, tree.dim))
    rhs1 = hamiltonian(p1, tree, n, zeta, xi, zero)
    rhs2 = hamiltonian(p2, tree, n, zeta, xi, zero)
    identical = bool(np.array_equal(rhs1, rhs2))
    gap = abs(v1 - v2)
    report = IllPosedReport(v1, v2, gap, delta, identical, witness=identical and gap >= delta)
    logger.info("Ill-posedness demo: Psi1=%.6g Psi2=%.6g gap=%.3g identical RHS=%s", v1, v2, gap, identical)
    return report


def zero_generator(nodes: NodeBatch, y, z, u) -> np.ndarray:
    return np.zeros_like(y)


def z_generator(nodes: NodeBatch, y, z, u) -> np.ndarray:
    """f = Z, summed over Brownian coordinates."""
    return np.sum(z, axis=2)


def demo_problem(name: str = "illposed") -> BSDEProblem:
    """xi = B_T (first coordinate), phi = id, a single dummy control."""
    return BSDEProblem(
        value_dim=1,
        generator=zero_generator,
        terminal=lambda nodes: nodes.brownian[:, :1],
        utility=lambda y: np.asarray(y)[..., 0],
        control_set=np.array([0.0]),
        lipschitz=1.0,
        name=name,
    )
