"""Dual control problem for the reachable set of a controlled BSDE.

For a starting value y the dual problem steers the forward process

    X_{s} = y - int f(r, X_r, Z_r, u_r) dr + int Z_r dB_r

and measures W = inf E|X_T - xi|^2.  Its zero set (the nodal set) recovers the
closure of the reachable set.  Two realisations are provided:

* `solve_dual_hjb`: explicit finite differences for the degenerate HJB equation
  of W(t, x, y) in the Markovian case with d = 1 and d' <= 2.
* `dual_value_direct`: exact enumeration on a scenario tree, where each forward
  step inverts the explicit backward step of the BSDE scheme, so reachable
  values give W = 0 up to round-off.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy.spatial.distance import cdist, directed_hausdorff

from timecon.errors import ConfigError, DomainError, EmptySetError
from timecon.services.bsde import (
    BSDEProblem,
    PolicySpace,
    Utility,
    check_cap,
    controls_from_digits,
    decode_policies,
)
from timecon.services.lattice import NodeBatch, ScenarioTree, TimeGrid

logger = logging.getLogger(__name__)

FIXED_POINT_ITERATIONS = 200
FORWARD_CHUNK_ELEMENTS = 1 << 21


MarkovGenerator = Callable[[float, np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class MarkovianProblem:
    """f(t, x, y, z, u) and xi = g(B_T); x is the current Brownian value."""

    value_dim: int
    generator: MarkovGenerator
    terminal: Callable[[np.ndarray], np.ndarray]
    utility: Utility
    control_set: np.ndarray
    lipschitz: float = 0.0
    name: str = "markovian"

    def to_bsde_problem(self) -> BSDEProblem:
        f, g = self.generator, self.terminal

        def generator(nodes: NodeBatch, y, z, u):
            return f(nodes.time, nodes.brownian, y, z, u)

        def terminal(nodes: NodeBatch):
            return g(nodes.brownian)

        return BSDEProblem(
            value_dim=self.value_dim,
            generator=generator,
            terminal=terminal,
            utility=self.utility,
            control_set=self.control_set,
            lipschitz=self.lipschitz,
            markovian=True,
            name=self.name,
        )


class BoundaryTreatment(str, Enum):
    QUADRATIC = "quadratic"
    LINEAR = "linear"


class HJBConfig(BaseModel):
    x_min: float = -2.0
    x_max: float = 2.0
    dx: float = 0.05
    y_min: List[float] = Field(default_factory=lambda: [-2.0])
    y_max: List[float] = Field(default_factory=lambda: [2.0])
    dy: List[float] = Field(default_factory=lambda: [0.05])
    z_values: List[float] = Field(default_factory=lambda: [-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0])
    substeps: Optional[int] = None
    epsilon: Optional[float] = None
    boundary: BoundaryTreatment = BoundaryTreatment.QUADRATIC
    trusted_margin: float = 0.2

    @model_validator(mode="after")
    def check_grids(self):
        if not (self.x_max > self.x_min and 0 < self.dx <= self.x_max - self.x_min):
            raise ValueError(f"degenerate x-grid [{self.x_min}, {self.x_max}] with dx={self.dx}")
        if not (len(self.y_min) == len(self.y_max) == len(self.dy)) or not 1 <= len(self.dy) <= 2:
            raise ValueError("y-grid needs matching bounds and spacings for 1 or 2 value dimensions")
        for lo, hi, h in zip(self.y_min, self.y_max, self.dy):
            if not (hi > lo and 0 < h <= hi - lo):
                raise ValueError(f"degenerate y-grid [{lo}, {hi}] with dy={h}")
        if 0.0 not in self.z_values:
            raise ValueError("z-grid must contain 0")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.substeps is not None and self.substeps < 1:
            raise ValueError("substeps must be positive")
        return self

    @property
    def value_dim(self) -> int:
        return len(self.dy)

    def x_grid(self) -> np.ndarray:
        return _axis(self.x_min, self.x_max, self.dx)

    def y_axes(self) -> List[np.ndarray]:
        return [_axis(lo, hi, h) for lo, hi, h in zip(self.y_min, self.y_max, self.dy)]

    def default_epsilon(self) -> float:
        """Ten times the nearest-grid-point error of the terminal slice."""
        return 10.0 * sum(h * h for h in self.dy) / 4.0

    def nodal_epsilon(self) -> float:
        return self.default_epsilon() if self.epsilon is None else self.epsilon


def _axis(lo: float, hi: float, h: float) -> np.ndarray:
    count = int(round((hi - lo) / h)) + 1
    return lo + h * np.arange(count)


def grid_points(axes: Sequence[np.ndarray]) -> np.ndarray:
    """Cartesian product in lexicographic order, shape (G, len(axes))."""
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


@dataclass
class DualGrid:
    config: HJBConfig
    times: np.ndarray
    x: np.ndarray
    y_axes: List[np.ndarray]
    values: np.ndarray
    trusted: np.ndarray
    substeps: int
    dt_max: float

    def y_points(self) -> np.ndarray:
        return grid_points(self.y_axes)

    def slice(self, level: int, x_index: int) -> np.ndarray:
        return self.values[level, x_index].reshape(-1)


@dataclass
class ConditionalDualValue:
    """W~(level, node, y) at given y points for a set of nodes."""

    level: int
    nodes: np.ndarray
    y_points: np.ndarray
    values: np.ndarray

    def points_for(self, row: int) -> np.ndarray:
        return self.y_points if self.y_points.ndim == 2 else self.y_points[row]

    def row(self, node: int) -> int:
        hits = np.flatnonzero(self.nodes == node)
        if hits.size == 0:
            raise DomainError(f"node {node} not covered at level {self.level}")
        return int(hits[0])


@dataclass
class NodalSet:
    level: int
    where: int
    epsilon: float
    points: np.ndarray
    empty: bool


WSource = Union[DualGrid, ConditionalDualValue]


def terminal_slice(problem: MarkovianProblem, x: np.ndarray, y_axes: Sequence[np.ndarray]) -> np.ndarray:
    """|y - g(x)|^2 on the (x, y) grid, shape (nx, *ny)."""
    g = np.asarray(problem.terminal(x[:, None]), dtype=float).reshape(x.size, problem.value_dim)
    mesh = np.meshgrid(*y_axes, indexing="ij")
    out = np.zeros((x.size,) + mesh[0].shape)
    for a, ya in enumerate(mesh):
        out += (ya[None, ...] - g[:, a].reshape((x.size,) + (1,) * len(mesh))) ** 2
    return out


def _pad(w: np.ndarray, boundary: BoundaryTreatment) -> np.ndarray:
    for axis in range(w.ndim):

        def take(i):
            idx = [slice(None)] * w.ndim
            idx[axis] = slice(i, i + 1) if i >= 0 else slice(w.shape[axis] + i, w.shape[axis] + i + 1)
            return w[tuple(idx)]

        if boundary is BoundaryTreatment.QUADRATIC and w.shape[axis] >= 3:
            low = 3 * take(0) - 3 * take(1) + take(2)
            high = 3 * take(-1) - 3 * take(-2) + take(-3)
        else:
            low = 2 * take(0) - take(1)
            high = 2 * take(-1) - take(-2)
        w = np.concatenate([low, w, high], axis=axis)
    return w


def _shift(wp: np.ndarray, offsets: Sequence[int]) -> np.ndarray:
    return wp[tuple(slice(1 + o, wp.shape[i] - 1 + o) for i, o in enumerate(offsets))]


def _unit(ndim: int, axis: int, step: int) -> List[int]:
    out = [0] * ndim
    out[axis] = step
    return out


def _pair(ndim: int, a: int, sa: int, b: int, sb: int) -> List[int]:
    out = [0] * ndim
    out[a] = sa
    out[b] = sb
    return out


def solve_dual_hjb(problem: MarkovianProblem, grid: TimeGrid, config: HJBConfig) -> DualGrid:
    """Backward explicit scheme for W_t + W_xx/2 + inf_{z,u}{ W_yy:zz/2 + W_xy.z - W_y.f } = 0."""
    dv = problem.value_dim
    if dv != config.value_dim:
        raise ConfigError(f"HJB grid has {config.value_dim} y-dimensions, problem has d' = {dv}")
    x = config.x_grid()
    y_axes = config.y_axes()
    dx, dy = config.dx, config.dy
    ndim = 1 + dv
    shape = (x.size,) + tuple(a.size for a in y_axes)

    z_grid = np.array(list(itertools.product(config.z_values, repeat=dv)))
    controls = np.asarray(problem.control_set, dtype=float)
    candidates = list(itertools.product(range(z_grid.shape[0]), range(controls.shape[0])))

    mesh = np.meshgrid(x, *y_axes, indexing="ij")
    pts_x = mesh[0].reshape(-1, 1)
    pts_y = np.stack([m.reshape(-1) for m in mesh[1:]], axis=1)
    npts = pts_x.shape[0]

    def drift(t: float, zi: int, ui: int) -> np.ndarray:
        z = np.broadcast_to(z_grid[zi][None, :, None], (npts, dv, 1))
        u = np.broadcast_to(controls[ui], (npts,) + controls.shape[1:])
        return np.asarray(problem.generator(t, pts_x, pts_y, z, u), dtype=float).reshape(npts, dv)

    f_max = np.zeros(dv)
    for zi, ui in candidates:
        f_max = np.maximum(f_max, np.max(np.abs(drift(grid.horizon, zi, ui)), axis=0))
    z_max = max(abs(v) for v in config.z_values)
    rate = 1.0 / dx**2
    for a in range(dv):
        rate += z_max**2 / dy[a] ** 2 + z_max / (dx * dy[a]) + f_max[a] / dy[a]
        for b in range(a + 1, dv):
            rate += z_max**2 / (dy[a] * dy[b])
    dt_max = 1.0 / rate

    if config.substeps is None:
        substeps = max(1, math.ceil(grid.dt / dt_max * (1 - 1e-12)))
    else:
        substeps = config.substeps
        if grid.dt / substeps > dt_max * (1 + 1e-12):
            raise ConfigError(
                f"explicit HJB step {grid.dt / substeps:.6g} violates CFL: max stable dt is {dt_max:.6g} "
                f"(use substeps >= {math.ceil(grid.dt / dt_max)})"
            )
    h = grid.dt / substeps
    logger.info("HJB grid %s, %d substeps per tree step (dt=%.3g, max stable %.3g)", shape, substeps, h, dt_max)

    values = np.empty((grid.steps + 1,) + shape)
    w = terminal_slice(problem, x, y_axes)
    values[grid.steps] = w
    for k in range(grid.steps - 1, -1, -1):
        for s in range(substeps):
            t = grid.time(k + 1) - s * h
            wp = _pad(w, config.boundary)
            centre = _shift(wp, [0] * ndim)
            w_xx = (_shift(wp, _unit(ndim, 0, 1)) - 2 * centre + _shift(wp, _unit(ndim, 0, -1))) / dx**2
            w_yy = {}
            w_xy = []
            d_plus, d_minus = [], []
            for a in range(dv):
                ax = 1 + a
                up, down = _shift(wp, _unit(ndim, ax, 1)), _shift(wp, _unit(ndim, ax, -1))
                w_yy[(a, a)] = (up - 2 * centre + down) / dy[a] ** 2
                d_plus.append((up - centre) / dy[a])
                d_minus.append((centre - down) / dy[a])
                w_xy.append(
                    (
                        _shift(wp, _pair(ndim, 0, 1, ax, 1))
                        - _shift(wp, _pair(ndim, 0, 1, ax, -1))
                        - _shift(wp, _pair(ndim, 0, -1, ax, 1))
                        + _shift(wp, _pair(ndim, 0, -1, ax, -1))
                    )
                    / (4 * dx * dy[a])
                )
                for b in range(a):
                    w_yy[(a, b)] = (
                        _shift(wp, _pair(ndim, ax, 1, 1 + b, 1))
                        - _shift(wp, _pair(ndim, ax, 1, 1 + b, -1))
                        - _shift(wp, _pair(ndim, ax, -1, 1 + b, 1))
                        + _shift(wp, _pair(ndim, ax, -1, 1 + b, -1))
                    ) / (4 * dy[a] * dy[b])

            best = np.full(shape, np.inf)
            for zi, ui in candidates:
                z = z_grid[zi]
                ham = np.zeros(shape)
                for a in range(dv):
                    ham += 0.5 * w_yy[(a, a)] * z[a] ** 2 + w_xy[a] * z[a]
                    for b in range(a):
                        ham += w_yy[(a, b)] * z[a] * z[b]
                b_vec = -drift(t, zi, ui)
                for a in range(dv):
                    ba = b_vec[:, a].reshape(shape)
                    ham += np.maximum(ba, 0.0) * d_plus[a] + np.minimum(ba, 0.0) * d_minus[a]
                np.minimum(best, ham, out=best)
            w = np.maximum(w + h * (0.5 * w_xx + best), 0.0)
        values[k] = w

    trusted = np.ones(shape, dtype=bool)
    for axis, coords in enumerate([x] + list(y_axes)):
        margin = config.trusted_margin * (coords[-1] - coords[0])
        ok = (coords - coords[0] >= margin - 1e-12) & (coords[-1] - coords >= margin - 1e-12)
        trusted &= ok.reshape([-1 if i == axis else 1 for i in range(ndim)])
    return DualGrid(config, grid.times, x, y_axes, values, trusted, substeps, dt_max)


# Tree-exact dual value

def _z_candidates(z_values: Sequence[float], value_dim: int, dim: int) -> np.ndarray:
    return np.array(list(itertools.product(z_values, repeat=value_dim * dim)), dtype=float).reshape(-1, value_dim, dim)


def _dual_slots(tree: ScenarioTree, depth: int, space: PolicySpace) -> List[int]:
    if PolicySpace(space) is PolicySpace.DETERMINISTIC:
        return [1] * depth
    return [tree.branching**r for r in range(depth)]


def _invert_step(problem: BSDEProblem, nodes: NodeBatch, x: np.ndarray, z: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    """Solve x = a + f(a, z, u) dt for a by fixed-point iteration."""
    a = x.copy()
    for _ in range(FIXED_POINT_ITERATIONS):
        nxt = x - np.asarray(problem.generator(nodes, a, z, u), dtype=float).reshape(a.shape) * dt
        if np.max(np.abs(nxt - a), initial=0.0) <= 1e-15 * (1.0 + np.max(np.abs(nxt), initial=0.0)):
            return nxt
        a = nxt
    logger.debug("Fixed point did not reach round-off in %d iterations", FIXED_POINT_ITERATIONS)
    return a


def forward_dual(
    problem: BSDEProblem,
    tree: ScenarioTree,
    level: int,
    depth: int,
    y: np.ndarray,
    digits: np.ndarray,
    slots: Sequence[int],
    z_grid: np.ndarray,
    start_nodes: np.ndarray,
) -> np.ndarray:
    """Forward X over path-structured cones: (P, N, G, B**depth, d') at the cone leaves."""
    dv, b = problem.value_dim, tree.branching
    n_pol = digits.shape[0]
    n_start, n_pts = y.shape[0], y.shape[1]
    n_u = problem.n_controls
    x = np.broadcast_to(y[None, :, :, None, :], (n_pol, n_start, n_pts, 1, dv)).copy()
    controls = controls_from_digits(digits, slots)
    for r in range(depth):
        width = b**r
        cand = np.broadcast_to(controls[r][:, 0, :], (n_pol, width))
        z = z_grid[cand // n_u]
        u = problem.control_set[cand % n_u]
        absolute = tree.path_descendants(level, r)[start_nodes]
        shape = (n_pol, n_start, n_pts, width)
        rows = tree.nodes(level + r, np.broadcast_to(absolute[None, :, None, :], shape).reshape(-1))
        z_rows = np.broadcast_to(z[:, None, None, :, :, :], shape + (dv, tree.dim)).reshape(-1, dv, tree.dim)
        u_rows = np.broadcast_to(u[:, None, None, :], shape + u.shape[2:]).reshape((-1,) + u.shape[2:])
        a = _invert_step(problem, rows, x.reshape(-1, dv), z_rows, u_rows, tree.dt).reshape(shape + (dv,))
        zb = np.broadcast_to(z[:, None, None, :, :, :], shape + (dv, tree.dim))
        nxt = np.empty((n_pol, n_start, n_pts, width, b, dv))
        for c in range(b):
            nxt[..., c, :] = a + zb @ tree.increments[c]
        x = nxt.reshape(n_pol, n_start, n_pts, width * b, dv)
    return x


def _leaf_mean(values: np.ndarray, branching: int, depth: int) -> np.ndarray:
    """Average over equiprobable path leaves along the last axis by repeated one-step means."""
    for _ in range(depth):
        grouped = values.reshape(values.shape[:-1] + (-1, branching))
        acc = grouped[..., 0].copy()
        for c in range(1, branching):
            acc += grouped[..., c]
        values = acc / branching
    return values[..., 0]


def dual_value_direct(
    problem: BSDEProblem,
    tree: ScenarioTree,
    level: int,
    y: np.ndarray,
    z_values: Sequence[float],
    space: PolicySpace = PolicySpace.ADAPTED,
    start_nodes: Optional[np.ndarray] = None,
    cap: Optional[int] = None,
) -> ConditionalDualValue:
    """W~(level, node, y) = min over enumerated (Z, u) cone policies of E_node|X_T - xi|^2.

    y is (G, d') shared by all nodes or (N, G, d') per node.
    """
    dv = problem.value_dim
    nodes = np.arange(tree.node_count(level)) if start_nodes is None else np.asarray(start_nodes)
    y = np.asarray(y, dtype=float)
    per_node = y.ndim == 3
    y_rows = y if per_node else np.broadcast_to(y[None], (nodes.size,) + y.shape)
    if y_rows.shape[0] != nodes.size or y_rows.shape[-1] != dv:
        raise DomainError(f"y points of shape {y.shape} do not match {nodes.size} nodes and d' = {dv}")

    depth = tree.steps - level
    z_grid = _z_candidates(z_values, dv, tree.dim)
    base = z_grid.shape[0] * problem.n_controls
    slots = _dual_slots(tree, depth, space)
    total = base ** int(sum(slots))
    check_cap(total, cap, "dual policies")

    xi = problem.terminal_values(tree)[tree.path_descendants(level, depth)[nodes]]
    n_pts = y_rows.shape[1]
    width = tree.branching**depth
    chunk = max(1, FORWARD_CHUNK_ELEMENTS // max(1, nodes.size * n_pts * width * dv))
    best = np.full((nodes.size, n_pts), np.inf)
    for start in range(0, total, chunk):
        digits = decode_policies(np.arange(start, min(start + chunk, total)), sum(slots), base)
        x = forward_dual(problem, tree, level, depth, y_rows, digits, slots, z_grid, nodes)
        cost = np.sum((x - xi[None, :, None, :, :]) ** 2, axis=-1)
        np.minimum(best, np.min(_leaf_mean(cost, tree.branching, depth), axis=0), out=best)
    logger.debug("Dual value at level %d: %d policies x %d points", level, total, n_pts)
    return ConditionalDualValue(level, nodes, y if per_node else y.copy(), best)


def extract_nodal_set(source: WSource, level: int, where: int, epsilon: float) -> NodalSet:
    """Grid points with W <= epsilon at (level, x-index) or (level, node), sorted ascending."""
    if not epsilon > 0:
        raise DomainError(f"epsilon must be positive, got {epsilon}")
    if isinstance(source, DualGrid):
        points = source.y_points()
        w = source.slice(level, where)
    else:
        if source.level != level:
            raise DomainError(f"conditional dual value lives at level {source.level}, asked for {level}")
        row = source.row(where)
        points = source.points_for(row)
        w = source.values[row]
    keep = points[w <= epsilon]
    keep = keep[np.lexsort(keep.T[::-1])] if keep.size else keep.reshape(0, points.shape[1])
    if keep.shape[0] == 0:
        logger.warning("Nodal set at level %d (%d) is empty for epsilon=%.3g: epsilon is below the scheme error", level, where, epsilon)
    return NodalSet(level, where, float(epsilon), keep, keep.shape[0] == 0)


@dataclass
class DualStaticValue:
    value: float
    y_star: np.ndarray
    index: int
    near_reachable: Optional[bool] = None
    distance: Optional[float] = None


def dual_static_value(
    nodal: NodalSet,
    utility: Utility,
    reachable: Optional[np.ndarray] = None,
    cell: Optional[float] = None,
) -> DualStaticValue:
    """max phi over the nodal set; optionally checks y* is within one cell of the reachable set."""
    if nodal.empty:
        raise EmptySetError(f"nodal set at level {nodal.level} is empty for epsilon={nodal.epsilon:.3g}; increase epsilon")
    values = np.asarray(utility(nodal.points), dtype=float).reshape(-1)
    best = float(np.max(values))
    index = int(np.argmax(values >= best))
    out = DualStaticValue(best, nodal.points[index], index)
    if reachable is not None and len(reachable):
        out.distance = float(np.min(cdist(nodal.points[index][None], np.asarray(reachable))))
        if cell is not None:
            out.near_reachable = out.distance <= cell * (1 + 1e-9)
    return out


def hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    return float(max(directed_hausdorff(a, b)[0], directed_hausdorff(b, a)[0]))


@dataclass
class GeometricDPPReport:
    level_from: int
    level_to: int
    node: int
    epsilon: float
    rho: float
    rho_bound: float
    inclusion_a: bool
    inclusion_b: bool
    nodal_size: int
    steerable_size: int
    worst_b_slack: float
    points: np.ndarray = field(repr=False, default=None)
    w_from: np.ndarray = field(repr=False, default=None)
    steer: np.ndarray = field(repr=False, default=None)


def check_geometric_dpp(
    problem: BSDEProblem,
    tree: ScenarioTree,
    epsilon: float,
    level_from: int,
    level_to: int,
    y_points: np.ndarray,
    z_values: Sequence[float],
    node: int = 0,
    space: PolicySpace = PolicySpace.ADAPTED,
    cap: Optional[int] = None,
    tol: float = 1e-12,
) -> GeometricDPPReport:
    """Compare W~(k1, y) with S(y) = min over segment controls of max over successors W~(k2, X)."""
    if not 0 <= level_from <= level_to <= tree.steps:
        raise DomainError(f"need 0 <= k1 <= k2 <= n, got {level_from}, {level_to}")
    y_points = np.asarray(y_points, dtype=float)
    w_from = dual_value_direct(problem, tree, level_from, y_points, z_values, space, np.array([node]), cap).values[0]

    delta = level_to - level_from
    if delta == 0:
        steer = w_from.copy()
    else:
        z_grid = _z_candidates(z_values, problem.value_dim, tree.dim)
        base = z_grid.shape[0] * problem.n_controls
        slots = _dual_slots(tree, delta, space)
        total = base ** int(sum(slots))
        check_cap(total, cap, "segment policies")
        digits = decode_policies(np.arange(total), sum(slots), base)
        x = forward_dual(problem, tree, level_from, delta, y_points[None], digits, slots, z_grid, np.array([node]))[:, 0]
        successors = tree.path_descendants(level_from, delta)[node]
        # x: (P, G, W, d') -> per successor w, all (P*G) points
        pts = np.moveaxis(x, 2, 0).reshape(successors.size, -1, problem.value_dim)
        w_to = dual_value_direct(problem, tree, level_to, pts, z_values, space, successors, cap).values
        w_to = w_to.reshape(successors.size, total, y_points.shape[0])
        steer = np.min(np.max(w_to, axis=0), axis=0)

    rho_bound = tree.branching**delta * epsilon
    in_nodal = w_from <= epsilon
    rho = float(np.max(steer[in_nodal])) if np.any(in_nodal) else 0.0
    steerable = steer <= epsilon
    b_slack = float(np.max(w_from[steerable] - epsilon)) if np.any(steerable) else -np.inf
    report = GeometricDPPReport(
        level_from=level_from,
        level_to=level_to,
        node=node,
        epsilon=float(epsilon),
        rho=rho,
        rho_bound=float(rho_bound),
        inclusion_a=rho <= rho_bound + tol,
        inclusion_b=b_slack <= tol,
        nodal_size=int(np.sum(in_nodal)),
        steerable_size=int(np.sum(steerable)),
        worst_b_slack=b_slack,
        points=y_points,
        w_from=w_from,
        steer=steer,
    )
    logger.info("Geometric DPP %d->%d: rho=%.3g (bound %.3g), |N_eps|=%d", level_from, level_to, rho, rho_bound, report.nodal_size)
    return report


@dataclass
class RegularityReport:
    c_hat: float
    pairs: int
    bound: Optional[float]
    holds: Optional[bool]


def check_w_regularity(source: WSource, level: int, where: int, bound: Optional[float] = None, max_points: int = 1500) -> RegularityReport:
    """Fit C in |W(y1) - W(y2)| <= C (1 + |y1| + |y2|) |y1 - y2| over pairs of grid points."""
    if isinstance(source, DualGrid):
        points, w = source.y_points(), source.slice(level, where)
    else:
        row = source.row(where)
        points, w = source.points_for(row), source.values[row]
    stride = max(1, math.ceil(points.shape[0] / max_points))
    points, w = points[::stride], w[::stride]
    i, j = np.triu_indices(points.shape[0], k=1)
    dist = np.linalg.norm(points[i] - points[j], axis=1)
    scale = (1 + np.linalg.norm(points[i], axis=1) + np.linalg.norm(points[j], axis=1)) * dist
    ratios = np.abs(w[i] - w[j]) / scale
    c_hat = float(np.max(ratios)) if ratios.size else 0.0
    holds = None if bound is None else c_hat <= bound * (1 + 1e-9)
    return RegularityReport(c_hat, int(ratios.size), bound, holds)
