"""Binomial scenario trees for a d-dimensional Brownian motion.

Each step moves every coordinate by +/- sqrt(dt) with equal probability, so a
node has 2**d equiprobable children.  Two layouts are supported:

* ``path``: one node per sign sequence.  Level k holds 2**(k*d) nodes ordered
  lexicographically in the sign sequence (minus before plus, earlier steps and
  lower coordinates most significant).  Every path functional is representable.
* ``recombining``: one node per vector of up-move counts, ordered
  lexicographically.  Only functionals of the current value are representable.

Conditional expectations are repeated one-step averages over children, summed in
a fixed child order so results do not depend on how callers batch their data.
Time integrals use the left-endpoint rule.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from scipy.stats import binom

from timecon.errors import DomainError, SizeError, TreeModeError
from timecon.settings import get_settings

logger = logging.getLogger(__name__)


class TreeMode(str, Enum):
    PATH = "path"
    RECOMBINING = "recombining"


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    steps: int

    def __post_init__(self):
        if self.steps < 1:
            raise DomainError(f"step count must be positive, got {self.steps}")
        if not self.horizon > 0:
            raise DomainError(f"horizon must be positive, got {self.horizon}")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def sqrt_dt(self) -> float:
        return float(np.sqrt(self.dt))

    def time(self, level: int) -> float:
        return self.horizon * level / self.steps

    @property
    def times(self) -> np.ndarray:
        return self.horizon * np.arange(self.steps + 1) / self.steps


def _sign_bits(dim: int) -> np.ndarray:
    """(2**dim, dim) array of 0/1 up-move indicators, child order."""
    codes = np.arange(2**dim)
    shifts = np.arange(dim - 1, -1, -1)
    return (codes[:, None] >> shifts[None, :]) & 1


def _up_counts(level: int, dim: int) -> np.ndarray:
    return np.indices((level + 1,) * dim).reshape(dim, -1).T


@dataclass(frozen=True, eq=False)
class ScenarioTree:
    grid: TimeGrid
    dim: int
    mode: TreeMode
    values: Tuple[np.ndarray, ...]
    children: Tuple[np.ndarray, ...]
    _cache: Dict = field(default_factory=dict, repr=False)

    @property
    def steps(self) -> int:
        return self.grid.steps

    @property
    def dt(self) -> float:
        return self.grid.dt

    @property
    def branching(self) -> int:
        return 2**self.dim

    @cached_property
    def bits(self) -> np.ndarray:
        return _sign_bits(self.dim)

    @cached_property
    def signs(self) -> np.ndarray:
        return (2 * self.bits - 1).astype(float)

    @cached_property
    def increments(self) -> np.ndarray:
        """(2**d, d) Brownian increments, one row per child slot."""
        return self.signs * self.grid.sqrt_dt

    def time(self, level: int) -> float:
        return self.grid.time(level)

    def node_count(self, level: int) -> int:
        self.check_level(level)
        return self.values[level].shape[0]

    def check_level(self, level: int) -> None:
        if not 0 <= level <= self.steps:
            raise DomainError(f"level {level} outside [0, {self.steps}]")

    def probabilities(self, level: int) -> np.ndarray:
        """Probability of each node at `level`."""
        self.check_level(level)
        if self.mode is TreeMode.PATH:
            return np.full(self.node_count(level), 0.5 ** (level * self.dim))
        up = _up_counts(level, self.dim)
        return np.prod(binom.pmf(up, level, 0.5), axis=1)

    def relative_children(self, depth: int) -> np.ndarray:
        """Children of the depth-`depth` nodes of a cone, in cone-relative indices."""
        return self.children[depth]

    def descendants(self, level: int, depth: int) -> np.ndarray:
        """(N_level, M_depth) absolute indices at level+depth of every cone node at `depth`."""
        self.check_level(level + depth)
        key = ("desc", level, depth)
        if key not in self._cache:
            n_start = self.node_count(level)
            if self.mode is TreeMode.PATH:
                width = self.branching**depth
                out = np.arange(n_start)[:, None] * width + np.arange(width)[None, :]
            else:
                start = _up_counts(level, self.dim)
                rel = _up_counts(depth, self.dim)
                total = start[:, None, :] + rel[None, :, :]
                out = np.ravel_multi_index(tuple(np.moveaxis(total, -1, 0)), (level + depth + 1,) * self.dim)
            self._cache[key] = out
        return self._cache[key]

    def path_descendants(self, level: int, depth: int) -> np.ndarray:
        """Like `descendants` but one column per sign sequence, even on recombining trees."""
        if self.mode is TreeMode.PATH:
            return self.descendants(level, depth)
        self.check_level(level + depth)
        key = ("pdesc", level, depth)
        if key not in self._cache:
            counts = np.zeros((1, self.dim), dtype=int)
            for _ in range(depth):
                counts = np.repeat(counts, self.branching, axis=0) + np.tile(self.bits, (counts.shape[0], 1))
            start = _up_counts(level, self.dim)
            total = start[:, None, :] + counts[None, :, :]
            self._cache[key] = np.ravel_multi_index(
                tuple(np.moveaxis(total, -1, 0)), (level + depth + 1,) * self.dim
            )
        return self._cache[key]

    def paths(self, level: int) -> np.ndarray:
        """(N_level, level+1, d) Brownian paths leading to each node."""
        if self.mode is not TreeMode.PATH:
            raise TreeModeError("paths are not recoverable on a recombining tree; use mode='path'")
        self.check_level(level)
        key = ("paths", level)
        if key not in self._cache:
            n = self.node_count(level)
            idx = np.arange(n)
            cols = [self.values[j][idx // self.branching ** (level - j)] for j in range(level + 1)]
            self._cache[key] = np.stack(cols, axis=1)
        return self._cache[key]

    def parents(self, level: int) -> np.ndarray:
        if self.mode is not TreeMode.PATH:
            raise TreeModeError("parents are not unique on a recombining tree")
        if level < 1:
            raise DomainError("the root has no parent")
        return np.arange(self.node_count(level)) // self.branching

    def nodes(self, level: int, index: Optional[np.ndarray] = None) -> "NodeBatch":
        if index is None:
            index = np.arange(self.node_count(level))
        return NodeBatch(self, level, np.asarray(index))


@dataclass(frozen=True, eq=False)
class NodeBatch:
    """Rows of (level, node) handed to generators, terminals and functionals."""

    tree: ScenarioTree
    level: int
    index: np.ndarray

    def __len__(self) -> int:
        return self.index.size

    @property
    def time(self) -> float:
        return self.tree.time(self.level)

    @cached_property
    def brownian(self) -> np.ndarray:
        return self.tree.values[self.level][self.index.reshape(-1)]

    @cached_property
    def paths(self) -> np.ndarray:
        return self.tree.paths(self.level)[self.index.reshape(-1)]

    @cached_property
    def times(self) -> np.ndarray:
        return self.tree.grid.times[: self.level + 1]


@dataclass(frozen=True)
class TreeRandomVariable:
    level: int
    values: np.ndarray

    @classmethod
    def on(cls, tree: ScenarioTree, level: int, values) -> "TreeRandomVariable":
        values = np.asarray(values, dtype=float)
        if values.shape[0] != tree.node_count(level):
            raise DomainError(
                f"random variable has {values.shape[0]} entries, level {level} has {tree.node_count(level)} nodes"
            )
        return cls(level, values)


def build_tree(grid: TimeGrid, dim: int = 1, mode: TreeMode = TreeMode.PATH, path_cap: Optional[int] = None) -> ScenarioTree:
    mode = TreeMode(mode)
    if dim < 1:
        raise DomainError(f"Brownian dimension must be positive, got {dim}")
    cap = get_settings().path_cap if path_cap is None else path_cap
    if mode is TreeMode.PATH and grid.steps * dim > cap:
        raise SizeError(
            f"path tree with n*d = {grid.steps * dim} exceeds the cap n*d <= {cap}", limit=cap
        )

    bits = _sign_bits(dim)
    incr = (2 * bits - 1) * grid.sqrt_dt
    branching = 2**dim
    values = [np.zeros((1, dim))]
    children = []
    for k in range(grid.steps):
        n_k = values[k].shape[0]
        if mode is TreeMode.PATH:
            children.append(np.arange(n_k)[:, None] * branching + np.arange(branching)[None, :])
            values.append(np.repeat(values[k], branching, axis=0) + np.tile(incr, (n_k, 1)))
        else:
            up = _up_counts(k, dim)
            nxt = up[:, None, :] + bits[None, :, :]
            children.append(np.ravel_multi_index(tuple(np.moveaxis(nxt, -1, 0)), (k + 2,) * dim))
            values.append((2 * _up_counts(k + 1, dim) - (k + 1)) * grid.sqrt_dt)

    logger.debug("Built %s tree: T=%s n=%d d=%d, %d leaves", mode.value, grid.horizon, grid.steps, dim, values[-1].shape[0])
    return ScenarioTree(grid, dim, mode, tuple(values), tuple(children))


def one_step_mean(tree: ScenarioTree, level: int, next_values: np.ndarray) -> np.ndarray:
    """E_level[V_{level+1}] for node-indexed values at level+1."""
    ch = tree.children[level]
    acc = next_values[ch[:, 0]].copy()
    for c in range(1, tree.branching):
        acc += next_values[ch[:, c]]
    return acc / tree.branching


def conditional_expectation(tree: ScenarioTree, rv: TreeRandomVariable, target_level: int) -> TreeRandomVariable:
    if not 0 <= target_level <= rv.level:
        raise DomainError(f"target level {target_level} must lie in [0, {rv.level}]")
    if rv.values.shape[0] != tree.node_count(rv.level):
        raise DomainError(f"random variable does not live on level {rv.level} of this tree")
    values = rv.values
    for j in range(rv.level - 1, target_level - 1, -1):
        values = one_step_mean(tree, j, values)
    return TreeRandomVariable(target_level, values)


def riemann_integral(path_values: np.ndarray, dt: float) -> np.ndarray:
    """Left-endpoint integral of h over [0, t_k] from samples h_0..h_k along axis 0."""
    if path_values.shape[0] < 2:
        return np.zeros(path_values.shape[1:])
    return np.sum(path_values[:-1], axis=0) * dt


PathFunctional = Callable[[np.ndarray, np.ndarray], object]


def path_functional(tree: ScenarioTree, level: int, node: int, functional: PathFunctional, markovian: bool = False):
    """Evaluate functional(times, path) on the discrete path to a node.

    On recombining trees only markovian functionals are allowed; they receive
    the single current point.
    """
    if tree.mode is TreeMode.RECOMBINING:
        if not markovian:
            raise TreeModeError("path-dependent functional on a recombining tree; rebuild with mode='path'")
        return functional(np.array([tree.time(level)]), tree.values[level][node][None, :])
    return functional(tree.grid.times[: level + 1], tree.paths(level)[node])


def evaluate_functional(tree: ScenarioTree, level: int, functional: PathFunctional, markovian: bool = False) -> TreeRandomVariable:
    rows = [np.asarray(path_functional(tree, level, i, functional, markovian), dtype=float) for i in range(tree.node_count(level))]
    return TreeRandomVariable(level, np.stack(rows))


def tree_norm(tree: ScenarioTree, level: int, values: np.ndarray) -> float:
    """L2 norm under the node probabilities of `level`."""
    sq = np.asarray(values, dtype=float).reshape(tree.node_count(level), -1) ** 2
    return float(np.sqrt(np.sum(tree.probabilities(level) * np.sum(sq, axis=1))))
