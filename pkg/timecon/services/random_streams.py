import logging
from typing import List

import numpy as np

logger = logging.getLogger(__name__)

# Paths are drawn in fixed blocks; block b always uses the b-th spawned stream.
BLOCK_SIZE = 1024


def generator(seed: int, *key: int) -> np.random.Generator:
    """Philox generator for `seed`, optionally split by an integer key path."""
    sequence = np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(sequence))


def spawn(seed: int, count: int) -> List[np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(count)
    return [np.random.Generator(np.random.Philox(child)) for child in children]


def gaussian_increments(seed: int, n_paths: int, n_steps: int, dt: float, dim: int = 1) -> np.ndarray:
    """Brownian increments of shape (n_paths, n_steps, dim), independent of how callers chunk paths."""
    n_blocks = -(-n_paths // BLOCK_SIZE)
    streams = spawn(seed, n_blocks)
    out = np.empty((n_blocks * BLOCK_SIZE, n_steps, dim))
    for b, stream in enumerate(streams):
        out[b * BLOCK_SIZE:(b + 1) * BLOCK_SIZE] = stream.standard_normal((BLOCK_SIZE, n_steps, dim))
    logger.debug("Drew %d Gaussian blocks for %d paths", n_blocks, n_paths)
    return out[:n_paths] * np.sqrt(dt)
