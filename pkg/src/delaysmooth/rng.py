"""Counter-based random streams and a deterministic Monte Carlo driver.

Every path draws from its own Philox stream keyed by ``(seed, stream)`` with
the path index in the high word of the counter, so a path's noise never
depends on how the ensemble is chunked or how many workers evaluate it.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np

_MASK64 = (1 << 64) - 1
DEFAULT_CHUNK = 4096


def path_generator(seed: int, stream: int, path: int) -> np.random.Generator:
    key = ((int(seed) & _MASK64) << 64) | (int(stream) & _MASK64)
    counter = [0, 0, 0, int(path) & _MASK64]
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def path_normals(seed: int, stream: int, paths: np.ndarray, shape) -> np.ndarray:
    """Standard normals of the given per-path ``shape`` for each path index."""
    paths = np.asarray(paths, dtype=np.int64)
    out = np.empty((paths.size,) + tuple(shape))
    for i, p in enumerate(paths):
        out[i] = path_generator(seed, stream, p).standard_normal(shape)
    return out


@dataclass(frozen=True)
class MCConfig:
    """Monte Carlo settings. ``dt`` of None means the system's tail spacing."""

    paths: int = 10_000
    seed: int = 0
    dt: Optional[float] = None
    threads: int = 1
    chunk: int = DEFAULT_CHUNK

    def __post_init__(self):
        if self.paths < 2:
            raise ValueError("need at least two paths for a standard error")
        if self.threads < 1 or self.chunk < 1:
            raise ValueError("threads and chunk must be positive")


def run_chunks(fn: Callable[[np.ndarray], Dict[str, np.ndarray]], paths: int,
               chunk: int = DEFAULT_CHUNK, threads: int = 1) -> Dict[str, np.ndarray]:
    """Evaluate ``fn`` on consecutive blocks of path indices and concatenate.

    The block layout depends only on ``paths`` and ``chunk``; ``threads`` only
    changes who evaluates a block, so the concatenated arrays are identical
    for every worker count.
    """
    blocks = [np.arange(a, min(a + chunk, paths)) for a in range(0, paths, chunk)]
    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(fn, blocks))
    else:
        parts = [fn(b) for b in blocks]
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


@dataclass(frozen=True)
class Estimate:
    """Sample mean with its standard error."""

    value: float
    se: float
    paths: int

    @classmethod
    def from_samples(cls, samples: np.ndarray) -> "Estimate":
        samples = np.asarray(samples, dtype=float)
        m = samples.size
        mean = float(np.sum(samples) / m)
        var = float(np.sum((samples - mean) ** 2) / (m - 1))
        return cls(mean, float(np.sqrt(var / m)), m)
