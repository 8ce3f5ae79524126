"""Counter-based random streams for reproducible replica fan-out.

Replicas are grouped into fixed-size blocks. Block ``b`` of a run seeded with
``seed`` always draws from a Philox generator keyed by ``(seed, b)``, so the
output of a run depends only on the seed and the replica count, never on the
number of worker threads.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

import numpy as np

BLOCK_SIZE = 2048
DEFAULT_SEED = 20240531

T = TypeVar("T")


def stream(seed: int, key: int = 0) -> np.random.Generator:
    """Philox generator for stream ``key`` of ``seed``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(key)])
    return np.random.Generator(np.random.Philox(ss))


def default_threads() -> int:
    value = os.environ.get("ENVNET_THREADS", "1")
    try:
        return max(1, int(value))
    except ValueError:
        return 1


def blocks(n: int, block_size: int = BLOCK_SIZE) -> list[tuple[int, int]]:
    """Split ``range(n)`` into ``(start, stop)`` pairs of at most ``block_size``."""
    return [(a, min(a + block_size, n)) for a in range(0, n, block_size)]


def map_blocks(
    fn: Callable[[np.random.Generator, int, int], T],
    seed: int,
    n: int,
    *,
    threads: int | None = None,
    block_size: int = BLOCK_SIZE,
    key_offset: int = 0,
) -> list[T]:
    """Run ``fn(rng, start, stop)`` over replica blocks, results in block order."""
    spans = blocks(n, block_size)
    threads = default_threads() if threads is None else max(1, threads)

    def run(i: int) -> T:
        a, b = spans[i]
        return fn(stream(seed, key_offset + i), a, b)

    if threads == 1 or len(spans) <= 1:
        return [run(i) for i in range(len(spans))]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run, range(len(spans))))


def concat(parts: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate(list(parts), axis=0)
