"""Order-preserving process pool and keyed random streams."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, TypeVar

import numpy as np
from threadpoolctl import threadpool_limits

T = TypeVar("T")
R = TypeVar("R")


def replicate_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, *keys)``.

    Streams depend only on the key, never on scheduling, so results are the
    same for any worker count.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))


def default_workers() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def _init_worker():
    # single-threaded BLAS keeps floating-point reductions identical across pool sizes
    threadpool_limits(1)


def parallel_map(fn: Callable[[T], R], items: Iterable[T], workers: int = 1) -> list[R]:
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        with threadpool_limits(1):
            return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))
