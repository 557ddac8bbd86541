"""Worker-count resolution and order-stable block mapping."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

ENV_THREADS = "PG_LAB_THREADS"


def resolve_threads(threads=0) -> int:
    """Explicit count, else the PG_LAB_THREADS variable, else all cores."""
    threads = 0 if threads is None else int(threads)
    if threads < 0:
        raise ValueError("thread count must be >= 0 (0 means auto)")
    if threads == 0:
        env = os.environ.get(ENV_THREADS, "").strip()
        if env:
            try:
                threads = int(env)
            except ValueError as err:
                raise ValueError(f"{ENV_THREADS} must be an integer, got {env!r}") from err
            if threads < 0:
                raise ValueError(f"{ENV_THREADS} must be >= 0")
    if threads == 0:
        threads = os.cpu_count() or 1
    return threads


def map_blocks(fn, num_blocks: int, threads=1) -> list:
    """[fn(0), ..., fn(num_blocks-1)], possibly computed on a thread pool.

    Results always come back in block order, so any deterministic fn gives
    output independent of the worker count.
    """
    if num_blocks <= 0:
        return []
    workers = min(resolve_threads(threads), num_blocks)
    if workers <= 1:
        return [fn(b) for b in range(num_blocks)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(num_blocks)))
