"""Order-preserving map over independent replicates."""

from __future__ import annotations

import os
from collections.abc import Callable, Iterable
from concurrent.futures import ProcessPoolExecutor


def default_threads() -> int:
    return os.cpu_count() or 1


def map_ordered(fn: Callable, items: Iterable, threads: int | None = None, chunksize: int = 8) -> list:
    """``[fn(item) for item in items]``, optionally across worker processes.

    ``fn`` and the items must be picklable when ``threads > 1``.  Results
    come back in input order regardless of the number of workers.
    """
    items = list(items)
    threads = default_threads() if threads is None else int(threads)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items, chunksize=chunksize))
