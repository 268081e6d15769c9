"""Deterministic chunked execution.

Work is always split at fixed chunk boundaries that do not depend on the
number of worker threads, and partial results are combined strictly in
chunk order. Together with single-threaded BLAS inside each chunk this
makes results bit-identical for any ``OODEVAL_THREADS`` setting.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

import numpy as np
from threadpoolctl import threadpool_limits

T = TypeVar("T")

ROW_CHUNK = 512


def thread_count() -> int:
    """Worker count from ``OODEVAL_THREADS`` (default 1)."""
    raw = os.environ.get("OODEVAL_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


def chunk_bounds(n: int, chunk: int = ROW_CHUNK) -> list[tuple[int, int]]:
    return [(start, min(start + chunk, n)) for start in range(0, n, chunk)]


def ordered_map(fn: Callable[[int], T], n_tasks: int, threads: int | None = None) -> list[T]:
    """Run ``fn(i)`` for ``i in range(n_tasks)``; results come back in index order."""
    threads = thread_count() if threads is None else threads
    with threadpool_limits(limits=1):
        if threads <= 1 or n_tasks <= 1:
            return [fn(i) for i in range(n_tasks)]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, range(n_tasks)))


def map_rows(
    fn: Callable[..., np.ndarray],
    arrays: Sequence[np.ndarray],
    chunk: int = ROW_CHUNK,
    threads: int | None = None,
) -> np.ndarray:
    """Apply a row-wise ``fn`` over fixed row chunks and concatenate in order."""
    n = arrays[0].shape[0]
    bounds = chunk_bounds(n, chunk)
    if not bounds:
        return fn(*[a[:0] for a in arrays])
    parts = ordered_map(lambda i: fn(*[a[bounds[i][0]:bounds[i][1]] for a in arrays]), len(bounds), threads)
    return np.concatenate(parts, axis=0)


def chunked_sum(
    fn: Callable[[int, int], np.ndarray], n: int, chunk: int = ROW_CHUNK, threads: int | None = None
) -> np.ndarray:
    """Sum ``fn(start, stop)`` over fixed chunks, accumulating left to right."""
    bounds = chunk_bounds(n, chunk)
    parts = ordered_map(lambda i: fn(*bounds[i]), len(bounds), threads)
    total = parts[0].copy()
    for part in parts[1:]:
        total += part
    return total

