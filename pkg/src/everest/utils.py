"""Small shared helpers."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def worker_count(requested=None):
    """Worker cap: explicit arg, else EVEREST_THREADS, else available cores."""
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get("EVEREST_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def thread_map(fn, items, threads=None):
    """Order-preserving parallel map; falls back to a plain loop at 1 worker.

    Results are collected in input order, so output is deterministic as long
    as fn(item) is a pure function of its item.
    """
    n = worker_count(threads)
    items = list(items)
    if n == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
