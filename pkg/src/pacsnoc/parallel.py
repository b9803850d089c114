"""Thread-capped parallel map.

PACSNOC_THREADS caps the worker count (default: the CPU count).  Work items
are independent by construction everywhere this is used; results preserve
input order so reductions stay deterministic.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def max_workers() -> int:
    raw = os.environ.get("PACSNOC_THREADS", "")
    if raw.strip():
        try:
            n = int(raw)
        except ValueError as exc:
            raise ValueError(f"PACSNOC_THREADS must be an integer, got {raw!r}") from exc
        if n < 1:
            raise ValueError("PACSNOC_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def thread_map(fn, items):
    """Ordered map over items, threaded when the cap allows it."""
    items = list(items)
    workers = min(max_workers(), len(items)) or 1
    if workers == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
