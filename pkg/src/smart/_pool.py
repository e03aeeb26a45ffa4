"""Ordered process-pool map; results never depend on the worker count."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor


def ordered_map(fn, items, jobs: int = 1) -> list:
    items = list(items)
    if jobs is None or jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as ex:
        return list(ex.map(fn, items))
