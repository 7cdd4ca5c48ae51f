#!/usr/bin/env python3
"""
Per-image worker pool.
Results always come back in input order, so output never depends on --jobs.
"""

import logging
import multiprocessing
from typing import Callable, Iterable, List, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def parallel_map(func: Callable[[T], R], items: Iterable[T], jobs: int = 1) -> List[R]:
    """Order-preserving map; `func` must be a picklable module-level callable when jobs > 1."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    processes = min(jobs, len(items))
    logger.debug("Mapping %d items over %d worker processes", len(items), processes)
    with multiprocessing.Pool(processes=processes) as pool:
        return pool.map(func, items, chunksize=max(1, len(items) // (processes * 4)))
