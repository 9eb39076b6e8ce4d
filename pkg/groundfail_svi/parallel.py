"""Chunked thread-pool evaluation over cells."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor, as_completed
from functools import lru_cache
from typing import Callable, List, Optional, TypeVar

from dotenv import find_dotenv, load_dotenv

logger = logging.getLogger(__name__)

T = TypeVar("T")

CHUNK_SIZE = 2048
THREADS_ENV = "GFSVI_THREADS"


@lru_cache(maxsize=None)
def _load_env() -> None:
    load_dotenv(find_dotenv(usecwd=True), override=False)


def worker_count(requested: Optional[int] = None) -> int:
    """Requested count capped by GFSVI_THREADS (read through .env as well)."""
    _load_env()
    count = requested or os.cpu_count() or 1
    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            count = min(count, max(1, int(cap)))
        except ValueError:
            logger.warning("ignoring non-integer %s=%r", THREADS_ENV, cap)
    return max(1, count)


def chunk_slices(n: int, size: int = CHUNK_SIZE) -> List[slice]:
    # boundaries depend only on n, never on the worker count
    return [slice(start, min(start + size, n)) for start in range(0, n, size)]


def map_chunks(
    fn: Callable[[slice], T],
    n: int,
    workers: int = 1,
    ordered: bool = True,
) -> List[T]:
    """Apply fn to each chunk of range(n).

    Results come back in chunk order when ordered, otherwise in completion order.
    """
    slices = chunk_slices(n)
    if workers <= 1 or len(slices) <= 1:
        return [fn(s) for s in slices]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, s) for s in slices]
        if ordered:
            return [f.result() for f in futures]
        return [f.result() for f in as_completed(futures)]
