"""
Process-wide worker pool size and an order-preserving parallel map
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

from .errors import ParameterError

logger = logging.getLogger(__name__)

#: Upper bound on the default pool size.
MAX_DEFAULT_THREADS = 8

T = TypeVar("T")
R = TypeVar("R")

_num_threads: Optional[int] = None


def default_num_threads() -> int:
    """Available cores, capped at :data:`MAX_DEFAULT_THREADS`."""
    return max(1, min(os.cpu_count() or 1, MAX_DEFAULT_THREADS))


def set_num_threads(n: Optional[int]) -> None:
    """
    Set the worker-pool size used by every module.

    Args:
        n: Positive thread count, or None to restore the default
    """
    global _num_threads
    if n is not None and n < 1:
        raise ParameterError(f"threads must be >= 1, got {n}")
    _num_threads = n
    logger.debug("Worker threads set to %d", get_num_threads())


def get_num_threads() -> int:
    """Current worker-pool size."""
    return _num_threads if _num_threads is not None else default_num_threads()


def parallel_map(fn: Callable[[T], R], items: Iterable[T]) -> List[R]:
    """
    Apply ``fn`` to every item, preserving input order in the output.

    Runs inline when one thread is configured. Results never depend on the
    thread count because each item is processed independently.
    """
    items = list(items)
    workers = min(get_num_threads(), len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
