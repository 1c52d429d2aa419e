"""Order-preserving parallel map over independent work items."""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

from src.config import settings
from src.utils.context import get_threads

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def resolve_threads(threads: Optional[int] = None) -> int:
    """Worker count from the argument, the run context or the settings."""
    for candidate in (threads, get_threads(), settings.DEFAULT_THREADS):
        if candidate is not None:
            return max(1, int(candidate))
    return 1


def ordered_map(fn: Callable[[T], R], items: Iterable[T], threads: Optional[int] = None) -> List[R]:
    """Apply ``fn`` to every item, returning results in input order.

    Args:
        fn: Pure function of one work item
        items: Work items
        threads: Worker count override

    Returns:
        List of results aligned with ``items``
    """
    work = list(items)
    workers = min(resolve_threads(threads), max(1, len(work)))
    if workers == 1:
        return [fn(item) for item in work]

    logger.debug(f"Dispatching {len(work)} work items to {workers} threads")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, work))
