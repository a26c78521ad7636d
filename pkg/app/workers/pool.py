"""
Worker pool utilities.
Runs independent work items (path shards, table rows, study configs) concurrently
and always hands results back in submission order, so output never depends on
the number of workers.
"""

from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import Executor, ProcessPoolExecutor, ThreadPoolExecutor
from enum import Enum
from typing import Any, TypeVar

from app.core.logging import get_logger

logger = get_logger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class PoolKind(str, Enum):
    """Executor flavour."""
    THREAD = "thread"
    PROCESS = "process"


def _executor(kind: PoolKind, jobs: int) -> Executor:
    if kind == PoolKind.PROCESS:
        return ProcessPoolExecutor(max_workers=jobs)
    return ThreadPoolExecutor(max_workers=jobs)


def map_ordered(
    func: Callable[[T], R],
    items: Iterable[T],
    jobs: int = 1,
    kind: PoolKind = PoolKind.THREAD,
    return_exceptions: bool = False,
) -> list[Any]:
    """
    Apply ``func`` to every item, concurrently when jobs > 1.

    Args:
        func: Work function (must be picklable for process pools)
        items: Work items
        jobs: Maximum concurrent workers; 1 runs inline
        kind: Thread pool for numpy-heavy shards, process pool for whole experiments
        return_exceptions: Place raised exceptions in the result list instead of raising

    Returns:
        Results in the order of ``items``
    """
    work: Sequence[T] = list(items)
    if jobs < 1:
        raise ValueError(f"jobs must be >= 1, got {jobs}")

    if jobs == 1 or len(work) <= 1:
        results: list[Any] = []
        for item in work:
            try:
                results.append(func(item))
            except Exception as e:
                if not return_exceptions:
                    raise
                logger.error(f"Work item failed: {e}")
                results.append(e)
        return results

    workers = min(jobs, len(work))
    logger.debug(f"Dispatching {len(work)} items to {workers} {kind.value} workers")
    with _executor(kind, workers) as executor:
        futures = [executor.submit(func, item) for item in work]
        results = []
        for future in futures:
            try:
                results.append(future.result())
            except Exception as e:
                if not return_exceptions:
                    raise
                logger.error(f"Work item failed: {e}")
                results.append(e)
    return results


def split_range(total: int, chunk: int) -> list[tuple[int, int]]:
    """Split [0, total) into consecutive (start, stop) chunks of at most ``chunk``."""
    if chunk < 1:
        raise ValueError(f"chunk must be >= 1, got {chunk}")
    return [(start, min(start + chunk, total)) for start in range(0, total, chunk)]
