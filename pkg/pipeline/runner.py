"""
Replica fan-out for the batch pipelines.

Replica jobs are top-level functions called with a tuple of picklable
arguments. With more than one worker they run in a process pool, at most
``workers`` in flight under an asyncio semaphore; results always come back in
submission (seed) order so aggregation is deterministic.
"""
from __future__ import annotations

import asyncio
import time
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Callable, List, Sequence

from loguru import logger


def run_replicas(fn: Callable[..., Any], jobs: Sequence[tuple], workers: int = 1) -> List[Any]:
    """Run ``fn(*args)`` for every tuple in ``jobs``; inline when workers == 1."""
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    if workers == 1 or len(jobs) <= 1:
        return [fn(*args) for args in jobs]
    return asyncio.run(_run_pool(fn, jobs, workers))


async def _run_pool(fn: Callable[..., Any], jobs: Sequence[tuple], workers: int) -> List[Any]:
    started = time.perf_counter()
    logger.info(f"📦 {len(jobs)} replicas of {fn.__name__} (max concurrent: {workers})")
    loop = asyncio.get_running_loop()
    semaphore = asyncio.Semaphore(workers)

    with ProcessPoolExecutor(max_workers=workers) as pool:
        async def run_with_semaphore(args: tuple):
            async with semaphore:
                return await loop.run_in_executor(pool, fn, *args)

        results = await asyncio.gather(*[run_with_semaphore(args) for args in jobs])

    logger.success(f"✅ {len(results)} replicas done in {time.perf_counter() - started:.1f}s")
    return list(results)
