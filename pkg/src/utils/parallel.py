#!/usr/bin/env python3
"""
Deterministic chunked parallelism.

Kernels split their work into contiguous chunks (row bands, ray ranges,
voxel ranges), run them on a thread pool and reassemble the results in
submission order, so the output never depends on the worker count.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence, Tuple, TypeVar

from src.core.config import get_config
from src.logging.logger_config import log_debug

T = TypeVar("T")
R = TypeVar("R")


def resolve_workers(requested: Optional[int] = None) -> int:
    """Worker count after applying the configured cap and the CPU count."""
    config = get_config()
    workers = requested if requested is not None else config.processing.DEFAULT_WORKERS
    workers = max(config.processing.MIN_WORKERS, min(workers, config.processing.MAX_WORKERS))
    if config.processing.THREAD_CAP is not None:
        workers = min(workers, config.processing.THREAD_CAP)
    return max(1, min(workers, os.cpu_count() or 1))


def split_range(length: int, parts: int) -> List[Tuple[int, int]]:
    """Split [0, length) into at most `parts` contiguous, non-empty (start, stop) chunks."""
    if length <= 0:
        return []
    parts = max(1, min(parts, length))
    bounds = [length * i // parts for i in range(parts + 1)]
    return [(bounds[i], bounds[i + 1]) for i in range(parts) if bounds[i] < bounds[i + 1]]


def chunk_ranges(length: int, chunk_size: int) -> List[Tuple[int, int]]:
    """Fixed-size contiguous chunks of [0, length)."""
    if chunk_size < 1:
        raise ValueError("chunk_size must be at least 1")
    return [(start, min(start + chunk_size, length)) for start in range(0, length, chunk_size)]


class OrderedChunkExecutor:
    """Run a function over chunks and return results in chunk order"""

    def __init__(self, max_workers: Optional[int] = None):
        self.max_workers = resolve_workers(max_workers)

    def map(self, func: Callable[[T], R], chunks: Sequence[T]) -> List[R]:
        """Apply `func` to every chunk; exceptions propagate to the caller."""
        if self.max_workers == 1 or len(chunks) <= 1:
            return [func(chunk) for chunk in chunks]

        log_debug(f"Running {len(chunks)} chunks on {self.max_workers} workers")
        with ThreadPoolExecutor(max_workers=self.max_workers) as executor:
            futures = [executor.submit(func, chunk) for chunk in chunks]
            return [future.result() for future in futures]
