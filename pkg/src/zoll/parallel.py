"""Worker pool sizing and a chunked parallel map."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor


def worker_count(requested: int | None = None) -> int:
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get("ZOLL_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"ZOLL_WORKERS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def chunked_map(fn, items, workers: int | None = None, chunks: int | None = None):
    """Apply ``fn`` to contiguous chunks of ``items`` and concatenate the result lists.

    Chunks are formed in order and results are reassembled in order, so the
    output does not depend on the worker count.
    """
    items = list(items)
    workers = worker_count(workers)
    if workers == 1 or len(items) < 2:
        return list(fn(items))
    n = chunks or workers
    size = -(-len(items) // n)
    parts = [items[i : i + size] for i in range(0, len(items), size)]
    with ProcessPoolExecutor(workers) as pool:
        out = []
        for res in pool.map(fn, parts):
            out.extend(res)
    return out
