"""Thread-pool chunking for nogil kernels.

Each chunk writes a disjoint slice of the output, so results do not depend
on the thread count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def resolve_threads(threads=None) -> int:
    env = os.environ.get("GVS_THREADS")
    if env:
        return max(1, int(env))
    return max(1, int(threads or 1))


def run_chunks(kernel, n, threads=None, min_chunk=64):
    """Call ``kernel(start, stop)`` over ``range(n)`` split across threads."""
    threads = resolve_threads(threads)
    if threads == 1 or n <= min_chunk:
        kernel(0, n)
        return
    step = max(min_chunk, -(-n // threads))
    bounds = [(s, min(n, s + step)) for s in range(0, n, step)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for f in [pool.submit(kernel, a, b) for a, b in bounds]:
            f.result()
