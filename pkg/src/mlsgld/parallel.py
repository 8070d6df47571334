"""Deterministic chunked parallelism.

Work is split into fixed-size chunks of replicate indices.  The chunking is
independent of the worker count, per-replicate randomness comes from keyed
streams, and results are merged in chunk order, so the output is bitwise
identical for any number of threads.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

CHUNK_SIZE = 256


def index_chunks(start: int, stop: int, chunk: int = CHUNK_SIZE):
    """Split [start, stop) into consecutive ranges of at most ``chunk``."""
    return [range(i, min(i + chunk, stop)) for i in range(start, stop, chunk)]


def run_chunked(fn, chunks, threads: int = 1):
    """Apply ``fn`` to every chunk, returning results in chunk order."""
    if threads <= 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, chunks))
