"""Fixed-size chunking over a thread pool.

Chunk boundaries never depend on the worker count, so results are
bit-identical for any ``threads`` value.
"""
from concurrent.futures import ThreadPoolExecutor

CHUNK = 4096


def chunk_bounds(n, chunk=CHUNK):
    return [(a, min(a + chunk, n)) for a in range(0, n, chunk)]


def map_chunks(fn, n, threads=1, chunk=CHUNK):
    bounds = chunk_bounds(n, chunk)
    if threads <= 1 or len(bounds) <= 1:
        return [fn(a, b) for a, b in bounds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda ab: fn(*ab), bounds))
