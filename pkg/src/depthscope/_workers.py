import os
from concurrent.futures import ThreadPoolExecutor

THREADS_ENV = "DEPTHSCOPE_THREADS"


def worker_count() -> int:
    cap = os.environ.get(THREADS_ENV)
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            pass
    return n


def map_ordered(fn, items):
    """``[fn(x) for x in items]``, possibly on worker threads; order is preserved."""
    items = list(items)
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
