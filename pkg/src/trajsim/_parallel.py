import os
from concurrent.futures import ThreadPoolExecutor


def worker_count() -> int:
    """Worker cap from TRAJSIM_THREADS (default: 1)."""
    raw = os.environ.get("TRAJSIM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"TRAJSIM_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def ordered_map(fn, items):
    """Map preserving input order; results are written by index, never by completion."""
    items = list(items)
    n = worker_count()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
