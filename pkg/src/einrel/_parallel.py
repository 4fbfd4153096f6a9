"""Order-preserving map over worker processes."""

from concurrent.futures import ProcessPoolExecutor


def pmap(fn, items, jobs: int = 1):
    """Apply fn to items; results come back in input order regardless of jobs."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as ex:
        return list(ex.map(fn, items))
