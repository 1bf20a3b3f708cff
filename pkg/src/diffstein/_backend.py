"""Backend selection and deterministic block-parallel reductions.

The compiled pair loops are used when the extension imports; otherwise the
NumPy module takes over.  Setting ``DIFFSTEIN_BACKEND=python`` forces the
fallback.  ``STEIN_ESTIM_THREADS`` caps the number of worker threads.

Rows are split into blocks of a fixed size that does not depend on the worker
count, and every block produces per-row results.  Totals are formed with
``math.fsum`` over rows in index order, so results are bit-identical for any
number of workers.
"""

import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import _pairs as _py_pairs

try:
    from . import _pairs_ext as _ext_pairs
except ImportError:  # pragma: no cover - depends on the build
    _ext_pairs = None

BLOCK_ROWS = 64

_local = threading.local()


def _select():
    want = os.environ.get("DIFFSTEIN_BACKEND", "").strip().lower()
    if want == "python" or _ext_pairs is None:
        return "python", _py_pairs
    return "compiled", _ext_pairs


BACKEND_NAME, pairs = _select()


def get_pairs(name=None):
    """Return the pair-loop module by name (``"python"`` or ``"compiled"``)."""
    if name is None:
        return pairs
    if name == "python":
        return _py_pairs
    if name == "compiled":
        if _ext_pairs is None:
            raise ImportError("compiled extension is not built")
        return _ext_pairs
    raise ValueError(f"unknown backend {name!r}")


def compiled_available():
    return _ext_pairs is not None


def worker_count():
    """Workers allowed by ``STEIN_ESTIM_THREADS`` (default: CPU count)."""
    raw = os.environ.get("STEIN_ESTIM_THREADS")
    if raw:
        try:
            val = int(raw)
        except ValueError:
            val = 1
        return max(1, val)
    return max(1, os.cpu_count() or 1)


class _Nested:
    """Marks the current thread as a worker so inner calls run serially."""

    def __enter__(self):
        self.prev = getattr(_local, "inside", False)
        _local.inside = True

    def __exit__(self, *exc):
        _local.inside = self.prev


def in_worker():
    return getattr(_local, "inside", False)


def parallel_map(fn, items, workers=None):
    """Ordered map over ``items``, threaded when allowed and not nested."""
    items = list(items)
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(items) <= 1 or in_worker():
        return [fn(it) for it in items]

    def run(it):
        with _Nested():
            return fn(it)

    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(run, items))


def row_blocks(n):
    return [(r0, min(n, r0 + BLOCK_ROWS)) for r0 in range(0, n, BLOCK_ROWS)]


def blocked_rows(fn, n):
    """Concatenate ``fn(r0, r1)`` over fixed row blocks (computed in parallel)."""
    parts = parallel_map(lambda b: fn(*b), row_blocks(n))
    return np.concatenate(parts, axis=0)


def fsum_rows(rows):
    """Compensated sum over axis 0, elementwise for trailing axes."""
    rows = np.asarray(rows, dtype=float)
    if rows.ndim == 1:
        return math.fsum(rows)
    flat = rows.reshape(rows.shape[0], -1)
    return np.array([math.fsum(flat[:, k]) for k in range(flat.shape[1])]).reshape(rows.shape[1:])
