"""BLAS thread capping for the numeric hot loops.

The training and sampling loops run many small matrix products, where BLAS
thread fan-out costs more than it buys; they default to one thread. The
``MDM_THREADS`` environment variable overrides the cap.
"""

from __future__ import annotations

import contextlib
import os


def blas_limit():
    """Context manager capping BLAS pools to MDM_THREADS (default 1)."""
    raw = os.environ.get("MDM_THREADS", "")
    try:
        limit = max(1, int(raw)) if raw else 1
    except ValueError:
        limit = 1
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return contextlib.nullcontext()
    return threadpool_limits(limits=limit)
