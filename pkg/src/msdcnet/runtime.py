"""Thread control for deterministic runs.

``MSDC_THREADS=1`` pins the BLAS pools to one thread, which together with
the single-threaded compiled kernels makes every run bit-reproducible.
"""
import os

from threadpoolctl import threadpool_limits

_limiter = None


def configure_threads(n=None):
    """Apply ``n`` (or ``$MSDC_THREADS``) as the BLAS thread limit; returns the value used."""
    global _limiter
    if n is None:
        env = os.environ.get("MSDC_THREADS", "").strip()
        if not env:
            return None
        n = int(env)
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    _limiter = threadpool_limits(limits=n)
    return n


def deterministic():
    return os.environ.get("MSDC_THREADS", "").strip() == "1"
