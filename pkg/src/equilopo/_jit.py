"""Optional numba acceleration.

Set ``EQUILOPO_NO_NUMBA=1`` in the environment to force the pure-numpy
kernels. The flag is read once at import time; :func:`use_numba` switches at
runtime (the benchmark uses it to compare both paths in one process).
"""

from __future__ import annotations

import os

try:
    import numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    NUMBA_AVAILABLE = False

_ENV_OFF = os.environ.get("EQUILOPO_NO_NUMBA", "0").strip().lower() in ("1", "true", "yes")
_state = {"enabled": NUMBA_AVAILABLE and not _ENV_OFF}


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, identity decorator otherwise."""
    if NUMBA_AVAILABLE:
        return numba.njit(*args, **kwargs)

    def decorator(func):
        return func

    return decorator


def numba_enabled() -> bool:
    return _state["enabled"]


def use_numba(flag: bool) -> None:
    if flag and not NUMBA_AVAILABLE:
        raise RuntimeError("numba is not installed")
    _state["enabled"] = bool(flag)


def set_threads(n: int) -> None:
    """Limit BLAS thread pools to ``n`` threads.

    The numba kernels are serial, so BLAS is the only source of
    reduction-order nondeterminism; ``n = 1`` makes runs bitwise repeatable.
    """
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(n)
    except ImportError:  # pragma: no cover
        pass
