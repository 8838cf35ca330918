"""Optional numba acceleration.

Set ``PROMPTSEG_DISABLE_NUMBA=1`` to force the pure-numpy kernels, e.g. when
debugging or on platforms without an llvmlite wheel.
"""
import os

_DISABLED = os.environ.get("PROMPTSEG_DISABLE_NUMBA", "0").strip().lower() in ("1", "true", "yes")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _DISABLED


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise a no-op decorator."""
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)
    if args and callable(args[0]):
        return args[0]
    return lambda f: f
