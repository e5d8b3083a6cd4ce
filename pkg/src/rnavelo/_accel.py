"""Optional numba acceleration.

Hot kernels are written twice: a loop version compiled with numba and a
vectorised numpy version.  Set ``RNAVELO_NO_NUMBA=1`` to force the numpy
path (numba is also skipped automatically when it is not installed).
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

DISABLED = os.environ.get("RNAVELO_NO_NUMBA", "").strip().lower() in ("1", "true", "yes")
HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and not DISABLED


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, identity otherwise.

    Functions are always compiled when numba exists (even if the numpy path
    is selected) so tests and benchmarks can compare both implementations.
    """
    if not HAVE_NUMBA:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)
    return numba.njit(*args, **kwargs)


def backend():
    return "numba" if USE_NUMBA else "numpy"
