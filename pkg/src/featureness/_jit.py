"""Numba switch.

Set ``FEATURENESS_NO_JIT=1`` to run every hot kernel through its pure-numpy
fallback. Both paths are importable regardless of the flag so tests and the
benchmark can compare them directly.
"""
import functools
import os

try:
    import numba as nb
except ImportError:  # pragma: no cover - numba is a declared dependency
    nb = None

_FLAG = os.environ.get("FEATURENESS_NO_JIT", "").strip().lower()
USE_NUMBA = nb is not None and _FLAG not in ("1", "true", "yes", "on")

if nb is not None:
    njit = functools.partial(nb.njit, cache=True, nogil=True)
else:  # pragma: no cover
    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f


def pick(jitted, fallback):
    """Return the numba kernel unless the fallback path is forced."""
    return jitted if USE_NUMBA else fallback
