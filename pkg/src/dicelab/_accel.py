"""JIT switch for the hot kernels.

Kernels are written once in a numba-compatible subset of Python. When numba is
importable and ``DICELAB_DISABLE_NUMBA`` is unset (or ``0``), they are compiled
with ``numba.njit``; otherwise dispatchers route to the pure-numpy paths.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is optional
    numba = None

HAVE_NUMBA = numba is not None
NUMBA_DISABLED = os.environ.get("DICELAB_DISABLE_NUMBA", "").strip() not in ("", "0")


def use_numba():
    return HAVE_NUMBA and not NUMBA_DISABLED


def jit(fn):
    """Compile ``fn`` with numba when available; return it unchanged otherwise.

    The raw Python function stays reachable as ``fn.py_func`` in both cases, so
    tests can run the interpreted body against the compiled one.
    """
    if not HAVE_NUMBA:
        fn.py_func = fn
        return fn
    return numba.njit(cache=True, nogil=True)(fn)
