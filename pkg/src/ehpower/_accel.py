"""JIT switch shared by every hot kernel.

Kernels are written once in the numpy subset numba understands.  With
``EHPOWER_NUMBA=0`` in the environment (read at import time) they run as
ordinary Python/numpy, and the few loop-heavy helpers swap in vectorized
numpy twins.
"""
import os

_FALSY = {"0", "false", "no", "off"}

USE_NUMBA = os.environ.get("EHPOWER_NUMBA", "1").strip().lower() not in _FALSY

if USE_NUMBA:
    try:
        import numba
    except ImportError:  # pragma: no cover - numba is a hard dependency
        USE_NUMBA = False


def jit(fn):
    """Compile ``fn`` with ``numba.njit`` when enabled, else return it unchanged."""
    if not USE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
