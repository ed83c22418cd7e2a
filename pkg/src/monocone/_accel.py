"""Numba acceleration shim.

Hot numeric kernels are written as plain Python functions over numpy
arrays and compiled with ``numba.njit`` when available.  Set the
environment variable ``MONOCONE_NUMBA=0`` before import to force the
pure-numpy interpreted path (useful for debugging and as a fallback on
platforms without numba).

Compiled kernels keep a reference to their original Python function in
``.py_func`` (numba convention), which the benchmark suite uses to
compare both paths in a single process.
"""

import os

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

_flag = os.environ.get("MONOCONE_NUMBA", "1").strip().lower()
NUMBA_ENABLED = _numba is not None and _flag not in ("0", "off", "false", "no")


def jit_kernel(func):
    """Compile ``func`` with njit, or return it unchanged when disabled."""
    if NUMBA_ENABLED:
        return _numba.njit(cache=True)(func)
    func.py_func = func
    return func
