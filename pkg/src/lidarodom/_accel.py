"""Numba switch.

Hot kernels are written twice: a vectorised numpy version and a loop version
compiled with ``numba.njit``. ``LIDARODOM_NUMBA=0`` in the environment (read
at import time) selects the numpy versions everywhere.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

_FLAG = os.environ.get("LIDARODOM_NUMBA", "1").strip().lower()
USE_NUMBA = numba is not None and _FLAG not in ("0", "false", "no", "off")


def njit(func):
    """Compile ``func`` in nopython mode when numba is available.

    The decorated object always exposes ``.py_func`` so tests can run the
    interpreted loop version against the compiled one.
    """
    if numba is None:
        func.py_func = func
        return func
    return numba.njit(cache=True, nogil=True)(func)


def pick(jit_impl, numpy_impl):
    return jit_impl if USE_NUMBA else numpy_impl


def set_threads(n):
    """Limit the BLAS thread pool to ``n`` threads (a context manager).

    The compiled kernels are serial, so numba's own pool is left alone.
    """
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)
