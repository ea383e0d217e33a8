"""JIT selection for the numeric kernels.

Set ``FRIENDQ_NO_NUMBA=1`` before import to run the pure-numpy paths.
"""
import os

USE_NUMBA = os.environ.get("FRIENDQ_NO_NUMBA", "0").lower() not in ("1", "true", "yes")

if USE_NUMBA:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover
        USE_NUMBA = False

if not USE_NUMBA:

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
