"""Kernel backend selection.

Hot loops are written once as plain numpy-compatible Python and compiled with
numba when available. Setting ``LPDNET_DISABLE_NUMBA=1`` selects the pure-numpy
fallback kernels instead (see ``spatial`` and ``features``).
"""
import os

# the bundled TBB is too old for numba; avoid the probe and its warning
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

try:
    import numba
    from numba import njit, prange
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn

    prange = range


def use_numba() -> bool:
    """True when the compiled kernels should be used."""
    if not HAVE_NUMBA:
        return False
    return os.environ.get("LPDNET_DISABLE_NUMBA", "0").lower() not in ("1", "true", "yes")


def set_threads(n: int | None) -> None:
    """Bound numba's worker pool. Kernel results never depend on this value."""
    if n is None or not HAVE_NUMBA:
        return
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
