"""Kernel backend selection.

Hot inner loops (batched forward kinematics, the damped-least-squares solve,
and the fused multi-channel operator) have two implementations with identical
signatures: a numba @njit version and a pure-numpy fallback. The environment
variable RODRI_NUMBA selects between them ("0"/"false"/"off" disables numba);
the fallback is also used automatically when numba is not importable.
"""

import os

_FALSEY = {"0", "false", "off", "no"}


def _numba_requested() -> bool:
    return os.environ.get("RODRI_NUMBA", "1").strip().lower() not in _FALSEY


if _numba_requested():
    try:
        from . import _kernels_numba as kernels

        _BACKEND = "numba"
    except ImportError:
        from . import _kernels_numpy as kernels

        _BACKEND = "numpy"
else:
    from . import _kernels_numpy as kernels

    _BACKEND = "numpy"


def backend() -> str:
    """Active kernel backend, "numba" or "numpy"."""
    return _BACKEND


def set_threads(n: int) -> int:
    """Cap the kernel worker pool; returns the thread count in effect."""
    if _BACKEND == "numba":
        import numba

        n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
        numba.set_num_threads(n)
        return n
    return 1


def thread_count() -> int:
    if _BACKEND == "numba":
        import numba

        return numba.get_num_threads()
    return 1
