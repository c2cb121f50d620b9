"""Optional numba acceleration.

Set ``PIEZOQ_NUMBA=0`` to force the pure-numpy kernels even when numba is
installed. The flag is read once at import time.
"""

import logging
import os

logger = logging.getLogger(__name__)

_requested = os.environ.get("PIEZOQ_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

try:
    if not _requested:
        raise ImportError("disabled by PIEZOQ_NUMBA")
    import numba

    njit = numba.njit
    HAVE_NUMBA = True
except ImportError as exc:  # pragma: no cover - depends on environment
    logger.debug("numba unavailable (%s); using numpy kernels", exc)
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(func):
            return func

        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return wrap


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"
