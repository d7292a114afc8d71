"""Process-wide switches read from the environment.

``MODMBRL_NO_JIT=1`` forces the pure-numpy kernels even when numba is
importable. ``MODMBRL_DEBUG=1`` turns on finiteness checks after every
autodiff op.
"""

import os


def _flag(name: str) -> bool:
    return os.environ.get(name, "").strip().lower() in ("1", "true", "yes", "on")


DEBUG = _flag("MODMBRL_DEBUG")

try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_JIT = HAVE_NUMBA and not _flag("MODMBRL_NO_JIT")
