"""Hot-path kernels with a compiled (numba) and a reference (numpy) backend.

The active backend is chosen once at import time:

* ``PCNAV_NUMBA=0`` (or ``false``) forces the pure-numpy reference path;
* otherwise the numba backend is used when numba imports cleanly, with a
  silent fallback to numpy when it does not.

``get_backend(name)`` returns a specific backend module regardless of the
environment, which is how ``pcnav bench`` times the two implementations
against each other.
"""

from __future__ import annotations

import os

from . import numpy_backend


def _want_numba() -> bool:
    flag = os.environ.get("PCNAV_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


if _want_numba():
    try:
        from . import numba_backend as _impl
        HAS_NUMBA = True
    except ImportError:  # pragma: no cover - depends on host environment
        _impl = numpy_backend
        HAS_NUMBA = False
else:
    _impl = numpy_backend
    HAS_NUMBA = False

BACKEND = _impl.BACKEND
raycast_depth = _impl.raycast_depth
voxel_reduce = _impl.voxel_reduce
nearest_neighbors = _impl.nearest_neighbors
sweep_disk = _impl.sweep_disk


def get_backend(name: str):
    """Return a backend module by name ('numpy' or 'numba')."""
    if name == "numpy":
        return numpy_backend
    if name == "numba":
        from . import numba_backend
        return numba_backend
    raise ValueError(f"unknown kernel backend: {name!r}")


def available_backends() -> list[str]:
    out = ["numpy"]
    try:
        from . import numba_backend  # noqa: F401
        out.append("numba")
    except ImportError:  # pragma: no cover
        pass
    return out
