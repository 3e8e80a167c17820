"""Kernel backend selection.

The compiled extension is used when it imports; otherwise, or when
``DTNATIVE_PURE_PYTHON=1`` is set, the pure-Python reference is used.
"""

import os

from . import _kernels_py

try:
    from . import _ckernels as _compiled
except ImportError:  # extension not built
    _compiled = None

CYTHON_AVAILABLE = _compiled is not None
BACKEND = "python"
next_speed = _kernels_py.next_speed
step_vehicles = _kernels_py.step_vehicles

if os.environ.get("DTNATIVE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    if _compiled is not None:
        BACKEND = "cython"
        next_speed = _compiled.next_speed
        step_vehicles = _compiled.step_vehicles


def get_backend(name):
    """Return ``(next_speed, step_vehicles)`` for an explicit backend name."""
    if name == "python":
        return _kernels_py.next_speed, _kernels_py.step_vehicles
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernel extension is not built")
        return _compiled.next_speed, _compiled.step_vehicles
    raise ValueError(f"unknown kernel backend {name!r}")
