"""Select the coordinate-descent kernel at import time.

The compiled extension is preferred; set ``MADML_BACKEND=python`` to force the
pure-Python kernel.
"""
import os

from . import _cd_py


def load_kernel(name):
    """Return the ``cd_quadratic`` implementation called ``name``."""
    if name == "python":
        return _cd_py.cd_quadratic
    if name == "compiled":
        from . import _cd

        return _cd.cd_quadratic
    raise ValueError(f"unknown kernel backend {name!r}")


def _select():
    requested = os.environ.get("MADML_BACKEND", "").strip().lower()
    if requested == "python":
        return "python", _cd_py.cd_quadratic
    try:
        return "compiled", load_kernel("compiled")
    except ImportError:
        if requested == "compiled":
            raise
        return "python", _cd_py.cd_quadratic


BACKEND, cd_quadratic = _select()
