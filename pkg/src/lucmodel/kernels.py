"""Kernel dispatch: the compiled extension when built, else the NumPy fallback.

Set ``LUCMODEL_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"

if os.environ.get("LUCMODEL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
else:
    _impl = _kernels_py

window_counts = _impl.window_counts
grow_region = _impl.grow_region
fuzzy_membership = _impl.fuzzy_membership

__all__ = ["BACKEND", "window_counts", "grow_region", "fuzzy_membership"]
