"""Kernel backend selection.

The compiled Cython module is used when it imports; otherwise the numpy
implementation takes over. Set ``DITL_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _fallback

BACKEND = "numpy"
_impl = _fallback

if os.environ.get("DITL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback

conv3d_forward = _impl.conv3d_forward
conv3d_backward_input = _impl.conv3d_backward_input
conv3d_backward_weight = _impl.conv3d_backward_weight
