"""Select the compiled kernels when available, otherwise the numpy ones.

Set ``HYBRIDRENDER_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

_impl = _kernels_py
if os.environ.get("HYBRIDRENDER_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _kernels_py

BACKEND = _impl.BACKEND
SOFT_CUTOFF = _kernels_py.SOFT_CUTOFF
raster_tile = _impl.raster_tile
soft_mask_forward = _impl.soft_mask_forward
soft_mask_backward = _impl.soft_mask_backward
mc_shade = _impl.mc_shade


def python_kernels():
    return _kernels_py
