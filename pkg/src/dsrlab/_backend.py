"""Kernel backend selection.

The compiled Cython module is preferred; the numpy fallback is used when the
extension is missing or ``DSRLAB_PURE_PYTHON`` is set to a truthy value.
"""

import os

from dsrlab import _pykernels

if os.environ.get("DSRLAB_PURE_PYTHON", "").lower() in ("1", "true", "yes"):
    kernels = _pykernels
    BACKEND = "python"
else:
    try:
        from dsrlab import _ckernels as kernels
        BACKEND = "cython"
    except ImportError:
        kernels = _pykernels
        BACKEND = "python"

__all__ = ["kernels", "BACKEND"]
