"""Kernel backend selection: compiled when available, numpy otherwise.

Set ``VOXATLAS_PURE_PYTHON=1`` to force the numpy kernels.
"""

import os

from . import _warp_py

if os.environ.get("VOXATLAS_PURE_PYTHON") == "1":
    core = _warp_py
else:
    try:
        from . import _warp_c as core
    except ImportError:
        core = _warp_py

NAME = "cython" if core is not _warp_py else "python"
