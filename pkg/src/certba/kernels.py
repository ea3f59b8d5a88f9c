"""Backend selection for the per-frame block kernels.

The compiled extension is used when it was built and importable; otherwise
the numpy implementation is used. Setting ``CERTBA_PURE_PYTHON=1`` forces the
numpy path.
"""

import os

from . import _kernels_py as py

try:
    if os.environ.get("CERTBA_PURE_PYTHON", "0") not in ("", "0"):
        raise ImportError("pure python backend requested")
    from . import _kernels_ext as ext
except ImportError:
    ext = None

_impl = ext if ext is not None else py
BACKEND = "cython" if ext is not None else "python"

project_tangent = _impl.project_tangent
weingarten = _impl.weingarten
retract = _impl.retract
dual_blocks = _impl.dual_blocks
frame_moments = _impl.frame_moments

__all__ = [
    "BACKEND",
    "dual_blocks",
    "ext",
    "frame_moments",
    "project_tangent",
    "py",
    "retract",
    "weingarten",
]
