"""Backend selection for the im2col / col2im hot loops.

The compiled extension is used when it imports cleanly; setting
``MSDC_PURE_PYTHON=1`` forces the numpy fallback.  Both produce
bit-identical results.
"""
import os

from . import _fallback

BACKEND = "python"
vol2col = _fallback.vol2col
col2vol = _fallback.col2vol

if os.environ.get("MSDC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ext
    except ImportError:  # extension not built
        pass
    else:
        BACKEND = "cython"
        vol2col = _ext.vol2col
        col2vol = _ext.col2vol


def backends():
    """Map of available backend name -> (vol2col, col2vol)."""
    found = {"python": (_fallback.vol2col, _fallback.col2vol)}
    try:
        from . import _ext
    except ImportError:
        return found
    found["cython"] = (_ext.vol2col, _ext.col2vol)
    return found
