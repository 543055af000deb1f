"""Backend selection for the hot loops.

The compiled extension is used when it imports; otherwise the numpy
implementation takes over. Setting ``MMISNET_PURE_PYTHON=1`` forces the
numpy path (useful for benchmarking and cross-checking).
"""
import logging
import os

from . import _kernels_py

logger = logging.getLogger(__name__)

_compiled = None
if os.environ.get("MMISNET_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        logger.debug("compiled kernels unavailable; using numpy fallback")
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _kernels_py

im2col = _impl.im2col
col2im = _impl.col2im
maxpool2x2_forward = _impl.maxpool2x2_forward
maxpool2x2_backward = _impl.maxpool2x2_backward
select_similar = _impl.select_similar
blur_last = _impl.blur_last
blur_last_backward = _impl.blur_last_backward
blur_mid = _impl.blur_mid
blur_mid_backward = _impl.blur_mid_backward


def backends():
    """Map of available backend name -> kernel module."""
    found = {"python": _kernels_py}
    if _compiled is not None:
        found["cython"] = _compiled
    return found
