"""Row-kernel dispatch.

The compiled extension is used when it imports; otherwise the numpy
reference implementation is used. Set ``LMCAT_PURE_PYTHON=1`` to force the
fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("LMCAT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

softmax_rows = _impl.softmax_rows
softmax_rows_backward = _impl.softmax_rows_backward
log_softmax_rows = _impl.log_softmax_rows
layer_norm_forward = _impl.layer_norm_forward
layer_norm_backward = _impl.layer_norm_backward
gelu_forward = _impl.gelu_forward
gelu_backward = _impl.gelu_backward

__all__ = [
    "BACKEND",
    "softmax_rows",
    "softmax_rows_backward",
    "log_softmax_rows",
    "layer_norm_forward",
    "layer_norm_backward",
    "gelu_forward",
    "gelu_backward",
]
