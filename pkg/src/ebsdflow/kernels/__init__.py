"""Per-sample kernels for the data term and the z-regularizers.

The compiled extension ``_core`` is used when it is importable; otherwise the
vectorized numpy implementation in ``_numpy`` is used.  Setting the
environment variable ``EBSDFLOW_PURE_PYTHON=1`` forces the numpy fallback.
"""

import os

from . import _numpy

if os.environ.get("EBSDFLOW_PURE_PYTHON", "") not in ("", "0"):
    _impl = _numpy
    BACKEND = "numpy"
else:
    try:
        from . import _core as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _numpy
        BACKEND = "numpy"

SENTINEL = _numpy.SENTINEL
sample_offsets = _numpy.sample_offsets
data_cells = _impl.data_cells
data_grad = _impl.data_grad
data_cells_pre = _impl.data_cells_pre
data_grad_pre = _impl.data_grad_pre
target_samples = _impl.target_samples
zreg_cells = _impl.zreg_cells
zreg_grad = _impl.zreg_grad

__all__ = [
    "BACKEND",
    "SENTINEL",
    "sample_offsets",
    "data_cells",
    "data_grad",
    "data_cells_pre",
    "data_grad_pre",
    "target_samples",
    "zreg_cells",
    "zreg_grad",
]
