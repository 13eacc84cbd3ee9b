"""Backend selection for the retrieval kernels.

The compiled extension is used when it imports; set
``WINDTUNNEL_PURE_PYTHON=1`` to force the pure-Python implementation.
"""

import os

from . import _pykernels

if os.environ.get("WINDTUNNEL_PURE_PYTHON"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"

dtw = _impl.dtw
dtw_many = _impl.dtw_many
corr_many = _impl.corr_many

__all__ = ["BACKEND", "dtw", "dtw_many", "corr_many"]
