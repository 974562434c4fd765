"""Hot-loop kernels with a compiled (Cython) backend and a pure-Python fallback.

The compiled module is used when it was built at install time. Setting the
environment variable ``SDAC_PURE_PYTHON=1`` forces the fallback.
"""
import os

from . import _pykernels

BACKEND = "python"

if os.environ.get("SDAC_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

project_weighted = _impl.project_weighted
td_lambda_targets = _impl.td_lambda_targets
quantile_loss_grad = _impl.quantile_loss_grad

WEIGHT_FLOOR = _pykernels.WEIGHT_FLOOR

__all__ = [
    "BACKEND",
    "project_weighted",
    "td_lambda_targets",
    "quantile_loss_grad",
    "WEIGHT_FLOOR",
]
