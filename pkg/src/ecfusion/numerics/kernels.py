"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it was built; otherwise
the numpy fallback is used. Setting ``ECFUSION_PURE_PYTHON=1`` forces the
fallback.
"""
import os

from . import _pykernels

if os.environ.get("ECFUSION_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND = _impl.BACKEND

sample_forward = _impl.sample_forward
sample_backward = _impl.sample_backward
cost_volume_forward = _impl.cost_volume_forward
cost_volume_backward = _impl.cost_volume_backward
local_max = _impl.local_max
linear_assignment = _impl.linear_assignment


def available_backends():
    """Map of backend name -> kernel module, for benchmarks and cross-checks."""
    out = {"numpy": _pykernels}
    try:
        from . import _ckernels
        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
