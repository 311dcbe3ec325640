"""Backend selection for the simulation kernels.

The compiled extension is used when it imports; setting ``MFCQ_PURE_PYTHON=1``
forces the NumPy fallback.
"""

import os

from mfcq import _kernels_py

if os.environ.get("MFCQ_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from mfcq import _kernels as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

lq_euler_step = _impl.lq_euler_step
gaussian_actions = _impl.gaussian_actions


def get_backend(name=None):
    """Return the kernel module for ``name`` ("compiled" or "python"); default is the active one."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "compiled":
        from mfcq import _kernels

        return _kernels
    raise ValueError(f"unknown backend {name!r}")
