"""Backend selection for the pendulum kernels.

The compiled extension is used when importable; otherwise the NumPy
implementation is used. Set ``DSQP_RTI_BACKEND=python`` to force the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("DSQP_RTI_BACKEND", "").lower() != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "compiled"

pendulum_rhs = _impl.pendulum_rhs
rk4_frozen = _impl.rk4_frozen
rk4_frozen_batch = _impl.rk4_frozen_batch


def get_backend(name=None):
    """Return the kernel module for ``name`` ('python', 'compiled' or None for active)."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "compiled":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown backend {name!r}")
