"""Hot interpolation kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly, unless the environment
variable ``DARC_DISABLE_NUMBA`` is set to a truthy value (``1``, ``true``,
``yes``). Both paths take float64 C-contiguous arrays:

* ``field``: ``(C, nx, ny, nz)``
* ``coords``: ``(3, M)`` sample positions in voxel units
* ``upstream``: ``(C, M)`` gradient w.r.t. the sampled values
"""

import os

from . import _numpy

_flag = os.environ.get("DARC_DISABLE_NUMBA", "").strip().lower()

if _flag in ("1", "true", "yes", "on"):
    _impl = _numpy
    BACKEND = "numpy"
else:
    try:
        from . import _numba

        _impl = _numba
        BACKEND = "numba"
    except ImportError:  # pragma: no cover - numba missing
        _impl = _numpy
        BACKEND = "numpy"

trilinear = _impl.trilinear
trilinear_adjoint = _impl.trilinear_adjoint

__all__ = ["BACKEND", "trilinear", "trilinear_adjoint"]
