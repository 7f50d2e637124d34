"""Voxel traversal kernels: compiled extension when built, numpy fallback otherwise.

Set ``TRAJSIM_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

if os.environ.get("TRAJSIM_PURE_PYTHON"):
    from . import _kernels_py as _impl

    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:
        from . import _kernels_py as _impl

        BACKEND = "python"


def forward(vol, origin, voxel_mm, starts, ends, impl=None):
    """Line integrals of a voxel volume along segments ``starts -> ends`` (mm)."""
    impl = impl or _impl
    return impl.forward(
        np.ascontiguousarray(vol, dtype=np.float64),
        tuple(float(o) for o in origin),
        float(voxel_mm),
        np.ascontiguousarray(starts, dtype=np.float64),
        np.ascontiguousarray(ends, dtype=np.float64),
    )


def back(values, shape, origin, voxel_mm, starts, ends, impl=None):
    """Transpose of :func:`forward`."""
    impl = impl or _impl
    return impl.back(
        np.ascontiguousarray(values, dtype=np.float64),
        tuple(int(s) for s in shape),
        tuple(float(o) for o in origin),
        float(voxel_mm),
        np.ascontiguousarray(starts, dtype=np.float64),
        np.ascontiguousarray(ends, dtype=np.float64),
    )
