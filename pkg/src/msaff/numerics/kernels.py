"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``MSAFF_KERNELS=python`` to force the fallback.
"""

import os

from . import _pykernels

backend = _pykernels
if os.environ.get("MSAFF_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as backend  # type: ignore[no-redef]
    except ImportError:
        pass

BACKEND = backend.NAME


def available_backends():
    """Return ``{name: module}`` for every importable backend."""
    found = {"python": _pykernels}
    try:
        from . import _ckernels

        found["cython"] = _ckernels
    except ImportError:
        pass
    return found


def conv2d_forward(x, w, stride, padding):
    return backend.conv2d_forward(x, w, stride, padding)


def conv2d_backward(x, w, gy, stride, padding):
    return backend.conv2d_backward(x, w, gy, stride, padding)


def temporal_conv_forward(x, w, padding):
    return backend.temporal_conv_forward(x, w, padding)


def temporal_conv_backward(x, w, gy, padding):
    return backend.temporal_conv_backward(x, w, gy, padding)
