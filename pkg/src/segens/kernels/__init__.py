"""Kernel backend selection.

The compiled extension (``segens.kernels._native``) is preferred when it
built; otherwise the numpy implementation is used. Override with
``SEGENS_KERNELS=native`` or ``SEGENS_KERNELS=python`` (``auto`` is the
default; forcing ``native`` when the extension is missing is an error).
"""

import os

from . import python_backend

_choice = os.environ.get("SEGENS_KERNELS", "auto").lower()
if _choice not in ("auto", "native", "python"):
    raise ValueError(f"SEGENS_KERNELS must be auto|native|python, got {_choice!r}")

_impl = None
if _choice in ("auto", "native"):
    try:
        from . import _native as _impl
    except ImportError:
        if _choice == "native":
            raise ImportError("SEGENS_KERNELS=native but the compiled extension is not available")
if _impl is None:
    _impl = python_backend

BACKEND = "native" if _impl is not python_backend else "python"

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
maxpool2x2_forward = _impl.maxpool2x2_forward
maxpool2x2_backward = _impl.maxpool2x2_backward
unpool2x2_forward = _impl.unpool2x2_forward
unpool2x2_backward = _impl.unpool2x2_backward
upsample2x_forward = _impl.upsample2x_forward
upsample2x_backward = _impl.upsample2x_backward


def available_backends():
    names = ["python"]
    try:
        from . import _native  # noqa: F401
        names.append("native")
    except ImportError:
        pass
    return names


def get_backend(name: str):
    """Fetch a backend module by name (used by tests and benchmarks)."""
    if name == "python":
        return python_backend
    if name == "native":
        from . import _native
        return _native
    raise ValueError(f"unknown kernel backend {name!r}")
