"""Backend selection for the conv/pool kernels.

The compiled extension is used when it imports; otherwise the numpy
implementation is used. Set ``METADG_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py as python_backend

compiled_backend = None
if os.environ.get("METADG_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels_c as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

_active = compiled_backend if compiled_backend is not None else python_backend


def backend_name():
    return "compiled" if _active is compiled_backend and _active is not None else "python"


def use_backend(name):
    """Switch kernels at runtime ("compiled" or "python"); returns the previous name."""
    global _active
    prev = backend_name()
    if name == "compiled":
        if compiled_backend is None:
            raise RuntimeError("compiled kernels are not available in this build")
        _active = compiled_backend
    elif name == "python":
        _active = python_backend
    else:
        raise ValueError(f"unknown backend {name!r}")
    return prev


def conv2d_forward(x, w, stride, pad):
    return _active.conv2d_forward(x, w, stride, pad)


def conv2d_backward_input(g, w, x_shape, stride, pad):
    return _active.conv2d_backward_input(g, w, x_shape, stride, pad)


def conv2d_backward_weight(x, g, w_shape, stride, pad):
    return _active.conv2d_backward_weight(x, g, w_shape, stride, pad)


def maxpool2_forward(x):
    return _active.maxpool2_forward(x)


def pool_gather(x, idx):
    return _active.pool_gather(x, idx)


def pool_scatter(g, idx, in_shape):
    return _active.pool_scatter(g, idx, in_shape)


def standardize_forward(x, scale, shift, eps):
    return _active.standardize_forward(x, scale, shift, eps)


def standardize_backward(g, xhat, inv, scale):
    return _active.standardize_backward(g, xhat, inv, scale)
