"""Hot-loop backend selection.

The compiled extension ``decore._ckernels`` is used when it imports; otherwise
the numpy fallback in ``decore._pykernels``. Set ``DECORE_PURE_PYTHON=1`` to
force the fallback.
"""
import os

import numpy as np

from . import _pykernels

try:
    if os.environ.get("DECORE_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("fallback forced by DECORE_PURE_PYTHON")
    from . import _ckernels as _impl
    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"


def _c(a):
    return np.ascontiguousarray(a)


def im2col(x, k, stride, pad):
    return _impl.im2col(_c(x), k, stride, pad)


def col2im(cols, x_shape, k, stride, pad):
    return _impl.col2im(_c(cols), tuple(int(s) for s in x_shape), k, stride, pad)


def maxpool2_forward(x):
    return _impl.maxpool2_forward(_c(x))


def maxpool2_backward(dout, idx, x_shape):
    return _impl.maxpool2_backward(_c(dout), _c(idx), tuple(int(s) for s in x_shape))
