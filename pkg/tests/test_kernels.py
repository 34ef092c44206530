import os
import subprocess
import sys

import numpy as np
import pytest

from decore import _pykernels, kernels

ck = pytest.importorskip("decore._ckernels")


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (1, 2, 0), (3, 2, 1), (2, 1, 0)])
def test_backends_bit_identical(dtype, k, stride, pad):
    x = np.random.default_rng(0).standard_normal((3, 4, 8, 6)).astype(dtype)
    a = _pykernels.im2col(x, k, stride, pad)
    b = ck.im2col(x, k, stride, pad)
    np.testing.assert_array_equal(a, b)
    assert a.dtype == b.dtype == dtype
    cols = np.random.default_rng(1).standard_normal(a.shape).astype(dtype)
    np.testing.assert_array_equal(_pykernels.col2im(cols, x.shape, k, stride, pad),
                                  ck.col2im(cols, x.shape, k, stride, pad))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_maxpool_backends_bit_identical(dtype):
    x = np.random.default_rng(0).integers(0, 3, (2, 3, 6, 4)).astype(dtype)   # many ties
    oa, ia = _pykernels.maxpool2_forward(x)
    ob, ib = ck.maxpool2_forward(x)
    np.testing.assert_array_equal(oa, ob)
    np.testing.assert_array_equal(ia, ib)
    d = np.random.default_rng(2).standard_normal(oa.shape).astype(dtype)
    np.testing.assert_array_equal(_pykernels.maxpool2_backward(d, ia, x.shape), ck.maxpool2_backward(d, ib, x.shape))


def test_compiled_backend_selected():
    assert kernels.BACKEND == "cython"


def test_fallback_forced_by_env():
    env = dict(os.environ, DECORE_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from decore import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_non_contiguous_input():
    x = np.random.default_rng(0).standard_normal((2, 3, 8, 8)).astype(np.float32)[:, :, ::2, :]
    np.testing.assert_array_equal(kernels.im2col(x, 3, 1, 1), _pykernels.im2col(np.ascontiguousarray(x), 3, 1, 1))
