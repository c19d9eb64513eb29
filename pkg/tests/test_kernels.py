"""The compiled row kernels must agree with the numpy reference."""

import numpy as np
import pytest

from lmcat import _kernels_py as ref
from lmcat import kernels

compiled = pytest.importorskip("lmcat._kernels")

TOL = {np.float64: 1e-12, np.float32: 2e-5}


@pytest.fixture(params=[np.float64, np.float32], ids=["f64", "f32"])
def dtype(request):
    return request.param


def _close(a, b, dtype):
    a, b = np.asarray(a), np.asarray(b)
    assert a.dtype == b.dtype == dtype
    assert np.allclose(a, b, rtol=TOL[dtype], atol=TOL[dtype])


def test_backend_selected():
    assert kernels.BACKEND == "cython"


def test_softmax_agrees(dtype, rng):
    x = (rng.standard_normal((7, 13)) * 4).astype(dtype)
    _close(compiled.softmax_rows(x, 0.3), ref.softmax_rows(x, 0.3), dtype)
    _close(compiled.log_softmax_rows(x, 1.7), ref.log_softmax_rows(x, 1.7), dtype)
    y = ref.softmax_rows(x, 0.3)
    g = rng.standard_normal(x.shape).astype(dtype)
    _close(compiled.softmax_rows_backward(y, g, 0.3), ref.softmax_rows_backward(y, g, 0.3), dtype)


def test_layer_norm_agrees(dtype, rng):
    x = (rng.standard_normal((5, 16)) * 3 + 1).astype(dtype)
    gamma = rng.standard_normal(16).astype(dtype)
    beta = rng.standard_normal(16).astype(dtype)
    fwd_c = compiled.layer_norm_forward(x, gamma, beta, 1e-5)
    fwd_r = ref.layer_norm_forward(x, gamma, beta, 1e-5)
    for a, b in zip(fwd_c, fwd_r):
        _close(a, b, dtype)
    g = rng.standard_normal(x.shape).astype(dtype)
    for a, b in zip(compiled.layer_norm_backward(g, fwd_r[1], fwd_r[2], gamma),
                    ref.layer_norm_backward(g, fwd_r[1], fwd_r[2], gamma)):
        _close(a, b, dtype)


def test_gelu_agrees(dtype, rng):
    x = (rng.standard_normal((4, 9)) * 3).astype(dtype)
    g = rng.standard_normal(x.shape).astype(dtype)
    _close(compiled.gelu_forward(x), ref.gelu_forward(x), dtype)
    _close(compiled.gelu_backward(x, g), ref.gelu_backward(x, g), dtype)


def test_softmax_extreme_rows(dtype):
    x = np.array([[1000.0, 0.0, -1000.0], [0.0, 0.0, 0.0]], dtype=dtype)
    _close(compiled.softmax_rows(x, 1.0), ref.softmax_rows(x, 1.0), dtype)


def test_constant_row_layer_norm(dtype):
    x = np.full((2, 4), 3.0, dtype=dtype)
    ones, zeros = np.ones(4, dtype), np.zeros(4, dtype)
    y, _, _ = compiled.layer_norm_forward(x, ones, zeros, 1e-5)
    assert np.array_equal(y, np.zeros_like(x))
