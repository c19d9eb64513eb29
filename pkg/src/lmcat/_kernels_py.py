"""Pure-numpy reference kernels.

Every function here has a compiled twin in ``_kernels.pyx`` with the same
signature. Inputs are C-contiguous 2D arrays of shape (rows, n); the last axis
is the reduction axis.
"""

import math

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def softmax_rows(x, scale):
    z = x * scale
    z = z - z.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def softmax_rows_backward(y, g, scale):
    dot = (g * y).sum(axis=1, keepdims=True)
    return (scale * y * (g - dot)).astype(y.dtype, copy=False)


def log_softmax_rows(x, scale):
    z = x * scale
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    return z - lse


def layer_norm_forward(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat * gamma + beta
    return y.astype(x.dtype, copy=False), xhat.astype(x.dtype, copy=False), rstd[:, 0].astype(x.dtype)


def layer_norm_backward(g, xhat, rstd, gamma):
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    gx = g * gamma
    m1 = gx.mean(axis=1, keepdims=True)
    m2 = (gx * xhat).mean(axis=1, keepdims=True)
    dx = (gx - m1 - xhat * m2) * rstd[:, None]
    return dx.astype(xhat.dtype, copy=False), dgamma, dbeta


def gelu_forward(x):
    return (0.5 * x * (1.0 + erf(x * _INV_SQRT2))).astype(x.dtype, copy=False)


def gelu_backward(x, g):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return (g * (cdf + x * pdf)).astype(x.dtype, copy=False)
