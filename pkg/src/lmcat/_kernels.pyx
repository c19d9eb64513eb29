# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled row kernels; drop-in twins of ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, erf

cnp.import_array()

ctypedef fused real:
    float
    double

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT_2PI = 0.3989422804014327


def softmax_rows(real[:, ::1] x, double scale):
    cdef Py_ssize_t r, k, rows = x.shape[0], n = x.shape[1]
    out = np.empty((rows, n), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] y = out
    cdef double m, s, v
    with nogil:
        for r in range(rows):
            m = x[r, 0] * scale
            for k in range(1, n):
                v = x[r, k] * scale
                if v > m:
                    m = v
            s = 0.0
            for k in range(n):
                v = exp(x[r, k] * scale - m)
                y[r, k] = <real>v
                s = s + v
            s = 1.0 / s
            for k in range(n):
                y[r, k] = <real>(y[r, k] * s)
    return out


def softmax_rows_backward(real[:, ::1] y, real[:, ::1] g, double scale):
    cdef Py_ssize_t r, k, rows = y.shape[0], n = y.shape[1]
    out = np.empty((rows, n), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] dx = out
    cdef double dot
    with nogil:
        for r in range(rows):
            dot = 0.0
            for k in range(n):
                dot = dot + g[r, k] * y[r, k]
            for k in range(n):
                dx[r, k] = <real>(scale * y[r, k] * (g[r, k] - dot))
    return out


def log_softmax_rows(real[:, ::1] x, double scale):
    cdef Py_ssize_t r, k, rows = x.shape[0], n = x.shape[1]
    out = np.empty((rows, n), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] y = out
    cdef double m, s, v, lse
    with nogil:
        for r in range(rows):
            m = x[r, 0] * scale
            for k in range(1, n):
                v = x[r, k] * scale
                if v > m:
                    m = v
            s = 0.0
            for k in range(n):
                s = s + exp(x[r, k] * scale - m)
            lse = log(s)
            for k in range(n):
                y[r, k] = <real>(x[r, k] * scale - m - lse)
    return out


def layer_norm_forward(real[:, ::1] x, real[::1] gamma, real[::1] beta, double eps):
    cdef Py_ssize_t r, k, rows = x.shape[0], n = x.shape[1]
    dt = np.float32 if real is float else np.float64
    out = np.empty((rows, n), dtype=dt)
    xh = np.empty((rows, n), dtype=dt)
    rs = np.empty(rows, dtype=dt)
    cdef real[:, ::1] y = out
    cdef real[:, ::1] xhat = xh
    cdef real[::1] rstd = rs
    cdef double mu, var, d, inv
    with nogil:
        for r in range(rows):
            mu = 0.0
            for k in range(n):
                mu = mu + x[r, k]
            mu = mu / n
            var = 0.0
            for k in range(n):
                d = x[r, k] - mu
                var = var + d * d
            var = var / n
            inv = 1.0 / sqrt(var + eps)
            rstd[r] = <real>inv
            for k in range(n):
                d = (x[r, k] - mu) * inv
                xhat[r, k] = <real>d
                y[r, k] = <real>(d * gamma[k] + beta[k])
    return out, xh, rs


def layer_norm_backward(real[:, ::1] g, real[:, ::1] xhat, real[::1] rstd, real[::1] gamma):
    cdef Py_ssize_t r, k, rows = g.shape[0], n = g.shape[1]
    dt = np.float32 if real is float else np.float64
    out = np.empty((rows, n), dtype=dt)
    dg = np.zeros(n, dtype=np.float64)
    db = np.zeros(n, dtype=np.float64)
    cdef real[:, ::1] dx = out
    cdef double[::1] dgamma = dg
    cdef double[::1] dbeta = db
    cdef double m1, m2, gx
    with nogil:
        for r in range(rows):
            m1 = 0.0
            m2 = 0.0
            for k in range(n):
                gx = g[r, k] * gamma[k]
                m1 = m1 + gx
                m2 = m2 + gx * xhat[r, k]
                dgamma[k] = dgamma[k] + g[r, k] * xhat[r, k]
                dbeta[k] = dbeta[k] + g[r, k]
            m1 = m1 / n
            m2 = m2 / n
            for k in range(n):
                dx[r, k] = <real>((g[r, k] * gamma[k] - m1 - xhat[r, k] * m2) * rstd[r])
    return out, dg.astype(dt), db.astype(dt)


def gelu_forward(real[:, ::1] x):
    cdef Py_ssize_t r, k, rows = x.shape[0], n = x.shape[1]
    out = np.empty((rows, n), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] y = out
    cdef double v
    with nogil:
        for r in range(rows):
            for k in range(n):
                v = x[r, k]
                y[r, k] = <real>(0.5 * v * (1.0 + erf(v * INV_SQRT2)))
    return out


def gelu_backward(real[:, ::1] x, real[:, ::1] g):
    cdef Py_ssize_t r, k, rows = x.shape[0], n = x.shape[1]
    out = np.empty((rows, n), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] dx = out
    cdef double v
    with nogil:
        for r in range(rows):
            for k in range(n):
                v = x[r, k]
                dx[r, k] = <real>(g[r, k] * (0.5 * (1.0 + erf(v * INV_SQRT2)) + v * INV_SQRT_2PI * exp(-0.5 * v * v)))
    return out
