# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused row-wise kernels: layer norm, exact GELU, softmax.

Each row is reduced in a fixed sequential order with double accumulators,
so results do not depend on thread count.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport erf, exp, sqrt

ctypedef fused real:
    float
    double

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT_2PI = 0.3989422804014327


def layer_norm_fwd(real[:, ::1] x, real[::1] scale, real[::1] bias, double eps):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((rows, cols), dtype=dtype)
    xhat_arr = np.empty((rows, cols), dtype=dtype)
    rstd_arr = np.empty(rows, dtype=dtype)
    cdef real[:, ::1] y = y_arr
    cdef real[:, ::1] xhat = xhat_arr
    cdef real[::1] rstd = rstd_arr
    cdef double mean, var, d, r
    with nogil:
        for i in range(rows):
            mean = 0.0
            for j in range(cols):
                mean += x[i, j]
            mean /= cols
            var = 0.0
            for j in range(cols):
                d = x[i, j] - mean
                var += d * d
            var /= cols
            r = 1.0 / sqrt(var + eps)
            rstd[i] = <real>r
            for j in range(cols):
                d = (x[i, j] - mean) * r
                xhat[i, j] = <real>d
                y[i, j] = <real>(d * scale[j] + bias[j])
    return y_arr, xhat_arr, rstd_arr


def layer_norm_bwd(real[:, ::1] dy, real[:, ::1] xhat, real[::1] rstd, real[::1] scale):
    cdef Py_ssize_t rows = dy.shape[0], cols = dy.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.empty((rows, cols), dtype=dtype)
    cdef real[:, ::1] dx = dx_arr
    cdef double[::1] ds = np.zeros(cols, dtype=np.float64)
    cdef double[::1] db = np.zeros(cols, dtype=np.float64)
    cdef double mean_d, mean_dx, g
    with nogil:
        for i in range(rows):
            mean_d = 0.0
            mean_dx = 0.0
            for j in range(cols):
                g = dy[i, j] * scale[j]
                mean_d += g
                mean_dx += g * xhat[i, j]
                ds[j] += dy[i, j] * xhat[i, j]
                db[j] += dy[i, j]
            mean_d /= cols
            mean_dx /= cols
            for j in range(cols):
                g = dy[i, j] * scale[j]
                dx[i, j] = <real>((g - mean_d - xhat[i, j] * mean_dx) * rstd[i])
    return dx_arr, np.asarray(ds).astype(dtype), np.asarray(db).astype(dtype)


def gelu_fwd(real[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty(n, dtype=dtype)
    cdef real[::1] y = y_arr
    cdef double v
    with nogil:
        for i in range(n):
            v = x[i]
            y[i] = <real>(0.5 * v * (1.0 + erf(v * INV_SQRT2)))
    return y_arr


def gelu_bwd(real[::1] x, real[::1] dy):
    cdef Py_ssize_t n = x.shape[0], i
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.empty(n, dtype=dtype)
    cdef real[::1] dx = dx_arr
    cdef double v
    with nogil:
        for i in range(n):
            v = x[i]
            dx[i] = <real>(dy[i] * (0.5 * (1.0 + erf(v * INV_SQRT2))
                                     + v * INV_SQRT_2PI * exp(-0.5 * v * v)))
    return dx_arr


def softmax_fwd(real[:, ::1] x):
    # The exponentials go through numpy's vectorized exp, which beats libm per
    # element; the row max and the normalizing sum stay sequential in double.
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    mx_arr = np.empty(rows, dtype=dtype)
    cdef real[::1] mx = mx_arr
    cdef double total, inv
    with nogil:
        for i in range(rows):
            mx[i] = x[i, 0]
            for j in range(1, cols):
                if x[i, j] > mx[i]:
                    mx[i] = x[i, j]
    y_arr = np.asarray(x) - mx_arr[:, None]
    np.exp(y_arr, out=y_arr)
    cdef real[:, ::1] y = y_arr
    with nogil:
        for i in range(rows):
            total = 0.0
            for j in range(cols):
                total += y[i, j]
            inv = 1.0 / total
            for j in range(cols):
                y[i, j] = <real>(y[i, j] * inv)
    return y_arr


def softmax_bwd(real[:, ::1] y, real[:, ::1] dy):
    cdef Py_ssize_t rows = y.shape[0], cols = y.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.empty((rows, cols), dtype=dtype)
    cdef real[:, ::1] dx = dx_arr
    cdef double inner
    with nogil:
        for i in range(rows):
            inner = 0.0
            for j in range(cols):
                inner += dy[i, j] * y[i, j]
            for j in range(cols):
                dx[i, j] = <real>(y[i, j] * (dy[i, j] - inner))
    return dx_arr
