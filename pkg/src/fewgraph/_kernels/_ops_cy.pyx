# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the numpy kernels in `_ops_np.py`.

Same signatures, same cache layout; fused loops avoid the temporaries the
numpy path materializes, which pays off on the many small graphs the
training loop builds.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()

DEF LN_EPS = 1e-6


def pairwise_sqdist(double[:, ::1] z):
    cdef Py_ssize_t n = z.shape[0], d = z.shape[1]
    out_arr = np.empty((n, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, k
    cdef double acc, diff
    for i in range(n):
        out[i, i] = 0.0
        for j in range(i + 1, n):
            acc = 0.0
            for k in range(d):
                diff = z[i, k] - z[j, k]
                acc += diff * diff
            out[i, j] = acc
            out[j, i] = acc
    return out_arr


def pairwise_diffs(double[:, ::1] z):
    cdef Py_ssize_t n = z.shape[0], d = z.shape[1]
    out_arr = np.empty((n * n, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, k, row
    for i in range(n):
        for j in range(n):
            row = i * n + j
            for k in range(d):
                out[row, k] = z[i, k] - z[j, k]
    return out_arr


cdef inline double _sigmoid(double x) nogil:
    cdef double ex
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    ex = exp(x)
    return ex / (1.0 + ex)


def edge_mlp_forward(double[:, ::1] x0,
                     double[:, ::1] w1, double[::1] b1, double[::1] g1, double[::1] be1,
                     double[:, ::1] w2, double[::1] b2, double[::1] g2, double[::1] be2,
                     double[::1] w3, double[::1] b3):
    cdef Py_ssize_t p = x0.shape[0], d = x0.shape[1], h = w1.shape[1]
    e_arr = np.empty(p, dtype=np.float64)
    xhat1_arr = np.empty((p, h), dtype=np.float64)
    istd1_arr = np.empty(p, dtype=np.float64)
    h1_arr = np.empty((p, h), dtype=np.float64)
    xhat2_arr = np.empty((p, h), dtype=np.float64)
    istd2_arr = np.empty(p, dtype=np.float64)
    h2_arr = np.empty((p, h), dtype=np.float64)
    cdef double[::1] e = e_arr, istd1 = istd1_arr, istd2 = istd2_arr
    cdef double[:, ::1] xhat1 = xhat1_arr, h1 = h1_arr, xhat2 = xhat2_arr, h2 = h2_arr

    work_arr = np.empty(h, dtype=np.float64)
    cdef double[::1] a = work_arr
    cdef Py_ssize_t r, k, m
    cdef double acc, mu, var, istd, val, s

    with nogil:
        for r in range(p):
            # block 1: affine, normalize, rectify
            for m in range(h):
                acc = b1[m]
                for k in range(d):
                    acc += x0[r, k] * w1[k, m]
                a[m] = acc
            mu = 0.0
            for m in range(h):
                mu += a[m]
            mu /= h
            var = 0.0
            for m in range(h):
                val = a[m] - mu
                var += val * val
            var /= h
            istd = 1.0 / sqrt(var + LN_EPS)
            istd1[r] = istd
            for m in range(h):
                val = (a[m] - mu) * istd
                xhat1[r, m] = val
                val = g1[m] * val + be1[m]
                h1[r, m] = val if val > 0.0 else 0.0

            # block 2
            for m in range(h):
                acc = b2[m]
                for k in range(h):
                    acc += h1[r, k] * w2[k, m]
                a[m] = acc
            mu = 0.0
            for m in range(h):
                mu += a[m]
            mu /= h
            var = 0.0
            for m in range(h):
                val = a[m] - mu
                var += val * val
            var /= h
            istd = 1.0 / sqrt(var + LN_EPS)
            istd2[r] = istd
            for m in range(h):
                val = (a[m] - mu) * istd
                xhat2[r, m] = val
                val = g2[m] * val + be2[m]
                h2[r, m] = val if val > 0.0 else 0.0

            # scalar head, squashed into [0, 1]
            s = b3[0]
            for m in range(h):
                s += h2[r, m] * w3[m]
            e[r] = _sigmoid(s)

    return e_arr, xhat1_arr, istd1_arr, h1_arr, xhat2_arr, istd2_arr, h2_arr
