# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled single-pass kernels (hot-loop twin of ``_kernels_py``).

Each function computes exactly the same quantity as its numpy twin; the win
is one fused C pass instead of a chain of temporaries, which matters at the
small row sizes this package trains at.
"""

from libc.math cimport erf, exp, sqrt, pow

import numpy as np

ctypedef fused floating:
    float
    double

cdef double _INV_SQRT2 = 0.7071067811865476
cdef double _INV_SQRT2PI = 0.3989422804014327


def layer_norm_fwd(floating[:, ::1] x, floating[::1] gamma, floating[::1] beta, double eps):
    cdef Py_ssize_t rows = x.shape[0], d = x.shape[1], i, j
    cdef double acc, mu, var, rs
    dtype = np.float32 if floating is float else np.float64
    out_np = np.empty((rows, d), dtype=dtype)
    mean_np = np.empty(rows, dtype=dtype)
    rstd_np = np.empty(rows, dtype=dtype)
    cdef floating[:, ::1] out = out_np
    cdef floating[::1] mean = mean_np
    cdef floating[::1] rstd = rstd_np
    for i in range(rows):
        acc = 0.0
        for j in range(d):
            acc += x[i, j]
        mu = acc / d
        acc = 0.0
        for j in range(d):
            acc += (x[i, j] - mu) * (x[i, j] - mu)
        var = acc / d
        rs = 1.0 / sqrt(var + eps)
        mean[i] = <floating> mu
        rstd[i] = <floating> rs
        for j in range(d):
            out[i, j] = <floating> (((x[i, j] - mu) * rs) * gamma[j] + beta[j])
    return out_np, mean_np, rstd_np


def layer_norm_bwd(floating[:, ::1] g, floating[:, ::1] x, floating[::1] gamma,
                   floating[::1] mean, floating[::1] rstd):
    cdef Py_ssize_t rows = x.shape[0], d = x.shape[1], i, j
    cdef double m1, m2, gg, xh
    dtype = np.float32 if floating is float else np.float64
    dx_np = np.empty((rows, d), dtype=dtype)
    dgamma_np = np.zeros(d, dtype=dtype)
    dbeta_np = np.zeros(d, dtype=dtype)
    cdef floating[:, ::1] dx = dx_np
    cdef floating[::1] dgamma = dgamma_np
    cdef floating[::1] dbeta = dbeta_np
    for i in range(rows):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            xh = (x[i, j] - mean[i]) * rstd[i]
            gg = g[i, j] * gamma[j]
            m1 += gg
            m2 += gg * xh
            dgamma[j] += <floating> (g[i, j] * xh)
            dbeta[j] += g[i, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            xh = (x[i, j] - mean[i]) * rstd[i]
            gg = g[i, j] * gamma[j]
            dx[i, j] = <floating> (rstd[i] * (gg - m1 - xh * m2))
    return dx_np, dgamma_np, dbeta_np


def softmax_fwd(floating[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    cdef double mx, acc
    dtype = np.float32 if floating is float else np.float64
    p_np = np.empty((rows, n), dtype=dtype)
    cdef floating[:, ::1] p = p_np
    for i in range(rows):
        mx = x[i, 0]
        for j in range(1, n):
            if x[i, j] > mx:
                mx = x[i, j]
        acc = 0.0
        for j in range(n):
            p[i, j] = <floating> exp(x[i, j] - mx)
            acc += p[i, j]
        for j in range(n):
            p[i, j] = <floating> (p[i, j] / acc)
    return p_np


def softmax_bwd(floating[:, ::1] g, floating[:, ::1] p):
    cdef Py_ssize_t rows = p.shape[0], n = p.shape[1], i, j
    cdef double inner
    dtype = np.float32 if floating is float else np.float64
    dx_np = np.empty((rows, n), dtype=dtype)
    cdef floating[:, ::1] dx = dx_np
    for i in range(rows):
        inner = 0.0
        for j in range(n):
            inner += g[i, j] * p[i, j]
        for j in range(n):
            dx[i, j] = <floating> (p[i, j] * (g[i, j] - inner))
    return dx_np


def gelu_fwd(floating[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    dtype = np.float32 if floating is float else np.float64
    y_np = np.empty(n, dtype=dtype)
    cdef floating[::1] y = y_np
    for i in range(n):
        y[i] = <floating> (0.5 * x[i] * (1.0 + erf(x[i] * _INV_SQRT2)))
    return y_np


def gelu_bwd(floating[::1] g, floating[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    cdef double cdf, phi
    dtype = np.float32 if floating is float else np.float64
    dx_np = np.empty(n, dtype=dtype)
    cdef floating[::1] dx = dx_np
    for i in range(n):
        cdf = 0.5 * (1.0 + erf(x[i] * _INV_SQRT2))
        phi = _INV_SQRT2PI * exp(-0.5 * x[i] * x[i])
        dx[i] = <floating> (g[i] * (cdf + x[i] * phi))
    return dx_np


def adamw_update(floating[::1] p, floating[::1] g, floating[::1] m, floating[::1] v,
                 double lr, double beta1, double beta2, double eps,
                 double weight_decay, long step):
    cdef Py_ssize_t n = p.shape[0], i
    cdef double c1 = 1.0 - pow(beta1, step)
    cdef double c2 = 1.0 - pow(beta2, step)
    cdef double decay = 1.0 - lr * weight_decay
    cdef double mi, vi
    for i in range(n):
        p[i] = <floating> (p[i] * decay)
        mi = beta1 * m[i] + (1.0 - beta1) * g[i]
        vi = beta2 * v[i] + (1.0 - beta2) * (g[i] * g[i])
        m[i] = <floating> mi
        v[i] = <floating> vi
        p[i] = <floating> (p[i] - lr * (mi / c1) / (sqrt(vi / c2) + eps))
