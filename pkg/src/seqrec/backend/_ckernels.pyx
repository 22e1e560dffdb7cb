# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled row kernels: softmax, layer norm, embedding gather/scatter and the
Adam update. Signatures mirror seqrec.backend.pykernels exactly.

Row reductions accumulate sequentially left to right so that entries holding
an exact 0.0 never perturb the result."""

import numpy as np

cimport cython
cimport numpy as cnp
from libc.math cimport exp, log, sqrt

cnp.import_array()

ctypedef fused real:
    float
    double


def softmax_rows_fwd(const real[:, ::1] x, mask_add=None):
    """Row-wise stable softmax of x (R, C). mask_add, when given, is an
    (M, C) additive float array with R % M == 0; row r uses mask_add[r % M]."""
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t r, c, M = 0
    cdef real m, s, v
    cdef const real[:, ::1] mask
    out_np = np.empty((R, C), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] out = out_np
    if mask_add is None:
        for r in range(R):
            m = x[r, 0]
            for c in range(1, C):
                if x[r, c] > m:
                    m = x[r, c]
            s = 0.0
            for c in range(C):
                v = exp(x[r, c] - m)
                out[r, c] = v
                s = s + v
            for c in range(C):
                out[r, c] = out[r, c] / s
    else:
        mask = mask_add
        M = mask.shape[0]
        for r in range(R):
            m = x[r, 0] + mask[r % M, 0]
            for c in range(1, C):
                v = x[r, c] + mask[r % M, c]
                if v > m:
                    m = v
            s = 0.0
            for c in range(C):
                v = exp(x[r, c] + mask[r % M, c] - m)
                out[r, c] = v
                s = s + v
            for c in range(C):
                out[r, c] = out[r, c] / s
    return out_np


def softmax_rows_bwd(const real[:, ::1] y, const real[:, ::1] dy):
    """dx = y * (dy - sum(y * dy)) per row."""
    cdef Py_ssize_t R = y.shape[0], C = y.shape[1]
    cdef Py_ssize_t r, c
    cdef real dot
    dx_np = np.empty((R, C), dtype=np.asarray(y).dtype)
    cdef real[:, ::1] dx = dx_np
    for r in range(R):
        dot = 0.0
        for c in range(C):
            dot = dot + y[r, c] * dy[r, c]
        for c in range(C):
            dx[r, c] = y[r, c] * (dy[r, c] - dot)
    return dx_np


def layernorm_rows_fwd(const real[:, ::1] x, const real[::1] gain, const real[::1] bias,
                       double eps):
    """Per-row layer norm: y = gain * (x - mean) * rstd + bias with
    rstd = 1/sqrt(var + eps). Returns (y, xhat, rstd) for the backward pass."""
    cdef Py_ssize_t R = x.shape[0], D = x.shape[1]
    cdef Py_ssize_t r, c
    cdef real mean, var, rs, diff
    dtype = np.asarray(x).dtype
    y_np = np.empty((R, D), dtype=dtype)
    xhat_np = np.empty((R, D), dtype=dtype)
    rstd_np = np.empty(R, dtype=dtype)
    cdef real[:, ::1] y = y_np
    cdef real[:, ::1] xhat = xhat_np
    cdef real[::1] rstd = rstd_np
    for r in range(R):
        mean = 0.0
        for c in range(D):
            mean = mean + x[r, c]
        mean = mean / D
        var = 0.0
        for c in range(D):
            diff = x[r, c] - mean
            var = var + diff * diff
        var = var / D
        rs = <real>(1.0 / sqrt(var + eps))
        rstd[r] = rs
        for c in range(D):
            xhat[r, c] = (x[r, c] - mean) * rs
            y[r, c] = gain[c] * xhat[r, c] + bias[c]
    return y_np, xhat_np, rstd_np


def layernorm_rows_bwd(const real[:, ::1] dy, const real[:, ::1] xhat, const real[::1] rstd,
                       const real[::1] gain):
    """Backward of layernorm_rows_fwd. Returns (dx, dgain, dbias)."""
    cdef Py_ssize_t R = dy.shape[0], D = dy.shape[1]
    cdef Py_ssize_t r, c
    cdef real g, m1, m2
    dtype = np.asarray(dy).dtype
    dx_np = np.empty((R, D), dtype=dtype)
    dgain_np = np.zeros(D, dtype=dtype)
    dbias_np = np.zeros(D, dtype=dtype)
    cdef real[:, ::1] dx = dx_np
    cdef real[::1] dgain = dgain_np
    cdef real[::1] dbias = dbias_np
    for r in range(R):
        m1 = 0.0
        m2 = 0.0
        for c in range(D):
            g = dy[r, c] * gain[c]
            m1 = m1 + g
            m2 = m2 + g * xhat[r, c]
        m1 = m1 / D
        m2 = m2 / D
        for c in range(D):
            g = dy[r, c] * gain[c]
            dx[r, c] = rstd[r] * (g - m1 - xhat[r, c] * m2)
            dgain[c] = dgain[c] + dy[r, c] * xhat[r, c]
            dbias[c] = dbias[c] + dy[r, c]
    return dx_np, dgain_np, dbias_np


def gather_rows(const real[:, ::1] table, const cnp.int64_t[::1] idx):
    """out[k] = table[idx[k]]."""
    cdef Py_ssize_t K = idx.shape[0], D = table.shape[1]
    cdef Py_ssize_t k, c, row
    out_np = np.empty((K, D), dtype=np.asarray(table).dtype)
    cdef real[:, ::1] out = out_np
    for k in range(K):
        row = idx[k]
        for c in range(D):
            out[k, c] = table[row, c]
    return out_np


def scatter_add_rows(real[:, ::1] acc, const cnp.int64_t[::1] idx,
                     const real[:, ::1] upd):
    """acc[idx[k]] += upd[k], sequential over k (deterministic)."""
    cdef Py_ssize_t K = idx.shape[0], D = acc.shape[1]
    cdef Py_ssize_t k, c, row
    for k in range(K):
        row = idx[k]
        for c in range(D):
            acc[row, c] = acc[row, c] + upd[k, c]


def adam_update(real[::1] p, const real[::1] g, real[::1] m, real[::1] v,
                double lr, double beta1, double beta2, double eps,
                long t):
    """In-place bias-corrected Adam step on flat arrays (t is 1-based)."""
    cdef Py_ssize_t n = p.shape[0]
    cdef Py_ssize_t i
    cdef double c1 = 1.0 - beta1 ** t
    cdef double c2 = 1.0 - beta2 ** t
    cdef double mh, vh
    for i in range(n):
        m[i] = <real>(beta1 * m[i] + (1.0 - beta1) * g[i])
        v[i] = <real>(beta2 * v[i] + (1.0 - beta2) * g[i] * g[i])
        mh = m[i] / c1
        vh = v[i] / c2
        p[i] = <real>(p[i] - lr * mh / (sqrt(vh) + eps))
