# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled row-wise kernels.

Signature-compatible with ``_numpy_impl``; selected at import time by the
package ``__init__``.  Fused types cover float32 and float64.
"""

import numpy as np

cimport cython
from libc.math cimport exp, log, sqrt

ctypedef fused real:
    float
    double


def softmax_rows(real[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    out_np = np.empty((rows, cols), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] out = out_np
    cdef Py_ssize_t i, j
    cdef real m, s
    for i in range(rows):
        m = x[i, 0]
        for j in range(1, cols):
            if x[i, j] > m:
                m = x[i, j]
        s = 0
        for j in range(cols):
            out[i, j] = <real>exp(x[i, j] - m)
            s += out[i, j]
        for j in range(cols):
            out[i, j] /= s
    return out_np


def softmax_rows_backward(real[:, ::1] y, real[:, ::1] dy):
    cdef Py_ssize_t rows = y.shape[0], cols = y.shape[1]
    out_np = np.empty((rows, cols), dtype=np.asarray(y).dtype)
    cdef real[:, ::1] out = out_np
    cdef Py_ssize_t i, j
    cdef real s
    for i in range(rows):
        s = 0
        for j in range(cols):
            s += dy[i, j] * y[i, j]
        for j in range(cols):
            out[i, j] = y[i, j] * (dy[i, j] - s)
    return out_np


def standardize_rows(real[:, ::1] x, double eps):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    dt = np.asarray(x).dtype
    out_np = np.empty((rows, cols), dtype=dt)
    inv_np = np.empty(rows, dtype=dt)
    cdef real[:, ::1] out = out_np
    cdef real[::1] inv = inv_np
    cdef Py_ssize_t i, j
    cdef real mu, var, d, istd
    for i in range(rows):
        mu = 0
        for j in range(cols):
            mu += x[i, j]
        mu /= cols
        var = 0
        for j in range(cols):
            d = x[i, j] - mu
            var += d * d
        var /= cols
        istd = <real>(1.0 / sqrt(var + eps))
        inv[i] = istd
        for j in range(cols):
            out[i, j] = (x[i, j] - mu) * istd
    return out_np, inv_np


def standardize_rows_backward(real[:, ::1] y, real[::1] inv_std, real[:, ::1] dy):
    cdef Py_ssize_t rows = y.shape[0], cols = y.shape[1]
    out_np = np.empty((rows, cols), dtype=np.asarray(y).dtype)
    cdef real[:, ::1] out = out_np
    cdef Py_ssize_t i, j
    cdef real mdy, mdyy
    for i in range(rows):
        mdy = 0
        mdyy = 0
        for j in range(cols):
            mdy += dy[i, j]
            mdyy += dy[i, j] * y[i, j]
        mdy /= cols
        mdyy /= cols
        for j in range(cols):
            out[i, j] = inv_std[i] * (dy[i, j] - mdy - y[i, j] * mdyy)
    return out_np


def cross_entropy_rows(real[:, ::1] logits, long[::1] targets):
    cdef Py_ssize_t rows = logits.shape[0], cols = logits.shape[1]
    dt = np.asarray(logits).dtype
    loss_np = np.empty(rows, dtype=dt)
    probs_np = np.empty((rows, cols), dtype=dt)
    cdef real[::1] loss = loss_np
    cdef real[:, ::1] probs = probs_np
    cdef Py_ssize_t i, j
    cdef real m, z, lse
    for i in range(rows):
        m = logits[i, 0]
        for j in range(1, cols):
            if logits[i, j] > m:
                m = logits[i, j]
        z = 0
        for j in range(cols):
            probs[i, j] = <real>exp(logits[i, j] - m)
            z += probs[i, j]
        for j in range(cols):
            probs[i, j] /= z
        lse = m + <real>log(z)
        loss[i] = lse - logits[i, targets[i]]
    return loss_np, probs_np


def cross_entropy_rows_backward(real[:, ::1] probs, long[::1] targets, real[::1] dloss):
    cdef Py_ssize_t rows = probs.shape[0], cols = probs.shape[1]
    out_np = np.empty((rows, cols), dtype=np.asarray(probs).dtype)
    cdef real[:, ::1] out = out_np
    cdef Py_ssize_t i, j
    for i in range(rows):
        for j in range(cols):
            out[i, j] = probs[i, j] * dloss[i]
        out[i, targets[i]] -= dloss[i]
    return out_np


def adam_update(real[:, ::1] param, real[:, ::1] grad, real[:, ::1] m,
                real[:, ::1] v, double lr, double beta1, double beta2,
                double eps, long t):
    cdef Py_ssize_t rows = param.shape[0], cols = param.shape[1]
    cdef double bc1 = 1.0 - beta1**t
    cdef double bc2 = 1.0 - beta2**t
    cdef Py_ssize_t i, j
    cdef double g, mh, vh
    for i in range(rows):
        for j in range(cols):
            g = grad[i, j]
            m[i, j] = <real>(beta1 * m[i, j] + (1.0 - beta1) * g)
            v[i, j] = <real>(beta2 * v[i, j] + (1.0 - beta2) * g * g)
            mh = m[i, j] / bc1
            vh = v[i, j] / bc2
            param[i, j] -= <real>(lr * mh / (sqrt(vh) + eps))


def embedding_backward(real[:, ::1] dtable, long[::1] ids, real[:, ::1] dy):
    cdef Py_ssize_t n = ids.shape[0], cols = dtable.shape[1]
    cdef Py_ssize_t i, j
    for i in range(n):
        for j in range(cols):
            dtable[ids[i], j] += dy[i, j]
