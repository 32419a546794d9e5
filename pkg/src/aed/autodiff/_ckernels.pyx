# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution and pooling kernels.

Mirrors ``_pykernels`` exactly (same shapes, same tie-breaking); the
matrix products stay in BLAS on the Python side.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()

BACKEND = "cython"


def im2col(floating[:, :, :] x, Py_ssize_t k):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t p = k // 2
    cdef Py_ssize_t b, t, c, j, s, row
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((B, L, C * k), dtype=dtype)
    cdef floating[:, :, ::1] o = out
    with nogil:
        for b in range(B):
            for t in range(L):
                for c in range(C):
                    row = c * k
                    for j in range(k):
                        s = t + j - p
                        if s < 0:
                            s = 0
                        elif s >= L:
                            s = L - 1
                        o[b, t, row + j] = x[b, c, s]
    return out


def col2im(floating[:, :, :] dcols, Py_ssize_t channels, Py_ssize_t k):
    cdef Py_ssize_t B = dcols.shape[0], L = dcols.shape[1]
    cdef Py_ssize_t C = channels
    cdef Py_ssize_t p = k // 2
    cdef Py_ssize_t b, t, c, j, s, row
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((B, C, L), dtype=dtype)
    cdef floating[:, :, ::1] dx = out
    with nogil:
        for b in range(B):
            for t in range(L):
                for c in range(C):
                    row = c * k
                    for j in range(k):
                        s = t + j - p
                        if s < 0:
                            s = 0
                        elif s >= L:
                            s = L - 1
                        dx[b, c, s] += dcols[b, t, row + j]
    return out


def maxpool_fwd(floating[:, :, :] x, Py_ssize_t pool):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t n = L // pool
    cdef Py_ssize_t b, c, i, j, base, best
    cdef floating m, v
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((B, C, n), dtype=dtype)
    idx = np.empty((B, C, n), dtype=np.int64)
    cdef floating[:, :, ::1] o = out
    cdef cnp.int64_t[:, :, ::1] ix = idx
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(n):
                    base = i * pool
                    best = base
                    m = x[b, c, base]
                    for j in range(1, pool):
                        v = x[b, c, base + j]
                        if v > m:
                            m = v
                            best = base + j
                    o[b, c, i] = m
                    ix[b, c, i] = best
    return out, idx


def maxpool_bwd(floating[:, :, :] dout, cnp.int64_t[:, :, :] idx, Py_ssize_t length):
    cdef Py_ssize_t B = dout.shape[0], C = dout.shape[1], n = dout.shape[2]
    cdef Py_ssize_t b, c, i
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((B, C, length), dtype=dtype)
    cdef floating[:, :, ::1] dx = out
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(n):
                    dx[b, c, idx[b, c, i]] += dout[b, c, i]
    return out
