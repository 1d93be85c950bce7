# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: nearest-codeword search, CSR products, row scatter-add."""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def nearest(const double[:, ::1] x, const double[:, ::1] codebook):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], k = codebook.shape[0]
    cdef Py_ssize_t r, c, j, best_k
    cdef double s, t, best
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=np.float64)
    cdef cnp.int64_t[::1] idx_v = idx
    cdef double[::1] dist_v = dist
    with nogil:
        for r in range(n):
            best = INFINITY
            best_k = 0
            for c in range(k):
                s = 0.0
                for j in range(m):
                    t = x[r, j] - codebook[c, j]
                    s = s + t * t
                # strict comparison keeps the lowest index on ties
                if s < best:
                    best = s
                    best_k = c
            idx_v[r] = best_k
            dist_v[r] = best
    return idx, dist


def csr_matmul(const cnp.int64_t[::1] indptr, const cnp.int64_t[::1] indices,
               const double[::1] values, const double[:, ::1] x):
    cdef Py_ssize_t n = indptr.shape[0] - 1, m = x.shape[1]
    cdef Py_ssize_t r, p, j, col
    cdef double w
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] out_v = out
    with nogil:
        for r in range(n):
            for p in range(indptr[r], indptr[r + 1]):
                col = indices[p]
                w = values[p]
                for j in range(m):
                    out_v[r, j] = out_v[r, j] + w * x[col, j]
    return out


def index_add(Py_ssize_t n_rows, const cnp.int64_t[::1] index, const double[:, ::1] rows):
    cdef Py_ssize_t n = index.shape[0], m = rows.shape[1]
    cdef Py_ssize_t r, j, dst
    out = np.zeros((n_rows, m), dtype=np.float64)
    cdef double[:, ::1] out_v = out
    with nogil:
        for r in range(n):
            dst = index[r]
            for j in range(m):
                out_v[dst, j] = out_v[dst, j] + rows[r, j]
    return out
