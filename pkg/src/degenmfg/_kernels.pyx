# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: 1D quantile-coupling transport cost and polynomial design matrices."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def w2_sq_sorted_1d(const double[::1] a, const double[::1] b):
    """Squared W2 between two sorted equal-weight 1D clouds.

    Walks the common refinement of both quantile functions. Breakpoints are
    compared as exact integers (i * nb versus j * na).
    """
    cdef Py_ssize_t na = a.shape[0], nb = b.shape[0]
    cdef Py_ssize_t i = 0, j = 0
    cdef long long ua = 0, ub = 0, u = 0, nxt
    cdef double total = 0.0, diff
    cdef long long scale = <long long>na * <long long>nb
    while i < na and j < nb:
        ua = (i + 1) * <long long>nb
        ub = (j + 1) * <long long>na
        nxt = ua if ua < ub else ub
        diff = a[i] - b[j]
        total += diff * diff * <double>(nxt - u)
        u = nxt
        if ua == nxt:
            i += 1
        if ub == nxt:
            j += 1
    return total / <double>scale


def poly_design(const double[:, ::1] y, const long[:, ::1] exps):
    """Evaluate monomials y**exps row-wise into an (N, m) matrix."""
    cdef Py_ssize_t n_pts = y.shape[0], dim = y.shape[1], m = exps.shape[0]
    cdef Py_ssize_t i, k, c, e, p
    out = np.empty((n_pts, m), dtype=np.float64)
    cdef double[:, ::1] res = out
    cdef double acc, base
    for i in range(n_pts):
        for k in range(m):
            acc = 1.0
            for c in range(dim):
                e = exps[k, c]
                base = y[i, c]
                for p in range(e):
                    acc *= base
            res[i, k] = acc
    return out
