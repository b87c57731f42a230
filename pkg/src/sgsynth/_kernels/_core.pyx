# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled Bellman backup kernels: tight loops over the transition kernel
with smallest-index tie-breaking, matching the numpy backend bit-for-bit up
to summation order."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def backup_dense(double[:, ::1] t_matrix, double[::1] v, Py_ssize_t n_states,
                 Py_ssize_t n_u, Py_ssize_t n_w, bint maximize_u):
    cdef Py_ssize_t S = n_states, nu = n_u, nw = n_w, cols = t_matrix.shape[1]
    cdef cnp.ndarray[double, ndim=1] val = np.empty(S)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] u_star = np.empty(S, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=2] w_star = np.empty((S, nu), dtype=np.int64)
    cdef double[::1] val_v = val
    cdef cnp.int64_t[::1] ustar_v = u_star
    cdef cnp.int64_t[:, ::1] wstar_v = w_star
    cdef Py_ssize_t x, u, w, j, row
    cdef double acc, inner, outer
    cdef Py_ssize_t inner_arg, outer_arg
    for x in range(S):
        outer = 0.0
        outer_arg = 0
        for u in range(nu):
            inner = 0.0
            inner_arg = 0
            for w in range(nw):
                row = (x * nu + u) * nw + w
                acc = 0.0
                for j in range(cols):
                    acc += t_matrix[row, j] * v[j]
                if w == 0:
                    inner = acc
                    inner_arg = 0
                elif maximize_u:
                    if acc < inner:
                        inner = acc
                        inner_arg = w
                else:
                    if acc > inner:
                        inner = acc
                        inner_arg = w
            wstar_v[x, u] = inner_arg
            if u == 0:
                outer = inner
                outer_arg = 0
            elif maximize_u:
                if inner > outer:
                    outer = inner
                    outer_arg = u
            else:
                if inner < outer:
                    outer = inner
                    outer_arg = u
        val_v[x] = outer
        ustar_v[x] = outer_arg
    return val, u_star, w_star


def backup_sparse(cnp.int64_t[::1] indptr, cnp.int64_t[::1] indices,
                  double[::1] data, double[::1] truncated, double trunc_value,
                  double[::1] v, Py_ssize_t n_states, Py_ssize_t n_u,
                  Py_ssize_t n_w, bint maximize_u):
    cdef Py_ssize_t S = n_states, nu = n_u, nw = n_w
    cdef cnp.ndarray[double, ndim=1] val = np.empty(S)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] u_star = np.empty(S, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=2] w_star = np.empty((S, nu), dtype=np.int64)
    cdef double[::1] val_v = val
    cdef cnp.int64_t[::1] ustar_v = u_star
    cdef cnp.int64_t[:, ::1] wstar_v = w_star
    cdef Py_ssize_t x, u, w, row
    cdef cnp.int64_t k
    cdef double acc, inner, outer
    cdef Py_ssize_t inner_arg, outer_arg
    for x in range(S):
        outer = 0.0
        outer_arg = 0
        for u in range(nu):
            inner = 0.0
            inner_arg = 0
            for w in range(nw):
                row = (x * nu + u) * nw + w
                acc = truncated[row] * trunc_value
                for k in range(indptr[row], indptr[row + 1]):
                    acc += data[k] * v[indices[k]]
                if w == 0:
                    inner = acc
                    inner_arg = 0
                elif maximize_u:
                    if acc < inner:
                        inner = acc
                        inner_arg = w
                else:
                    if acc > inner:
                        inner = acc
                        inner_arg = w
            wstar_v[x, u] = inner_arg
            if u == 0:
                outer = inner
                outer_arg = 0
            elif maximize_u:
                if inner > outer:
                    outer = inner
                    outer_arg = u
            else:
                if inner < outer:
                    outer = inner
                    outer_arg = u
        val_v[x] = outer
        ustar_v[x] = outer_arg
    return val, u_star, w_star
