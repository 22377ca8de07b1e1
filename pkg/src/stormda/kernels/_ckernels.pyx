# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the tile blend and ensemble CRPS loops."""
import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, free, qsort
from libc.math cimport fabs

cnp.import_array()


def blend_accumulate(double[:, :, ::1] acc, tile, const double[:, ::1] weight, Py_ssize_t r0, Py_ssize_t c0):
    """In place: ``acc[:, r0:r0+h, c0:c0+w] += weight * tile``."""
    cdef const double[:, :, :] t = np.asarray(tile, dtype=np.float64)
    cdef Py_ssize_t V = acc.shape[0], h = weight.shape[0], w = weight.shape[1]
    cdef Py_ssize_t v, i, j
    if t.shape[0] != V or t.shape[1] != h or t.shape[2] != w:
        raise ValueError("tile and weight shapes disagree")
    if r0 < 0 or c0 < 0 or r0 + h > acc.shape[1] or c0 + w > acc.shape[2]:
        raise ValueError("tile rectangle outside the accumulator")
    with nogil:
        for v in range(V):
            for i in range(h):
                for j in range(w):
                    acc[v, r0 + i, c0 + j] += weight[i, j] * t[v, i, j]


cdef int _cmp(const void* a, const void* b) noexcept nogil:
    cdef double x = (<double*>a)[0], y = (<double*>b)[0]
    return (x > y) - (x < y)


def crps_ensemble(members, obs):
    """Per-column CRPS of an (M, n) ensemble against ``obs`` (n,)."""
    cdef const double[:, :] x = np.asarray(members, dtype=np.float64)
    cdef const double[:] y = np.asarray(obs, dtype=np.float64)
    cdef Py_ssize_t M = x.shape[0], n = x.shape[1], i, k
    if y.shape[0] != n:
        raise ValueError("obs length does not match ensemble columns")
    out = np.empty(n, dtype=np.float64)
    cdef double[:] o = out
    cdef double* buf = <double*>malloc(M * sizeof(double))
    cdef double skill, pair, mm = <double>M * <double>M
    if buf == NULL:
        raise MemoryError()
    try:
        with nogil:
            for k in range(n):
                skill = 0.0
                for i in range(M):
                    buf[i] = x[i, k]
                    skill += fabs(buf[i] - y[k])
                qsort(buf, M, sizeof(double), _cmp)
                pair = 0.0
                for i in range(M):
                    pair += (2.0 * (i + 1) - M - 1.0) * buf[i]
                o[k] = skill / M - pair / mm
    finally:
        free(buf)
    return out
