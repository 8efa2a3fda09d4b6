# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: PCG32 streams, ascending-order matmul, fused fake quantization.

Every routine here has a bit-identical twin in ``_fallback.py``.
"""
from cython.parallel cimport prange
from libc.math cimport sqrt, log, cos, sin, nearbyint
from libc.stdint cimport uint32_t, uint64_t

import numpy as np

cdef uint64_t PCG_MULT = 6364136223846793005ULL
cdef double TWO_PI = 6.283185307179586
cdef double INV_2_32 = 1.0 / 4294967296.0


cdef inline uint32_t _pcg_step(uint64_t* state, uint64_t inc) noexcept nogil:
    cdef uint64_t old = state[0]
    state[0] = old * PCG_MULT + inc
    cdef uint32_t xorshifted = <uint32_t>(((old >> 18) ^ old) >> 27)
    cdef uint32_t rot = <uint32_t>(old >> 59)
    return (xorshifted >> rot) | (xorshifted << ((-rot) & 31))


def pcg32_fill(uint64_t state, uint64_t inc, uint32_t[::1] out):
    cdef Py_ssize_t i
    with nogil:
        for i in range(out.shape[0]):
            out[i] = _pcg_step(&state, inc)
    return state


def pcg32_normals(uint64_t state, uint64_t inc, bint has_pending, double pending,
                  double[::1] out):
    cdef Py_ssize_t i = 0, n = out.shape[0]
    cdef double u1, u2, r, theta
    with nogil:
        if n > 0 and has_pending:
            out[0] = pending
            has_pending = 0
            i = 1
        while i < n:
            u1 = (<double>_pcg_step(&state, inc) + 1.0) * INV_2_32
            u2 = (<double>_pcg_step(&state, inc) + 1.0) * INV_2_32
            r = sqrt(-2.0 * log(u1))
            theta = TWO_PI * u2
            out[i] = r * cos(theta)
            if i + 1 < n:
                out[i + 1] = r * sin(theta)
            else:
                pending = r * sin(theta)
                has_pending = 1
            i += 2
    return state, bool(has_pending), pending


cdef inline void _matmul_row(const double* arow, const double* b, double* orow,
                             Py_ssize_t kk, Py_ssize_t n) noexcept nogil:
    # k unrolled by four; each element still sums left to right in ascending k
    cdef Py_ssize_t j, k = 0
    cdef double a0, a1, a2, a3
    cdef const double* b0
    cdef const double* b1
    cdef const double* b2
    cdef const double* b3
    for j in range(n):
        orow[j] = 0.0
    while k + 4 <= kk:
        a0 = arow[k]
        a1 = arow[k + 1]
        a2 = arow[k + 2]
        a3 = arow[k + 3]
        b0 = b + k * n
        b1 = b0 + n
        b2 = b1 + n
        b3 = b2 + n
        for j in range(n):
            orow[j] = (((orow[j] + a0 * b0[j]) + a1 * b1[j]) + a2 * b2[j]) + a3 * b3[j]
        k += 4
    while k < kk:
        a0 = arow[k]
        b0 = b + k * n
        for j in range(n):
            orow[j] = orow[j] + a0 * b0[j]
        k += 1


def matmul(const double[:, ::1] a, const double[:, ::1] b, double[:, ::1] out,
           int num_threads=1):
    cdef Py_ssize_t m = a.shape[0], kk = a.shape[1], n = b.shape[1]
    cdef Py_ssize_t i
    if num_threads < 1:
        num_threads = 1
    if m == 0 or n == 0:
        return
    if kk == 0:
        out[:, :] = 0.0
        return
    for i in prange(m, nogil=True, num_threads=num_threads, schedule="static"):
        _matmul_row(&a[i, 0], &b[0, 0], &out[i, 0], kk, n)


def quant_dequant_rows(const double[:, ::1] x, const double[::1] scale,
                       const double[::1] zero_point, double pmin, double pmax,
                       double[:, ::1] out, int num_threads=1):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    cdef Py_ssize_t r, c
    cdef double s, z, q
    if num_threads < 1:
        num_threads = 1
    if rows == 0 or cols == 0:
        return
    for r in prange(rows, nogil=True, num_threads=num_threads, schedule="static"):
        s = scale[r]
        z = zero_point[r]
        for c in range(cols):
            q = nearbyint(x[r, c] / s) - z
            if q < pmin:
                q = pmin
            elif q > pmax:
                q = pmax
            out[r, c] = s * (q + z)
