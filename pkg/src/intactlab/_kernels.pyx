# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels.

Must stay bit-identical to ``_fallback``: same operation order, no fused
multiply-add (built with ``-ffp-contract=off``).
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport copysign, fabs, floor, frexp, ldexp

cnp.import_array()

cdef int SCALE_MANTISSA_BITS = 44


cdef void _matmul_rows(const double* a, const double* b, double* c,
                       Py_ssize_t n, Py_ssize_t k, Py_ssize_t m) noexcept nogil:
    cdef Py_ssize_t i, j, p
    cdef double aip
    cdef const double* brow
    cdef double* crow
    for i in range(n):
        crow = c + i * m
        for p in range(k):
            aip = a[i * k + p]
            brow = b + p * m
            for j in range(m):
                crow[j] = crow[j] + aip * brow[j]


def matmul(a, b):
    """``a @ b`` with each output accumulated over the inner index in order."""
    cdef const double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef const double[:, ::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n = av.shape[0], k = av.shape[1], m = bv.shape[1]
    if bv.shape[0] != k:
        raise ValueError(f"matmul shape mismatch: {n}x{k} @ {bv.shape[0]}x{m}")
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] c = out
    if n == 0 or k == 0 or m == 0:
        return out
    with nogil:
        _matmul_rows(&av[0, 0], &bv[0, 0], &c[0, 0], n, k, m)
    return out


cdef inline double round_half_away(double x) noexcept nogil:
    # callers pass |x| well below 2**53, where the integer cast truncates exactly.
    # Branch-free: random data makes both tests coin flips. May return +0.0 where
    # the fallback has -0.0; every caller adds a zero point or casts to int.
    cdef double t = <double>(<long long>x)
    return t + <double>(fabs(x - t) >= 0.5) * copysign(1.0, x)


cdef double SMALLEST_SCALE = 5e-324


cdef inline double snap_scale(double s) noexcept nogil:
    cdef int e
    cdef double m = frexp(s, &e)
    m = floor(ldexp(m, SCALE_MANTISSA_BITS))
    m = ldexp(m, e - SCALE_MANTISSA_BITS)
    # a subnormal range can underflow to 0; multiples of the smallest double are exact
    if m < SMALLEST_SCALE:
        return SMALLEST_SCALE
    return m


def quantize_groups(const double[:, :] w, int bits, Py_ssize_t group_size, bint symmetric):
    """Group-wise quantization along the last axis.

    Returns ``(codes, scales, zeros)`` with ``codes`` shaped like ``w`` and
    one scale/zero per (row, group).
    """
    cdef Py_ssize_t rows = w.shape[0], cols = w.shape[1]
    cdef Py_ssize_t n_groups = (cols + group_size - 1) // group_size
    cdef Py_ssize_t r, g, j, lo, hi
    cdef double qmax = <double>((1 << bits) - 1)
    cdef double half = <double>(1 << (bits - 1))
    cdef double mn, mx, amax, s, z, x, code

    codes_arr = np.zeros((rows, cols), dtype=np.int64)
    scales_arr = np.ones((rows, n_groups), dtype=np.float64)
    zeros_arr = np.zeros((rows, n_groups), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] codes = codes_arr
    cdef double[:, ::1] scales = scales_arr
    cdef cnp.int64_t[:, ::1] zeros = zeros_arr

    with nogil:
        for r in range(rows):
            for g in range(n_groups):
                lo = g * group_size
                hi = lo + group_size
                if hi > cols:
                    hi = cols
                mn = w[r, lo]
                mx = w[r, lo]
                for j in range(lo + 1, hi):
                    x = w[r, j]
                    if x < mn:
                        mn = x
                    if x > mx:
                        mx = x
                if mx == mn:
                    # constant group: one grid step of size |c| reproduces c exactly
                    if mn == 0.0:
                        s = 1.0
                        z = half if symmetric else 0.0
                        code = z
                    elif mn > 0.0:
                        s = mn
                        z = half if symmetric else 0.0
                        code = z + 1.0
                    else:
                        s = -mn
                        z = half if symmetric else 1.0
                        code = z - 1.0
                    scales[r, g] = s
                    zeros[r, g] = <cnp.int64_t>z
                    for j in range(lo, hi):
                        codes[r, j] = <cnp.int64_t>code
                    continue
                if symmetric:
                    amax = fabs(mn)
                    if fabs(mx) > amax:
                        amax = fabs(mx)
                    s = snap_scale(amax / (half - 1.0))
                    z = half
                else:
                    # range always spans 0 so the zero point lands inside the code set
                    if mn > 0.0:
                        mn = 0.0
                    if mx < 0.0:
                        mx = 0.0
                    s = snap_scale((mx - mn) / qmax)
                    z = round_half_away(-mn / s)
                    if z < 0.0:
                        z = 0.0
                    if z > qmax:
                        z = qmax
                scales[r, g] = s
                zeros[r, g] = <cnp.int64_t>z
                for j in range(lo, hi):
                    code = round_half_away(w[r, j] / s) + z
                    if code < 0.0:
                        code = 0.0
                    if code > qmax:
                        code = qmax
                    codes[r, j] = <cnp.int64_t>code
    return codes_arr, scales_arr, zeros_arr


def dequantize_groups(const cnp.int64_t[:, :] codes, const double[:, :] scales,
                      const cnp.int64_t[:, :] zeros, Py_ssize_t group_size):
    cdef Py_ssize_t rows = codes.shape[0], cols = codes.shape[1]
    cdef Py_ssize_t r, j, g
    out = np.empty((rows, cols), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for r in range(rows):
            for j in range(cols):
                g = j // group_size
                o[r, j] = scales[r, g] * <double>(codes[r, j] - zeros[r, g])
    return out
