# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled retrieval kernels: DTW distances and Pearson scans."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, sqrt, INFINITY
from libc.stdlib cimport malloc, free

cnp.import_array()


cdef double _dtw(const double[:] a, const double[:] b, Py_ssize_t radius) noexcept nogil:
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0]
    cdef Py_ssize_t i, j, lo, hi, band
    cdef double best, cost
    cdef double* prev = <double*> malloc((m + 1) * sizeof(double))
    cdef double* cur = <double*> malloc((m + 1) * sizeof(double))
    cdef double* tmp
    if radius < 0:
        band = n if n > m else m
    else:
        band = radius
        if n - m > band:
            band = n - m
        if m - n > band:
            band = m - n
    for j in range(m + 1):
        prev[j] = INFINITY
    prev[0] = 0.0
    for i in range(1, n + 1):
        for j in range(m + 1):
            cur[j] = INFINITY
        lo = i - band
        if lo < 1:
            lo = 1
        hi = i + band
        if hi > m:
            hi = m
        for j in range(lo, hi + 1):
            cost = fabs(a[i - 1] - b[j - 1])
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = cost + best
        tmp = prev
        prev = cur
        cur = tmp
    best = prev[m]
    free(prev)
    free(cur)
    return best


def dtw(a, b, Py_ssize_t radius=-1):
    cdef const double[:] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef const double[:] bv = np.ascontiguousarray(b, dtype=np.float64)
    if av.shape[0] == 0 or bv.shape[0] == 0:
        raise ValueError("dtw needs nonempty inputs")
    return _dtw(av, bv, radius)


def dtw_many(a, candidates, Py_ssize_t radius=-1):
    cdef const double[:] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef const double[:, :] cv = np.ascontiguousarray(candidates, dtype=np.float64)
    if av.shape[0] == 0 or cv.shape[1] == 0:
        raise ValueError("dtw needs nonempty inputs")
    cdef Py_ssize_t k, n = cv.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[:] ov = out
    with nogil:
        for k in range(n):
            ov[k] = _dtw(av, cv[k], radius)
    return out


def corr_many(a, candidates):
    """Pearson coefficient of ``a`` with each candidate row; NaN where undefined."""
    cdef const double[:] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef const double[:, :] cv = np.ascontiguousarray(candidates, dtype=np.float64)
    cdef Py_ssize_t n = av.shape[0], k, i, nc = cv.shape[0]
    if cv.shape[1] != n:
        raise ValueError("length mismatch")
    if n < 2:
        raise ValueError("need at least 2 observations")
    out = np.empty(nc, dtype=np.float64)
    cdef double[:] ov = out
    cdef double ma = 0.0, mb, saa = 0.0, sbb, sab, da, db
    with nogil:
        for i in range(n):
            ma += av[i]
        ma /= n
        for i in range(n):
            saa += (av[i] - ma) * (av[i] - ma)
        for k in range(nc):
            mb = 0.0
            for i in range(n):
                mb += cv[k, i]
            mb /= n
            sbb = 0.0
            sab = 0.0
            for i in range(n):
                da = av[i] - ma
                db = cv[k, i] - mb
                sbb += db * db
                sab += da * db
            if saa == 0.0 or sbb == 0.0:
                ov[k] = NAN_VALUE
            else:
                ov[k] = sab / sqrt(saa * sbb)
                if ov[k] > 1.0:
                    ov[k] = 1.0
                elif ov[k] < -1.0:
                    ov[k] = -1.0
    return out


cdef double NAN_VALUE = float("nan")
