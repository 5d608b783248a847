# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: stabilized log-sum-exp reductions and the per-row
monotone root solves used for martingale-type multipliers.

Both functions mirror ``otode._pykernels`` (same arguments, same outputs up
to rounding); ``otode.kernels`` picks one of the two at import. The
exponential is inlined so the reduction loops vectorize, which libm's exp
prevents.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport log, fabs, INFINITY, NAN, isfinite
from libc.stdint cimport int64_t
from libc.string cimport memcpy

cnp.import_array()


cdef double _LOG2E = 1.4426950408889634
cdef double _LN2_HI = 0.693147180369123816490
cdef double _LN2_LO = 1.90821492927058770002e-10


cdef inline double _exp_neg(double x) noexcept nogil:
    """exp(x) for x <= 0, branch free so loops over it vectorize.

    Arguments below -700 are clamped (the result, ~1e-304, is negligible
    next to the unit maximum term of a shifted sum). Elsewhere the error is
    a few units in the last place.
    """
    cdef double k, r, p, scale
    cdef int64_t bits
    cdef int ki
    x = x if x > -700.0 else -700.0
    ki = <int>(x * _LOG2E - 0.5)  # truncation toward zero: nearest integer
    k = <double>ki
    r = (x - k * _LN2_HI) - k * _LN2_LO
    p = 1.0 / 479001600.0
    p = p * r + 1.0 / 39916800.0
    p = p * r + 1.0 / 3628800.0
    p = p * r + 1.0 / 362880.0
    p = p * r + 1.0 / 40320.0
    p = p * r + 1.0 / 5040.0
    p = p * r + 1.0 / 720.0
    p = p * r + 1.0 / 120.0
    p = p * r + 1.0 / 24.0
    p = p * r + 1.0 / 6.0
    p = p * r + 0.5
    p = p * r + 1.0
    p = p * r + 1.0
    bits = (<int64_t>(ki + 1023)) << 52
    memcpy(&scale, &bits, 8)
    return p * scale


cdef inline double _row_max(const double* p, Py_ssize_t n, double m) noexcept nogil:
    cdef Py_ssize_t c
    for c in range(n):
        if p[c] > m:
            m = p[c]
    return m


cdef inline double _row_sumexp(const double* p, Py_ssize_t n, double m,
                               double* buf) noexcept nogil:
    # element-wise map into buf vectorizes; the sum stays in order
    cdef Py_ssize_t c
    cdef double s = 0.0
    for c in range(n):
        buf[c] = _exp_neg(p[c] - m)
    for c in range(n):
        s += buf[c]
    return s


def lse_mid(const double[:, :, ::1] X):
    """log sum_{a, c} exp(X[a, b, c]) for every b."""
    cdef Py_ssize_t A = X.shape[0], B = X.shape[1], C = X.shape[2]
    cdef Py_ssize_t a, b
    out = np.empty(B, dtype=np.float64)
    cdef double[::1] o = out
    cdef double[::1] mx = np.full(B, -INFINITY)
    cdef double[::1] acc = np.zeros(B)
    cdef double[::1] scratch = np.empty(max(C, 1))
    if A == 0 or B == 0 or C == 0:
        out[:] = -np.inf
        return out
    cdef const double* base = &X[0, 0, 0]
    with nogil:
        for a in range(A):
            for b in range(B):
                mx[b] = _row_max(base + (a * B + b) * C, C, mx[b])
        for a in range(A):
            for b in range(B):
                if mx[b] != -INFINITY:
                    acc[b] += _row_sumexp(base + (a * B + b) * C, C, mx[b], &scratch[0])
        for b in range(B):
            if mx[b] == -INFINITY:
                o[b] = -INFINITY
            else:
                o[b] = mx[b] + log(acc[b])
    return out


cdef inline void _eval_row(const double[:, ::1] X, const double[:, ::1] F,
                           Py_ssize_t i, double t, double* h, double* dh) noexcept nogil:
    # h, dh are scaled by exp(-max); only their ratio and sign are used
    cdef Py_ssize_t j, k = X.shape[1]
    cdef double m = -INFINITY, v, e, f
    for j in range(k):
        v = X[i, j] + t * F[i, j]
        if v > m:
            m = v
    h[0] = 0.0
    dh[0] = 0.0
    for j in range(k):
        f = F[i, j]
        e = _exp_neg(X[i, j] + t * f - m)
        h[0] += e * f
        dh[0] += e * f * f


def root_rows(const double[:, ::1] X, const double[:, ::1] F,
              double tol=1e-12, int newton_max=50, int bisect_max=200):
    """Solve sum_j exp(X[i, j] + t_i F[i, j]) F[i, j] = 0 for each row i.

    The left side is strictly increasing in t_i whenever row i of F is not
    identically zero. Rows whose F has one strict sign have no root and get
    NaN; rows with F == 0 get 0.
    """
    cdef Py_ssize_t n = X.shape[0], k = X.shape[1]
    cdef Py_ssize_t i, j
    cdef int it
    cdef bint has_pos, has_neg, done
    cdef double t, h, dh, step, lo, hi, mid, width
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            has_pos = False
            has_neg = False
            for j in range(k):
                if isfinite(X[i, j]):
                    if F[i, j] > 0:
                        has_pos = True
                    elif F[i, j] < 0:
                        has_neg = True
            if not has_pos and not has_neg:
                o[i] = 0.0
                continue
            if not (has_pos and has_neg):
                o[i] = NAN
                continue
            t = 0.0
            lo = -INFINITY
            hi = INFINITY
            done = False
            for it in range(newton_max):
                _eval_row(X, F, i, t, &h, &dh)
                if h == 0.0:
                    done = True
                    break
                if h < 0:
                    lo = t
                else:
                    hi = t
                step = h / dh
                if fabs(step) <= tol * (1.0 + fabs(t)):
                    t -= step
                    done = True
                    break
                t -= step
                if t <= lo or t >= hi:
                    if isfinite(lo) and isfinite(hi):
                        t = 0.5 * (lo + hi)
            if not done:
                # expanding bracket then bisection
                width = 1.0
                while not isfinite(lo):
                    _eval_row(X, F, i, hi - width, &h, &dh)
                    if h < 0:
                        lo = hi - width
                    else:
                        hi = hi - width
                        width *= 2.0
                while not isfinite(hi):
                    _eval_row(X, F, i, lo + width, &h, &dh)
                    if h > 0:
                        hi = lo + width
                    else:
                        lo = lo + width
                        width *= 2.0
                for it in range(bisect_max):
                    mid = 0.5 * (lo + hi)
                    _eval_row(X, F, i, mid, &h, &dh)
                    if h < 0:
                        lo = mid
                    else:
                        hi = mid
                    if hi - lo <= tol * (1.0 + fabs(mid)):
                        break
                t = 0.5 * (lo + hi)
            o[i] = t
    return out
