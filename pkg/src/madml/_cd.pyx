# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled coordinate descent on an l1-penalised quadratic model.

Mirror of :mod:`madml._cd_py`; both must produce the same iterates up to
floating-point summation order.
"""
from libc.math cimport fabs

import numpy as np


cdef inline double _soft(double z, double t) noexcept nogil:
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


cdef double _sweep(const double[::1, :] Z, const double[::1] h,
                   const double[::1] grad0, const double[::1] beta0,
                   double[::1] beta, const double[::1] lam,
                   const double[::1] hdiag, double mu, double inv_n,
                   double[::1] s, bint active_only, int *unbounded) noexcept nogil:
    cdef Py_ssize_t n = Z.shape[0]
    cdef Py_ssize_t d = Z.shape[1]
    cdef Py_ssize_t i, l
    cdef double g, acc, b_old, b_new, delta, hl, change
    cdef double max_change = 0.0
    for l in range(d):
        if active_only and beta[l] == 0.0:
            continue
        acc = 0.0
        for i in range(n):
            acc = acc + h[i] * Z[i, l] * s[i]
        b_old = beta[l]
        g = grad0[l] + acc * inv_n + mu * (b_old - beta0[l])
        hl = hdiag[l]
        if hl <= 0.0:
            if fabs(g) <= lam[l]:
                b_new = b_old
            else:
                unbounded[0] = 1
                return max_change
        else:
            b_new = _soft(hl * b_old - g, lam[l]) / hl
        delta = b_new - b_old
        if delta != 0.0:
            beta[l] = b_new
            for i in range(n):
                s[i] = s[i] + delta * Z[i, l]
            change = fabs(delta) * hl
            if change > max_change:
                max_change = change
    return max_change


def cd_quadratic(const double[::1, :] Z, const double[::1] h,
                 const double[::1] grad0, const double[::1] beta0,
                 double[::1] beta, const double[::1] lam,
                 double mu, double tol, int max_sweeps):
    """Minimise ``grad0'u + u'(Z'diag(h)Z/n + mu I)u/2 + sum_l lam_l |b_l|``
    over ``b`` with ``u = b - beta0``; ``beta`` is the warm start, updated in
    place.

    Returns ``(sweeps, status)`` with status 0 converged, 1 sweep limit,
    2 unbounded coordinate (zero curvature, gradient above its penalty).
    """
    cdef Py_ssize_t n = Z.shape[0]
    cdef Py_ssize_t d = Z.shape[1]
    cdef Py_ssize_t i, l
    cdef double inv_n = 1.0 / n
    cdef double acc, change
    cdef int sweeps = 0
    cdef int unbounded = 0
    cdef int status = 1
    hdiag_arr = np.empty(d)
    s_arr = np.zeros(n)
    cdef double[::1] hdiag = hdiag_arr
    cdef double[::1] s = s_arr

    with nogil:
        for l in range(d):
            acc = 0.0
            for i in range(n):
                acc = acc + h[i] * Z[i, l] * Z[i, l]
            hdiag[l] = acc * inv_n + mu
            if beta[l] != beta0[l]:
                for i in range(n):
                    s[i] = s[i] + (beta[l] - beta0[l]) * Z[i, l]

        while sweeps < max_sweeps:
            change = _sweep(Z, h, grad0, beta0, beta, lam, hdiag, mu, inv_n,
                            s, False, &unbounded)
            sweeps += 1
            if unbounded:
                status = 2
                break
            if change < tol:
                status = 0
                break
            while sweeps < max_sweeps:
                change = _sweep(Z, h, grad0, beta0, beta, lam, hdiag, mu,
                                inv_n, s, True, &unbounded)
                sweeps += 1
                if unbounded or change < tol:
                    break
            if unbounded:
                status = 2
                break
    return sweeps, status
