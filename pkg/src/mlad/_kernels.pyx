# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: cyclic Jacobi sweeps and 1-D two-component EM.

Semantics match :mod:`mlad._pykernels` exactly; only the loop mechanics differ.
"""
import numpy as np

from libc.math cimport sqrt, fabs, exp, log

cdef double LOG_2PI = 1.8378770664093453


def jacobi_eigh(double[:, ::1] a, double tol, int max_sweeps):
    """Diagonalize symmetric ``a`` in place with cyclic row-by-row rotations.

    Returns ``(diag, V, sweeps, converged)`` with unsorted eigenvalues.
    """
    cdef Py_ssize_t n = a.shape[0]
    v_arr = np.eye(n)
    cdef double[:, ::1] v = v_arr
    cdef Py_ssize_t p, q, k
    cdef int sweeps = 0
    cdef bint converged = False
    cdef double off, apq, theta, t, c, s, x, y
    with nogil:
        while True:
            off = 0.0
            for p in range(n):
                for q in range(p + 1, n):
                    off = off + a[p, q] * a[p, q]
            off = sqrt(2.0 * off)
            if off < tol:
                converged = True
                break
            if sweeps >= max_sweeps:
                break
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = a[p, q]
                    if apq == 0.0:
                        continue
                    theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                    t = 1.0 / (fabs(theta) + sqrt(theta * theta + 1.0))
                    if theta < 0.0:
                        t = -t
                    c = 1.0 / sqrt(t * t + 1.0)
                    s = t * c
                    for k in range(n):
                        x = a[k, p]
                        y = a[k, q]
                        a[k, p] = c * x - s * y
                        a[k, q] = s * x + c * y
                    for k in range(n):
                        x = a[p, k]
                        y = a[q, k]
                        a[p, k] = c * x - s * y
                        a[q, k] = s * x + c * y
                    a[p, q] = 0.0
                    a[q, p] = 0.0
                    for k in range(n):
                        x = v[k, p]
                        y = v[k, q]
                        v[k, p] = c * x - s * y
                        v[k, q] = s * x + c * y
            sweeps += 1
    diag = np.empty(n)
    cdef double[::1] d = diag
    for p in range(n):
        d[p] = a[p, p]
    return diag, v_arr, sweeps, converged


cdef inline double _loglik(double[::1] h, double w1, double m1, double s1,
                           double w2, double m2, double s2) nogil:
    cdef Py_ssize_t i, n = h.shape[0]
    cdef double l1, l2, hi, total = 0.0
    for i in range(n):
        hi = h[i]
        l1 = log(w1) - 0.5 * ((hi - m1) / s1) ** 2 - log(s1) - 0.5 * LOG_2PI
        l2 = log(w2) - 0.5 * ((hi - m2) / s2) ** 2 - log(s2) - 0.5 * LOG_2PI
        if l1 > l2:
            total = total + l1 + log(1.0 + exp(l2 - l1))
        else:
            total = total + l2 + log(1.0 + exp(l1 - l2))
    return total / n


def em_gmm_1d(double[::1] h, double m1, double m2, double s1, double s2,
              int max_iter, double tol, double sd_floor, double w_floor):
    """EM for a 1-D two-component Gaussian mixture.

    Returns ``(w1, w2, m1, m2, s1, s2, iterations, mean_loglik, converged)``.
    """
    cdef Py_ssize_t i, n = h.shape[0]
    cdef double w1 = 0.5, w2 = 0.5
    cdef double prev, cur, l1, l2, r, hi, mx
    cdef double r1s, r2s, r1h, r2h, v1, v2
    cdef int it = 0
    cdef bint converged = False
    resp_arr = np.empty(n)
    cdef double[::1] resp = resp_arr
    with nogil:
        prev = _loglik(h, w1, m1, s1, w2, m2, s2)
        cur = prev
        while it < max_iter:
            r1s = 0.0
            r1h = 0.0
            r2h = 0.0
            for i in range(n):
                hi = h[i]
                l1 = log(w1) - 0.5 * ((hi - m1) / s1) ** 2 - log(s1)
                l2 = log(w2) - 0.5 * ((hi - m2) / s2) ** 2 - log(s2)
                mx = l1 if l1 > l2 else l2
                r = exp(l1 - mx) / (exp(l1 - mx) + exp(l2 - mx))
                resp[i] = r
                r1s = r1s + r
                r1h = r1h + r * hi
                r2h = r2h + (1.0 - r) * hi
            r2s = n - r1s
            w1 = r1s / n
            if w1 < w_floor:
                w1 = w_floor
            if w1 > 1.0 - w_floor:
                w1 = 1.0 - w_floor
            w2 = 1.0 - w1
            if r1s > 0.0:
                m1 = r1h / r1s
            if r2s > 0.0:
                m2 = r2h / r2s
            v1 = 0.0
            v2 = 0.0
            for i in range(n):
                hi = h[i]
                r = resp[i]
                v1 = v1 + r * (hi - m1) * (hi - m1)
                v2 = v2 + (1.0 - r) * (hi - m2) * (hi - m2)
            s1 = sqrt(v1 / r1s) if r1s > 0.0 else sd_floor
            s2 = sqrt(v2 / r2s) if r2s > 0.0 else sd_floor
            if s1 < sd_floor:
                s1 = sd_floor
            if s2 < sd_floor:
                s2 = sd_floor
            it += 1
            cur = _loglik(h, w1, m1, s1, w2, m2, s2)
            if fabs(cur - prev) < tol:
                converged = True
                break
            prev = cur
    return w1, w2, m1, m2, s1, s2, it, cur, converged
