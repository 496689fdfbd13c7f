# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot loops; same signatures as the numpy fallback."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def ratio_test(double[:] Ap, double[:] slack, in_work, double tol):
    cdef cnp.uint8_t[:] work = np.ascontiguousarray(in_work, dtype=np.uint8)
    cdef Py_ssize_t i, n = Ap.shape[0]
    cdef Py_ssize_t best = -1
    cdef double best_ratio = INFINITY
    cdef double r, sl
    for i in range(n):
        if work[i] or Ap[i] <= tol:
            continue
        sl = slack[i]
        if sl < 0.0:
            sl = 0.0
        r = sl / Ap[i]
        if r < best_ratio:
            best_ratio = r
            best = i
    return best_ratio, best


def bellman_sweep(double[:] V, double[:] cost, cnp.int64_t[:, :] idx, double[:, :] frac,
                  double[:] weights, double gamma):
    cdef Py_ssize_t n = idx.shape[0], nq = idx.shape[1], j, q, k
    out = np.empty(n)
    cdef double[:] o = out
    cdef double acc, f
    for j in range(n):
        acc = 0.0
        for q in range(nq):
            k = idx[j, q]
            f = frac[j, q]
            acc += weights[q] * (V[k] + f * (V[k + 1] - V[k]))
        o[j] = cost[j] + gamma * acc
    return out


def chain_stay(s0, double[:, :] noise, double a_cl, double lo, double hi):
    cdef double[:] s = np.array(s0, dtype=float, copy=True)
    cdef Py_ssize_t n = noise.shape[0], T = noise.shape[1], i, k
    alive = np.ones(n, dtype=bool)
    cdef cnp.uint8_t[:] al = alive.view(np.uint8)
    cdef double x
    for i in range(n):
        x = s[i]
        for k in range(T):
            x = a_cl * x + noise[i, k]
            if x < lo or x > hi:
                al[i] = 0
                break
    return alive


def worst_rollout_attracted(double s, double A, double B, double K, double a_s, double u_min, double u_top,
                            double s_max, double wbar, Py_ssize_t steps):
    cdef double x = s, xn, hi, u
    cdef Py_ssize_t k
    for k in range(steps):
        hi = (s_max - wbar - A * x) / B
        if u_top < hi:
            hi = u_top
        u = a_s - K * x
        if u < u_min:
            u = u_min
        if u > hi:
            u = hi
        if u < u_min:
            u = u_min
        xn = A * x + B * u - wbar
        if xn < s - 1.0:
            return False
        if xn - x < 1e-13 and x - xn < 1e-13:
            return True
        x = xn
    return True
