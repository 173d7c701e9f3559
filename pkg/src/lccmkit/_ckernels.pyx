# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled batched choice kernels (same contract as ``_pykernels``)."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, INFINITY

cnp.import_array()


def mnl_batch(double[:, :, ::1] X, const unsigned char[:, ::1] avail,
              const cnp.intp_t[::1] chosen, double[::1] beta, bint want_grad=True):
    cdef Py_ssize_t S = X.shape[0], J = X.shape[1], D = X.shape[2]
    cdef Py_ssize_t s, j, d, c
    cdef double mx, tot, logz, p
    logp_arr = np.empty(S)
    cdef double[::1] logp = logp_arr
    g_arr = np.zeros((S, D)) if want_grad else None
    cdef double[:, ::1] g
    if want_grad:
        g = g_arr
    cdef double[::1] u = np.empty(J)
    cdef double[::1] e = np.empty(J)

    with nogil:
        for s in range(S):
            mx = -INFINITY
            for j in range(J):
                if avail[s, j]:
                    u[j] = 0.0
                    for d in range(D):
                        u[j] += X[s, j, d] * beta[d]
                    if u[j] > mx:
                        mx = u[j]
            tot = 0.0
            for j in range(J):
                if avail[s, j]:
                    e[j] = exp(u[j] - mx)
                    tot += e[j]
            logz = mx + log(tot)
            c = chosen[s]
            logp[s] = u[c] - logz
            if want_grad:
                for d in range(D):
                    g[s, d] = X[s, c, d]
                for j in range(J):
                    if avail[s, j]:
                        p = e[j] / tot
                        for d in range(D):
                            g[s, d] -= p * X[s, j, d]
    return logp_arr, g_arr


def nl_batch(double[:, :, ::1] X, const unsigned char[:, ::1] avail,
             const cnp.intp_t[::1] chosen, const cnp.intp_t[::1] nest_of,
             double[::1] lambdas, double[::1] beta, bint want_grad=True):
    cdef Py_ssize_t S = X.shape[0], J = X.shape[1], D = X.shape[2]
    cdef Py_ssize_t M = lambdas.shape[0]
    cdef Py_ssize_t s, j, d, c, m, mi
    cdef double v, top_max, denom, log_denom, lam_i, dUj
    logp_arr = np.empty(S)
    cdef double[::1] logp = logp_arr
    g_arr = np.zeros((S, D)) if want_grad else None
    gl_arr = np.zeros((S, M)) if want_grad else None
    cdef double[:, ::1] g, gl
    if want_grad:
        g = g_arr
        gl = gl_arr
    cdef double[::1] u = np.empty(J)
    cdef double[::1] q = np.empty(J)
    cdef double[::1] nmax = np.empty(M)
    cdef double[::1] iv = np.empty(M)
    cdef double[::1] Q = np.empty(M)
    cdef double[::1] ubar = np.empty(M)

    with nogil:
        for s in range(S):
            for m in range(M):
                nmax[m] = -INFINITY
            for j in range(J):
                if avail[s, j]:
                    u[j] = 0.0
                    for d in range(D):
                        u[j] += X[s, j, d] * beta[d]
                    m = nest_of[j]
                    v = u[j] / lambdas[m]
                    if v > nmax[m]:
                        nmax[m] = v
            for m in range(M):
                iv[m] = 0.0
            for j in range(J):
                if avail[s, j]:
                    m = nest_of[j]
                    iv[m] += exp(u[j] / lambdas[m] - nmax[m])
            top_max = -INFINITY
            for m in range(M):
                if nmax[m] > -INFINITY:
                    iv[m] = nmax[m] + log(iv[m])
                    v = lambdas[m] * iv[m]
                    if v > top_max:
                        top_max = v
            denom = 0.0
            for m in range(M):
                if nmax[m] > -INFINITY:
                    denom += exp(lambdas[m] * iv[m] - top_max)
            log_denom = top_max + log(denom)
            c = chosen[s]
            mi = nest_of[c]
            lam_i = lambdas[mi]
            logp[s] = u[c] / lam_i - iv[mi] + lam_i * iv[mi] - log_denom
            if not want_grad:
                continue

            for m in range(M):
                if nmax[m] > -INFINITY:
                    Q[m] = exp(lambdas[m] * iv[m] - log_denom)
                else:
                    Q[m] = 0.0
                ubar[m] = 0.0
            for j in range(J):
                if avail[s, j]:
                    m = nest_of[j]
                    q[j] = exp(u[j] / lambdas[m] - iv[m])
                    ubar[m] += q[j] * u[j]
            for j in range(J):
                if avail[s, j]:
                    m = nest_of[j]
                    dUj = -Q[m] * q[j]
                    if m == mi:
                        dUj += (1.0 - 1.0 / lam_i) * q[j]
                    if j == c:
                        dUj += 1.0 / lam_i
                    for d in range(D):
                        g[s, d] += dUj * X[s, j, d]
            for m in range(M):
                if nmax[m] > -INFINITY:
                    gl[s, m] = -Q[m] * (iv[m] - ubar[m] / lambdas[m])
            gl[s, mi] += (ubar[mi] - u[c]) / (lam_i * lam_i) + iv[mi] - ubar[mi] / lam_i
    return logp_arr, g_arr, gl_arr
