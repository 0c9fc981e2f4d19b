# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled conditional-logistic stratum kernel.

Same contract as ``_pykernels.clogit_strata``; see that module for the
argument description.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()

cdef double RESCALE_HI = 1e150
cdef double RESCALE_LO = 1e-150


def clogit_strata(feats, case, offsets, beta, bint want_hess=True):
    cdef const double[:, ::1] F = np.ascontiguousarray(feats, dtype=np.float64)
    cdef const signed char[::1] Y = np.ascontiguousarray(case, dtype=np.int8)
    cdef const long long[::1] off = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef const double[::1] b = np.ascontiguousarray(beta, dtype=np.float64)
    cdef Py_ssize_t S = off.shape[0] - 1
    cdef Py_ssize_t D = F.shape[1]

    loglik_arr = np.zeros(S)
    score_arr = np.zeros((S, D))
    hess_arr = np.zeros((D, D))
    if S <= 0:
        return loglik_arr, score_arr, hess_arr
    cdef double[::1] loglik = loglik_arr
    cdef double[:, ::1] score = score_arr
    cdef double[:, ::1] hess = hess_arr

    cdef Py_ssize_t j, i, k, q, d, e, start, stop, N, n, maxn = 1, maxN = 1
    for j in range(S):
        N = off[j + 1] - off[j]
        n = 0
        for i in range(off[j], off[j + 1]):
            n += Y[i]
        if n > maxn:
            maxn = n
        if N > maxN:
            maxN = N

    cdef double[::1] E = np.zeros(maxn + 1)
    cdef double[:, ::1] E1 = np.zeros((maxn + 1, D))
    cdef double[:, :, ::1] E2 = np.zeros((maxn + 1, D if want_hess else 1, D if want_hess else 1))
    cdef double[::1] eta = np.zeros(maxN)
    cdef double shift, rk, logscale, c, obs, En, mu_d, xd

    for j in range(S):
        start = off[j]
        stop = off[j + 1]
        N = stop - start
        n = 0
        for i in range(start, stop):
            n += Y[i]
        if n == 0 or n == N:
            continue

        shift = -1e308
        for i in range(N):
            eta[i] = 0.0
            for d in range(D):
                eta[i] += F[start + i, d] * b[d]
            if eta[i] > shift:
                shift = eta[i]

        for q in range(n + 1):
            E[q] = 0.0
            for d in range(D):
                E1[q, d] = 0.0
                if want_hess:
                    for e in range(D):
                        E2[q, d, e] = 0.0
        E[0] = 1.0
        logscale = 0.0

        for k in range(N):
            rk = exp(eta[k] - shift)
            q = k + 1 if k + 1 < n else n
            while q >= 1:
                if want_hess:
                    for d in range(D):
                        xd = F[start + k, d]
                        for e in range(D):
                            E2[q, d, e] += rk * (E2[q - 1, d, e]
                                                 + xd * E1[q - 1, e]
                                                 + E1[q - 1, d] * F[start + k, e]
                                                 + xd * F[start + k, e] * E[q - 1])
                for d in range(D):
                    E1[q, d] += rk * (E1[q - 1, d] + F[start + k, d] * E[q - 1])
                E[q] += rk * E[q - 1]
                q -= 1
            c = 0.0
            for q in range(n + 1):
                if E[q] > c:
                    c = E[q]
            if c > RESCALE_HI or c < RESCALE_LO:
                for q in range(n + 1):
                    E[q] /= c
                    for d in range(D):
                        E1[q, d] /= c
                        if want_hess:
                            for e in range(D):
                                E2[q, d, e] /= c
                logscale += log(c)

        En = E[n]
        obs = 0.0
        for i in range(N):
            if Y[start + i]:
                obs += eta[i]
        loglik[j] = obs - (log(En) + logscale + n * shift)
        for d in range(D):
            mu_d = E1[n, d] / En
            xd = 0.0
            for i in range(N):
                if Y[start + i]:
                    xd += F[start + i, d]
            score[j, d] = xd - mu_d
            if want_hess:
                for e in range(D):
                    hess[d, e] -= E2[n, d, e] / En - mu_d * (E1[n, e] / En)

    return loglik_arr, score_arr, hess_arr
