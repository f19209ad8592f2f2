# cython: language_level=3
"""Compiled kernels; see ``_pykernels`` for the reference semantics."""

from libc.math cimport exp, log1p, sqrt, tanh

import numpy as np


def nsum_loglik_grad(const double[:, ::1] y, const double[:, ::1] mask,
                     const double[::1] w, const Py_ssize_t[::1] gidx,
                     const double[:, ::1] z, const double[::1] delta,
                     const double[:, ::1] rho, const double[:, ::1] beta,
                     const double[::1] mu_b, const double[::1] tau,
                     const double[:, ::1] L, const double[:, ::1] eps,
                     double cap,
                     double[::1] g_delta, double[:, ::1] g_rho,
                     double[:, ::1] g_beta, double[::1] g_mu_b,
                     double[::1] g_tau, double[:, ::1] g_L,
                     double[:, ::1] g_eps):
    cdef Py_ssize_t n = y.shape[0]
    cdef Py_ssize_t K = y.shape[1]
    cdef Py_ssize_t P = z.shape[1]
    cdef Py_ssize_t i, k, j, p, g
    cdef double eta, lam, r, acc, wi, loglik = 0.0
    cdef long n_clamped = 0
    cdef double[::1] v = np.empty(K)
    cdef double[::1] s = np.empty(K)

    g_rho[:, :] = 0.0
    g_beta[:, :] = 0.0
    g_mu_b[:] = 0.0
    g_tau[:] = 0.0
    g_L[:, :] = 0.0

    for i in range(n):
        g = gidx[i]
        wi = w[i]
        acc = 0.0
        for k in range(K):
            r = 0.0
            for j in range(k + 1):
                r += L[k, j] * eps[i, j]
            v[k] = r
            eta = delta[i] + rho[g, k] + mu_b[k] + tau[k] * r
            for p in range(P):
                eta += z[i, p] * beta[p, k]
            if mask[i, k] == 0.0:
                s[k] = 0.0
                continue
            if eta > cap:
                lam = exp(cap)
                loglik += wi * (y[i, k] * cap - lam)
                n_clamped += 1
                s[k] = 0.0
                continue
            lam = exp(eta)
            loglik += wi * mask[i, k] * (y[i, k] * eta - lam)
            r = wi * mask[i, k] * (y[i, k] - lam)
            acc += r
            g_rho[g, k] += r
            g_mu_b[k] += r
            g_tau[k] += r * v[k]
            for p in range(P):
                g_beta[p, k] += z[i, p] * r
            s[k] = r * tau[k]
        g_delta[i] = acc
        for j in range(K):
            acc = 0.0
            for k in range(j, K):
                acc += s[k] * L[k, j]
                g_L[k, j] += s[k] * eps[i, j]
            g_eps[i, j] = acc
    return loglik, n_clamped


def corr_cholesky(const double[::1] free, Py_ssize_t K, const double[::1] diag_coef):
    cdef double[:, ::1] L = np.zeros((K, K))
    cdef double logdens = 0.0, s, zz
    cdef Py_ssize_t i, j, pos = 0
    L[0, 0] = 1.0
    for i in range(1, K):
        s = 0.0
        for j in range(i):
            zz = tanh(free[pos])
            pos += 1
            if j > 0:
                logdens += 0.5 * log1p(-s)
            logdens += log1p(-zz * zz)
            L[i, j] = zz * sqrt(1.0 - s)
            s += L[i, j] * L[i, j]
        L[i, i] = sqrt(1.0 - s)
        logdens += 0.5 * diag_coef[i] * log1p(-s)
    return np.asarray(L), logdens


def corr_cholesky_grad(const double[::1] free, Py_ssize_t K,
                       const double[:, ::1] gL, const double[::1] diag_coef,
                       double[::1] out):
    cdef double[::1] zs = np.empty(K)
    cdef double[::1] ss = np.empty(K + 1)
    cdef double[::1] Lrow = np.empty(K)
    cdef double s, Lii, a_s, a_L, a_z, r, zz
    cdef Py_ssize_t i, j, pos = 0
    for i in range(1, K):
        s = 0.0
        for j in range(i):
            zz = tanh(free[pos + j])
            zs[j] = zz
            ss[j] = s
            Lrow[j] = zz * sqrt(1.0 - s)
            s += Lrow[j] * Lrow[j]
        ss[i] = s
        Lii = sqrt(1.0 - s)
        a_s = -gL[i, i] * 0.5 / Lii - 0.5 * diag_coef[i] / (1.0 - s)
        for j in range(i - 1, -1, -1):
            a_L = gL[i, j] + a_s * 2.0 * Lrow[j]
            r = sqrt(1.0 - ss[j])
            zz = zs[j]
            a_z = a_L * r
            if j > 0:
                a_s += -a_L * zz * 0.5 / r - 0.5 / (1.0 - ss[j])
            a_z += -2.0 * zz / (1.0 - zz * zz)
            out[pos + j] = a_z * (1.0 - zz * zz)
        pos += i
    return np.asarray(out)
