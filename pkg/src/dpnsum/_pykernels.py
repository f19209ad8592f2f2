"""NumPy implementations of the numerical kernels.

These mirror ``_ckernels.pyx`` call for call and are used when the compiled
extension is unavailable (or ``DPNSUM_PURE_PYTHON=1`` is set).
"""

import numpy as np


def nsum_loglik_grad(y, mask, w, gidx, z, delta, rho, beta, mu_b, tau, L, eps,
                     cap, g_delta, g_rho, g_beta, g_mu_b, g_tau, g_L, g_eps):
    """Weighted Poisson log-likelihood of the NSUM model and its gradient.

    The bias is built non-centered as ``b_i = mu_b + tau * (L @ eps_i)``.
    Gradient buffers are overwritten in place. The ``lgamma(y + 1)`` constant
    is not included.

    Returns
    -------
    loglik : float
    n_clamped : int
        Number of observed cells whose linear predictor exceeded ``cap``.
    """
    n, K = y.shape
    V = eps @ L.T
    eta = delta[:, None] + rho[gidx] + z @ beta + (mu_b + tau * V)
    over = eta > cap
    eta_c = np.minimum(eta, cap)
    lam = np.exp(eta_c)
    wm = w[:, None] * mask
    loglik = float(np.sum(wm * (y * eta_c - lam)))
    R = wm * (y - lam)
    R[over] = 0.0

    g_delta[:] = R.sum(axis=1)
    g_rho[:] = 0.0
    for k in range(K):
        g_rho[:, k] = np.bincount(gidx, weights=R[:, k], minlength=g_rho.shape[0])
    g_beta[:] = z.T @ R
    g_mu_b[:] = R.sum(axis=0)
    g_tau[:] = np.sum(R * V, axis=0)
    S = R * tau
    g_L[:] = np.tril(S.T @ eps)
    g_eps[:] = S @ L
    n_clamped = int(np.count_nonzero(over & (mask > 0)))
    return loglik, n_clamped


def corr_cholesky(free, K, diag_coef):
    """Map unconstrained values to a correlation Cholesky factor.

    Canonical partial correlations are ``tanh(free)``, filled row by row.

    Returns ``(L, logdens)`` where ``logdens`` is the log-Jacobian of the map
    plus ``sum_i diag_coef[i] * log(L[i, i])``.
    """
    L = np.zeros((K, K))
    L[0, 0] = 1.0
    logdens = 0.0
    pos = 0
    for i in range(1, K):
        s = 0.0
        for j in range(i):
            zz = np.tanh(free[pos])
            pos += 1
            if j > 0:
                logdens += 0.5 * np.log1p(-s)
            logdens += np.log1p(-zz * zz)
            L[i, j] = zz * np.sqrt(1.0 - s)
            s += L[i, j] * L[i, j]
        L[i, i] = np.sqrt(1.0 - s)
        logdens += 0.5 * diag_coef[i] * np.log1p(-s)
    return L, float(logdens)


def corr_cholesky_grad(free, K, gL, diag_coef, out):
    """Gradient wrt ``free`` of ``logdens + sum(gL * L)`` (see ``corr_cholesky``)."""
    pos = 0
    zs = np.empty(K)
    ss = np.empty(K + 1)
    Lrow = np.empty(K)
    for i in range(1, K):
        # forward pass for row i
        s = 0.0
        for j in range(i):
            zz = np.tanh(free[pos + j])
            zs[j] = zz
            ss[j] = s
            Lrow[j] = zz * np.sqrt(1.0 - s)
            s += Lrow[j] * Lrow[j]
        ss[i] = s
        Lii = np.sqrt(1.0 - s)
        # reverse pass
        a_s = -gL[i, i] * 0.5 / Lii - 0.5 * diag_coef[i] / (1.0 - s)
        for j in range(i - 1, -1, -1):
            a_L = gL[i, j] + a_s * 2.0 * Lrow[j]
            r = np.sqrt(1.0 - ss[j])
            zz = zs[j]
            a_z = a_L * r
            if j > 0:
                a_s += -a_L * zz * 0.5 / r - 0.5 / (1.0 - ss[j])
            a_z += -2.0 * zz / (1.0 - zz * zz)
            out[pos + j] = a_z * (1.0 - zz * zz)
        pos += i
    return out
