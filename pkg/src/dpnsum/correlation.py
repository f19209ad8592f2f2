"""LKJ prior on correlation matrices and the Cholesky-factor transform."""

import numpy as np
from scipy.special import betaln

from . import kernels


def lkj_log_normalizer(K, eta):
    """Log of the LKJ normalizing constant ``c_K(eta)``.

    The LKJ density over ``K x K`` correlation matrices is
    ``det(Omega) ** (eta - 1) / c_K(eta)``.
    """
    total = 0.0
    for k in range(1, K):
        m = K - k
        b = eta + (m - 1) / 2.0
        total += (2.0 * eta - 2.0 + m) * m * np.log(2.0) + m * betaln(b, b)
    return total


def check_corr_cholesky(omega_chol, atol=1e-8):
    L = np.asarray(omega_chol, dtype=float)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ValueError(f"correlation Cholesky factor must be square, got {L.shape}")
    if np.any(np.abs(np.triu(L, 1)) > atol):
        raise ValueError("correlation Cholesky factor must be lower triangular")
    if np.any(np.diag(L) <= 0):
        raise ValueError("correlation Cholesky factor needs a positive diagonal")
    norms = np.sum(L * L, axis=1)
    if np.any(np.abs(norms - 1.0) > atol):
        raise ValueError("correlation Cholesky rows must have unit norm")
    return L


def lkj_log_density(omega_chol, eta):
    """Normalized LKJ(eta) log-density of ``Omega = L L^T``, evaluated from ``L``.

    The density is with respect to Lebesgue measure on the off-diagonal
    entries of the correlation matrix, so ``eta = 1`` gives a constant.
    Use ``cholesky_jacobian_coef`` for the extra term that moves the measure
    onto the strictly-lower entries of ``L``.
    """
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    L = check_corr_cholesky(omega_chol)
    K = L.shape[0]
    if K == 1:
        return 0.0
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return float((eta - 1.0) * logdet - lkj_log_normalizer(K, eta))


def cholesky_jacobian_coef(K):
    """Per-row coefficients of ``log L[i, i]`` in ``log |d Omega / d L|``."""
    return np.array([max(K - i - 1, 0) if i > 0 else 0 for i in range(K)], dtype=float)


def lkj_cholesky_diag_coef(K, eta):
    """Coefficients of ``log L[i, i]`` for the LKJ density on ``L`` (Jacobian included)."""
    coef = 2.0 * (eta - 1.0) + cholesky_jacobian_coef(K)
    coef[0] = 0.0
    return coef


def n_free(K):
    return K * (K - 1) // 2


def free_to_cholesky(free, K, diag_coef=None):
    """Unconstrained vector to ``(L, log_jacobian + sum(diag_coef * log diag(L)))``."""
    if diag_coef is None:
        diag_coef = np.zeros(K)
    return kernels.corr_cholesky(np.ascontiguousarray(free, dtype=float), K,
                                 np.ascontiguousarray(diag_coef, dtype=float))


def cholesky_to_free(L):
    """Inverse of ``free_to_cholesky``."""
    L = np.asarray(L, dtype=float)
    K = L.shape[0]
    out = np.empty(n_free(K))
    pos = 0
    for i in range(1, K):
        s = 0.0
        for j in range(i):
            zz = L[i, j] / np.sqrt(1.0 - s)
            out[pos] = np.arctanh(np.clip(zz, -1 + 1e-15, 1 - 1e-15))
            s += L[i, j] ** 2
            pos += 1
    return out


def sample_lkj(K, eta, rng):
    """Draw a correlation matrix from LKJ(eta) with the vine method."""
    if K == 1:
        return np.ones((1, 1))
    b = eta + (K - 1) / 2.0
    P = np.zeros((K, K))
    S = np.eye(K)
    for k in range(K - 1):
        b -= 0.5
        for i in range(k + 1, K):
            P[k, i] = 2.0 * rng.beta(b, b) - 1.0
            p = P[k, i]
            for ell in range(k - 1, -1, -1):
                p = p * np.sqrt((1 - P[ell, i] ** 2) * (1 - P[ell, k] ** 2)) + P[ell, i] * P[ell, k]
            S[k, i] = S[i, k] = p
    return S
