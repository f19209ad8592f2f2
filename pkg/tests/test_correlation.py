import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from dpnsum.correlation import (
    check_corr_cholesky,
    cholesky_jacobian_coef,
    cholesky_to_free,
    free_to_cholesky,
    lkj_cholesky_diag_coef,
    lkj_log_density,
    n_free,
    sample_lkj,
)
from dpnsum.hmc import SamplerConfig, run_chain
from dpnsum.kernels import corr_cholesky_grad


def _chol_from_r(r):
    return np.array([[1.0, 0.0], [r, np.sqrt(1 - r * r)]])


def test_lkj_k2_matches_quadrature():
    eta = 2.0
    Z, _ = integrate.quad(lambda r: (1 - r * r) ** (eta - 1), -1, 1)
    for r in (0.0, 0.3, -0.7):
        expected = np.log((1 - r * r) ** (eta - 1) / Z)
        assert lkj_log_density(_chol_from_r(r), eta) == pytest.approx(expected, abs=1e-10)


def test_lkj_eta_one_is_constant(rng):
    K = 4
    vals = [lkj_log_density(np.linalg.cholesky(sample_lkj(K, 1.5, rng)), 1.0) for _ in range(100)]
    assert np.ptp(vals) < 1e-10
    # and equals minus the log volume of 4x4 correlation matrices (pi^2 * 32/27... via quadrature-free
    # identity: normalizer independent of the matrix)
    assert np.isfinite(vals[0])


def test_lkj_k1_is_zero():
    assert lkj_log_density(np.ones((1, 1)), 2.0) == 0.0


def test_lkj_rejects_invalid():
    with pytest.raises(ValueError):
        lkj_log_density(np.array([[1.0, 0.0], [0.9, 0.9]]), 2.0)
    with pytest.raises(ValueError):
        lkj_log_density(np.eye(2), 0.0)


def test_lkj_normalizer_k3_by_monte_carlo():
    # integral of exp(log density) over 3x3 correlation matrices equals 1:
    # importance sample uniform offdiagonals on the cube, keep the PD ones
    rng = np.random.default_rng(3)
    r = rng.uniform(-1, 1, (400_000, 3))
    dets = 1 - (r ** 2).sum(1) + 2 * r[:, 0] * r[:, 1] * r[:, 2]
    ok = dets > 0
    eta = 2.0
    L = np.linalg.cholesky(np.array([[1, 0.2, 0.1], [0.2, 1, -0.3], [0.1, -0.3, 1]]))
    log_c = (eta - 1) * np.log(np.linalg.det(L @ L.T)) - lkj_log_density(L, eta)
    integral = 8.0 * np.mean(np.where(ok, np.abs(dets) ** (eta - 1), 0.0))
    se = 8.0 * np.std(np.where(ok, np.abs(dets) ** (eta - 1), 0.0)) / np.sqrt(r.shape[0])
    assert abs(integral - np.exp(log_c)) < 4 * se


@given(st.integers(2, 5), st.integers(0, 10_000))
def test_free_round_trip_and_validity(K, seed):
    rng = np.random.default_rng(seed)
    free = rng.normal(0, 1.0, n_free(K))
    L, _ = free_to_cholesky(free, K)
    check_corr_cholesky(L)
    np.testing.assert_allclose(cholesky_to_free(L), free, atol=1e-8)


def _omega_offdiag(free, K):
    L, _ = free_to_cholesky(free, K)
    return (L @ L.T)[np.tril_indices(K, -1)]


@pytest.mark.parametrize("K", [2, 3, 4])
def test_transform_jacobian_matches_numerical(K, rng):
    coef = cholesky_jacobian_coef(K)
    for _ in range(5):
        free = rng.normal(0, 0.7, n_free(K))
        h = 1e-6
        J = np.empty((n_free(K), n_free(K)))
        for j in range(n_free(K)):
            e = np.zeros(n_free(K))
            e[j] = h
            J[:, j] = (_omega_offdiag(free + e, K) - _omega_offdiag(free - e, K)) / (2 * h)
        _, logdens = free_to_cholesky(free, K, coef)
        assert logdens == pytest.approx(np.linalg.slogdet(J)[1], abs=1e-6)


@pytest.mark.parametrize("K", [2, 4])
def test_transform_gradient_matches_finite_differences(K, rng):
    coef = lkj_cholesky_diag_coef(K, 2.0)
    gL = np.tril(rng.normal(size=(K, K)))

    def f(x):
        L, ld = free_to_cholesky(x, K, coef)
        return ld + np.sum(gL * L)

    free = rng.normal(0, 0.6, n_free(K))
    g = corr_cholesky_grad(free, K, gL, coef, np.zeros(n_free(K)))
    h = 1e-6
    fd = np.array([(f(free + h * e) - f(free - h * e)) / (2 * h) for e in np.eye(n_free(K))])
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("K, eta", [(3, 2.0), (4, 1.0)])
def test_sample_lkj_marginals(K, eta):
    rng = np.random.default_rng(11)
    draws = np.array([sample_lkj(K, eta, rng)[0, K - 1] for _ in range(4000)])
    a = eta - 1 + K / 2
    assert stats.kstest((draws + 1) / 2, stats.beta(a, a).cdf).pvalue > 0.01


def test_sample_lkj_valid(rng):
    for _ in range(50):
        S = sample_lkj(5, 2.0, rng)
        np.testing.assert_allclose(np.diag(S), 1.0)
        assert np.linalg.eigvalsh(S).min() > -1e-10


def test_lkj_density_on_free_space_samples_correct_marginal():
    # NUTS on the unconstrained LKJ(2) density for K=3 must reproduce the
    # Beta(eta - 1 + K/2) marginal of each correlation
    K, eta = 3, 2.0
    coef = lkj_cholesky_diag_coef(K, eta)
    zero = np.zeros((K, K))

    def logp_grad(x):
        _, ld = free_to_cholesky(x, K, coef)
        return ld, corr_cholesky_grad(x, K, zero, coef, np.zeros(n_free(K)))

    cfg = SamplerConfig(chains=1, warmup=500, draws_per_chain=4000, seed=5)
    res = run_chain(logp_grad, np.zeros(n_free(K)), cfg, np.random.SeedSequence(5))
    r = np.array([(lambda L: (L @ L.T)[2, 0])(free_to_cholesky(x, K)[0]) for x in res.draws])
    a = eta - 1 + K / 2
    thin = r[::4]
    assert stats.kstest((thin + 1) / 2, stats.beta(a, a).cdf).pvalue > 0.01
