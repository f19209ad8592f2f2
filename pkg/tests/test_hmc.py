from functools import partial

import numpy as np
import pytest
from scipy import stats

from dpnsum.diagnostics import mcse_mean
from dpnsum.hmc import SamplerConfig, run_chain, run_chains

SCALES = np.array([1.0, 10.0, 0.1])


def gauss(theta, scales=SCALES):
    z = theta / scales
    return -0.5 * float(z @ z), -z / scales


def log_gamma_shape3(x):
    # y = exp(x), y ~ Gamma(3, 1): log p(x) = 3x - exp(x)
    return float(3 * x[0] - np.exp(x[0])), np.array([3 - np.exp(x[0])])


def _chains(logp_grad, dim, cfg, x0=None):
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.chains)
    x0 = np.zeros(dim) if x0 is None else x0
    return [run_chain(logp_grad, x0, cfg, s) for s in seeds]


def _chain_task(c, cfg):
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.chains)
    return run_chain(gauss, np.zeros(3), cfg, seeds[c])


@pytest.fixture(scope="module")
def gauss_run():
    cfg = SamplerConfig(chains=4, warmup=500, draws_per_chain=1000, seed=2)
    return _chains(gauss, 3, cfg)


def test_gaussian_moments(gauss_run):
    draws = np.stack([r.draws for r in gauss_run])         # (chains, D, dim)
    for j, s in enumerate(SCALES):
        x = draws[:, :, j]
        assert abs(x.mean()) < 4 * mcse_mean(x)
        assert x.std() == pytest.approx(s, rel=0.1)


def test_metric_adapts_to_scales(gauss_run):
    for r in gauss_run:
        np.testing.assert_allclose(r.inv_metric, SCALES ** 2, rtol=0.5)


def test_step_size_adaptation_tracks_target(gauss_run):
    # the averaged step size is conservative, so acceptance lands at or above target
    acc = np.concatenate([r.accept_stat for r in gauss_run]).mean()
    assert 0.75 < acc < 0.97
    assert not any(r.divergent.any() for r in gauss_run)
    strict = _chains(gauss, 3, SamplerConfig(chains=1, warmup=500, draws_per_chain=200, seed=2,
                                             target_accept=0.95))[0]
    assert strict.step_size < min(r.step_size for r in gauss_run)
    assert strict.accept_stat.mean() > acc


def test_correlated_gaussian_covariance():
    S = np.array([[1.0, 0.9], [0.9, 1.0]])
    P = np.linalg.inv(S)

    def lp(x):
        return -0.5 * float(x @ P @ x), -P @ x

    cfg = SamplerConfig(chains=2, warmup=400, draws_per_chain=2000, seed=4)
    draws = np.concatenate([r.draws for r in _chains(lp, 2, cfg)])
    np.testing.assert_allclose(np.cov(draws.T), S, atol=0.12)


def test_non_gaussian_target_distribution():
    cfg = SamplerConfig(chains=2, warmup=300, draws_per_chain=3000, seed=6)
    y = np.exp(np.concatenate([r.draws[:, 0] for r in _chains(log_gamma_shape3, 1, cfg)]))
    assert stats.kstest(y[::5], stats.gamma(3).cdf).pvalue > 0.01


def test_determinism_and_seed_dependence():
    cfg = SamplerConfig(chains=1, warmup=50, draws_per_chain=50, seed=9)
    a = _chains(gauss, 3, cfg)[0]
    b = _chains(gauss, 3, cfg)[0]
    np.testing.assert_array_equal(a.draws, b.draws)
    c = _chains(gauss, 3, SamplerConfig(chains=1, warmup=50, draws_per_chain=50, seed=10))[0]
    assert not np.array_equal(a.draws, c.draws)


def test_worker_processes_match_sequential():
    cfg = SamplerConfig(chains=2, warmup=30, draws_per_chain=30, seed=3)
    fn = partial(_chain_task, cfg=cfg)
    seq = run_chains(fn, 2, threads=1)
    par = run_chains(fn, 2, threads=2)
    for x, y in zip(seq, par):
        np.testing.assert_array_equal(x.draws, y.draws)


def test_funnel_reports_divergences():
    def funnel(x):
        v, z = x
        lp = -v * v / 18.0 - 0.5 * z * z * np.exp(-v) - 0.5 * v
        return lp, np.array([-v / 9.0 + 0.5 * z * z * np.exp(-v) - 0.5, -z * np.exp(-v)])

    cfg = SamplerConfig(chains=2, warmup=200, draws_per_chain=500, seed=1)
    assert sum(int(r.divergent.sum()) for r in _chains(funnel, 2, cfg)) > 0


def test_tree_depth_is_capped():
    cfg = SamplerConfig(chains=1, warmup=0, draws_per_chain=20, seed=1, max_tree_depth=2)
    r = _chains(gauss, 3, cfg)[0]
    assert r.treedepth.max() <= 2
    assert r.n_leapfrog.max() <= 2 ** 2


def test_nonfinite_initial_point_rejected():
    cfg = SamplerConfig(chains=1, warmup=0, draws_per_chain=1)
    with pytest.raises(FloatingPointError):
        run_chain(lambda x: (-np.inf, np.zeros(1)), np.zeros(1), cfg, np.random.SeedSequence(0))


@pytest.mark.parametrize("bad", [dict(chains=0), dict(draws_per_chain=0), dict(warmup=-1),
                                 dict(target_accept=0.5), dict(max_tree_depth=0),
                                 dict(thin_bias=0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        SamplerConfig(**bad)


def test_config_from_dict_ignores_unknown_keys():
    assert SamplerConfig.from_dict({"chains": 2, "other": 1}) == SamplerConfig(chains=2)
