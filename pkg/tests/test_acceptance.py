"""Acceptance suite: each criterion prints one PASS/FAIL line.

Criteria 6, 7 and 11 run full samplers and take most of the suite's time
(roughly 8 and 25 minutes on one core for 6 and 7).
"""
import dataclasses
import json
import time
import warnings

import numpy as np
import pytest
from oracles import grid_posterior_mean

from dpnsum.ard import adult_population_from_yearbook, prepare
from dpnsum.cli import main
from dpnsum.diagnostics import mcse_mean
from dpnsum.hmc import SamplerConfig
from dpnsum.io import load_yearbook, yearbook_bands
from dpnsum.nsum import NsumData, NsumModel, bias_lognormal_params, sample_posterior
from dpnsum.probe import MembershipData, PrevalenceDraws, fit_probe_model, fit_probe_models, \
    prevalence_draws
from dpnsum.scaling import compare_policies, equal_weight_shift, scale_draws, summarize
from dpnsum.simgen import ScenarioConfig, generate, sbc_experiment, zero_membership_rate


@pytest.fixture
def report(capsys):
    """Print ``PASS``/``FAIL`` for one criterion, then re-raise any failure."""
    class Report:
        def __init__(self):
            self.detail = ""

        def __call__(self, number, title, check):
            t0 = time.perf_counter()
            try:
                self.detail = check() or ""
                status = "PASS"
            except AssertionError as exc:
                self.detail = str(exc).splitlines()[0] if str(exc) else "assertion failed"
                status = "FAIL"
            line = f"[{status}] {number:>2}. {title} ({time.perf_counter() - t0:.1f} s) {self.detail}"
            with capsys.disabled():
                print("\n" + line)
            assert status == "PASS", line

    return Report()


# -- 1-4: model algebra ------------------------------------------------------------

def test_01_gradient(report, tiny_data):
    def check():
        t0 = time.perf_counter()
        m = NsumModel(tiny_data)
        rng = np.random.default_rng(1)
        h = 1e-6
        worst = 0.0
        for _ in range(20):
            th = rng.normal(0, 0.4, m.dim)
            th[m.layout.slices["beta"]] *= 0.05
            g = m.grad(th)
            fd = np.array([(m.log_posterior(th + h * e) - m.log_posterior(th - h * e)) / (2 * h)
                           for e in np.eye(m.dim)])
            # relative error, with an absolute floor for coordinates near zero
            worst = max(worst, float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1.0))))
        elapsed = time.perf_counter() - t0
        assert worst < 1e-5, f"max relative error {worst:.2e}"
        assert elapsed < 10, f"took {elapsed:.1f} s"
        return f"max rel err {worst:.1e}, dim {m.dim}"

    report(1, "gradient matches finite differences", check)


def test_02_shift_invariance(report, tiny_data):
    def check():
        m = NsumModel(tiny_data)
        rng = np.random.default_rng(2)
        p = m.unpack(rng.normal(0, 0.4, m.dim))
        ll = m.likelihood(p)
        worst = 0.0
        for a in rng.normal(0, 2, 10):
            q = dataclasses.replace(p, delta=p.delta + a, rho=p.rho - a)
            worst = max(worst, abs(m.likelihood(q) - ll) / abs(ll))
        assert worst < 1e-10, f"relative change {worst:.2e}"
        return f"max rel change {worst:.1e}"

    report(2, "likelihood invariant to degree/prevalence shift", check)


def test_03_mean_one_bias(report):
    def check():
        rng = np.random.default_rng(3)
        worst = 0.0
        for tau_N in rng.uniform(0.0, 3.0, 100):
            mu, tau = bias_lognormal_params(tau_N)
            worst = max(worst, abs(np.exp(mu + tau ** 2 / 2) - 1.0))
        assert worst < 1e-12, f"algebraic mean off by {worst:.2e}"
        mu, tau = bias_lognormal_params(0.5)
        x = np.exp(rng.normal(mu, tau, 1_000_000))
        z = (x.mean() - 1.0) / (x.std() / np.sqrt(x.size))
        assert abs(z) < 3, f"Monte Carlo mean {x.mean():.5f} is {z:.2f} SE from 1"
        return f"algebraic err {worst:.1e}, MC z = {z:.2f}"

    report(3, "mean-one bias constraint", check)


def test_04_scaling_identities(report, small_dataset):
    def check():
        ds, _ = small_dataset
        rng = np.random.default_rng(4)
        gamma = rng.uniform(0.005, 0.05, (1, 4))
        c = equal_weight_shift(np.log(gamma), gamma)
        assert abs(c).max() < 1e-14, f"c = {c} when exp(rho) = gamma"
        M, R = 7, 5
        probe_ids = tuple(g.id for g in ds.groups if g.kind in ("probe_both", "probe_direct"))
        nsum = {"rho": rng.normal(np.log(0.02), 0.3, (M, ds.G, ds.K)),
                "delta": rng.normal(5.0, 0.5, (M, ds.n))}
        gam = rng.uniform(0.005, 0.05, (R, ds.G, len(probe_ids)))
        pops = np.array([g.adult_population for g in ds.governorates], dtype=float)
        sc = scale_draws(nsum, PrevalenceDraws(probe_ids, gam, gam * pops[None, :, None]), ds)
        worst = 0.0
        for i in range(ds.n):
            g = int(ds.gov_index[i])
            for k in range(ds.K):
                lhs = sc.delta_tilde(i) + sc.rho_tilde(g, k)
                rhs = np.repeat(nsum["delta"][:, i] + nsum["rho"][:, g, k], R)
                worst = max(worst, float(np.abs(lhs - rhs).max()))
        assert worst < 1e-12, f"conservation error {worst:.2e}"
        assert sc.rho_tilde(0, 0).size == M * R == sc.length
        return f"conservation err {worst:.1e}, length {M}x{R}"

    report(4, "scaling identities", check)


# -- 5: zero-count shrinkage -----------------------------------------------------

def test_05_zero_count_shrinkage(report):
    def check():
        counts, totals = [0, 4, 4], [40, 200, 200]
        ind = np.concatenate([np.arange(t) < m for m, t in zip(counts, totals)])
        gid = np.repeat(np.arange(3), totals)
        cfg = SamplerConfig(chains=4, warmup=1000, draws_per_chain=2000, seed=5, target_accept=0.95)
        post = fit_probe_model(MembershipData(1, ind, gid, 3), cfg)
        x = post.gamma()[:, 0].reshape(post.chains, -1)
        mean, se = x.mean(), mcse_mean(x)
        pooled = sum(counts) / sum(totals)
        oracle = grid_posterior_mean(counts, [t - m for m, t in zip(counts, totals)], 0)
        assert 0 < mean < pooled, f"mean {mean:.5f} vs pooled {pooled:.5f}"
        assert abs(mean - oracle) < 3 * se, f"mean {mean:.5f}, oracle {oracle:.5f}, SE {se:.5f}"
        return f"mean {mean:.5f}, oracle {oracle:.5f}, pooled {pooled:.5f}, SE {se:.1e}"

    report(5, "zero-count shrinkage matches quadrature oracle", check)


# -- 6 and 11: end-to-end fit ------------------------------------------------------

@pytest.fixture(scope="module")
def recovery_fit():
    seed = 1
    t0 = time.perf_counter()
    ds, truth = generate(ScenarioConfig(), seed)
    ds = prepare(ds)
    cfg = SamplerConfig(chains=4, warmup=500, draws_per_chain=500, seed=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        probes = fit_probe_models(ds, cfg)
        post = sample_posterior(NsumData.from_dataset(ds), cfg)
    prev = prevalence_draws(probes, ds.governorates)
    return ds, truth, post, prev, time.perf_counter() - t0


def test_06_end_to_end_recovery(report, recovery_fit):
    def check():
        ds, truth, post, prev, fit_time = recovery_fit
        t0 = time.perf_counter()
        sc = scale_draws(post, prev, ds)
        inside, within = [], []
        for row in summarize(sc, "prevalence"):
            g = sc.governorate_names.index(row.governorate)
            k = ds.group_position[int(row.group)]
            p = truth.prevalence[g, k]
            vals = np.exp(sc.rho_tilde(g, k))
            inside.append(row.q025 <= p <= row.q975)
            within.append(abs(vals.mean() - p) <= 3 * vals.std())
        elapsed = fit_time + time.perf_counter() - t0
        cov, w3 = float(np.mean(inside)), float(np.mean(within))
        detail = (f"M = {post.draws['rho'].shape[0]}, cells {len(inside)}, coverage95 {cov:.3f}, "
                  f"within 3 SD {w3:.3f}, {elapsed:.0f} s")
        assert post.draws["rho"].shape[0] >= 2000, detail
        assert cov >= 0.85 and w3 >= 0.95, detail
        assert elapsed < 600, detail
        return detail

    report(6, "end-to-end recovery", check)


def test_11_policy_comparison(report, recovery_fit):
    def check():
        ds, _, post, prev, _ = recovery_fit
        cmp = compare_policies(post, prev, ds)
        wd = cmp.mean_width["direct_first_known_otherwise"]
        wk = cmp.mean_width["known_first_direct_otherwise"]
        detail = f"overlap {cmp.overlap_fraction:.3f}, mean width direct {wd:.4g} vs known {wk:.4g}"
        assert cmp.overlap_fraction >= 0.9, detail
        assert wd >= wk, detail
        return detail

    report(11, "policy comparison harness", check)


# -- 7: simulation-based calibration -----------------------------------------------

def test_07_sbc_coverage(report):
    def check():
        t0 = time.perf_counter()
        rep = sbc_experiment(replicates=20, levels=(0.9,), seed=1)
        rate, se, cells = rep.coverage(0.9)
        elapsed = time.perf_counter() - t0
        detail = (f"90% coverage {rate:.3f} (MC SE {se:.3f}, {cells} cells, "
                  f"{len(rep.failures)} failed replicates), {elapsed / 60:.1f} min")
        if rep.failures:
            detail += f"; first failure: {rep.failures[0][2]}"
        assert 0.78 <= rate <= 0.98, detail
        assert elapsed < 1800, detail
        return detail

    report(7, "SBC coverage", check)


# -- 8-9: published reference numbers ----------------------------------------------

def test_08_yearbook_adult_population(report):
    def check():
        N = adult_population_from_yearbook(yearbook_bands(load_yearbook()))
        assert N == 6_873_239, f"N = {N}"
        return f"N = {N:,}"

    report(8, "adult population from yearbook fixture", check)


def test_09_zero_membership_probability(report):
    def check():
        analytic = (1 - 0.002) ** 500
        rate = zero_membership_rate(0.002, 500, 1000, seed=1)
        assert abs(rate - analytic) <= 0.04, f"empirical {rate:.3f} vs analytic {analytic:.3f}"
        return f"empirical {rate:.3f}, analytic {analytic:.4f}"

    report(9, "zero-membership probability", check)


# -- 10: determinism ---------------------------------------------------------------

def test_10_cli_determinism(report, tmp_path):
    def check():
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({
            "scenario": {"n": 60, "K": 5, "G": 2, "n_probe": 3, "probe_prevalence": [0.1, 0.2]},
            "probe_sampler": {"chains": 2, "warmup": 60, "draws_per_chain": 60},
            "nsum_sampler": {"chains": 2, "warmup": 60, "draws_per_chain": 60}}))
        for run in ("a", "b"):
            out = tmp_path / run
            for step in ("simulate", "weights", "fit-probe", "fit-nsum", "scale", "summarize"):
                extra = [] if step == "simulate" else ["--data", str(out / "data")]
                code = main([step, "-c", str(cfg), "-o", str(out)] + extra)
                assert code in (0, 3), f"{step} exited {code}"
        names = sorted(p.name for p in (tmp_path / "a").iterdir()
                       if p.suffix in (".bin", ".csv") and p.name != "manifest.json")
        differ = [n for n in names
                  if (tmp_path / "a" / n).read_bytes() != (tmp_path / "b" / n).read_bytes()]
        assert any(n.endswith(".bin") for n in names) and any(n.startswith("summary_") for n in names)
        assert not differ, f"files differ: {differ}"
        return f"{len(names)} cache/summary files byte-identical"

    report(10, "byte-identical reruns", check)
