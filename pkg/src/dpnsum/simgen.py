"""Synthetic ARD surveys with known ground truth.

Datasets follow the NSUM generative process (log-normal degrees, governorate
prevalences, covariate effects, correlated mean-one biases, Poisson counts,
truncation) plus Bernoulli membership answers for probe groups. They stand
in for survey microdata in recovery and calibration checks.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import norm

from .ard import (
    AGE_BANDS,
    COVARIATES,
    NATIONALITIES,
    SEXES,
    Governorate,
    Group,
    Respondent,
    SurveyDataset,
    band_limits,
    band_of,
    build_design_row,
    mean_age,
    truncate_responses,
)
from .correlation import sample_lkj
from .nsum import bias_lognormal_params


@dataclass(frozen=True)
class ScenarioConfig:
    n: int = 200
    K: int = 8
    G: int = 3
    n_probe: int = 5
    P: int = len(COVARIATES)
    probe_prevalence: tuple = (0.02, 0.08)
    target_prevalence: tuple = (0.003, 0.03)
    governorate_prevalence_sd: float = 0.25
    degree_scale: float = 300.0
    degree_log_sd: float = 0.4
    governorate_degree_sd: float = 0.2
    tau_N_range: tuple = (0.2, 0.6)
    lkj_eta: float = 2.0
    beta_sd: float = 0.15
    age_beta_sd: float = 0.005
    known_fraction: float = 0.4
    membership_coverage: float = 1.0
    known_size_multiplier: float = 1.0
    truncation_cap: int = 100
    age_missing_frac: float = 0.0
    governorate_population: tuple = (200_000, 2_000_000)
    allocation: str = "equal"           # respondents per governorate: equal or proportional

    def __post_init__(self):
        for name in ("n", "K", "G"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 <= self.n_probe <= self.K:
            raise ValueError("n_probe must lie in [0, K]")
        for name in ("probe_prevalence", "target_prevalence"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi < 1:
                raise ValueError(f"{name} must lie inside (0, 1)")
        if self.allocation not in ("equal", "proportional"):
            raise ValueError("allocation must be 'equal' or 'proportional'")
        if self.P > len(COVARIATES):
            raise ValueError(f"at most {len(COVARIATES)} covariates are supported")

    @classmethod
    def from_dict(cls, d):
        kw = {}
        for k, v in d.items():
            if k in cls.__dataclass_fields__:
                kw[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kw)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    prevalence: np.ndarray         # (G, K) p_gk
    degree: np.ndarray             # (n,) d_i
    beta: np.ndarray               # (P, K)
    tau_N: np.ndarray              # (K,)
    omega: np.ndarray              # (K, K)
    membership_prob: np.ndarray    # (G, K); NaN where no membership question
    bias: np.ndarray               # (n, K)
    seed: int
    group_kinds: tuple = ()
    extra: dict = field(default_factory=dict)


NATIONALITY_PROBS = (0.8, 0.1, 0.05, 0.05)


def _strata(N, bands):
    """Expected adults per (sex, age band) under the simulated age distribution."""
    lo_clip, hi_clip = 18.0, 85.0
    dist = norm(42.0, 12.0)
    mass = dist.cdf(hi_clip) - dist.cdf(lo_clip)
    out = {}
    for sex in SEXES:
        for band in bands:
            lo, hi = band_limits(band)
            p = (dist.cdf(min(hi, hi_clip)) - dist.cdf(max(lo, lo_clip))) / mass
            out[(sex, band)] = max(int(round(0.5 * p * N)), 1)
    return out


def generate(config: ScenarioConfig, seed: int):
    """Draw a synthetic ``SurveyDataset`` and its ``GroundTruth``."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    c = config
    G, K, n, P = c.G, c.K, c.n, c.P

    pops = rng.integers(c.governorate_population[0], c.governorate_population[1] + 1, G)
    governorates = [Governorate(g, f"Gov{g + 1:02d}", int(pops[g])) for g in range(G)]
    N = int(pops.sum())

    # respondents per governorate: stratified equally, or proportional to
    # population with at least 2 each when possible
    if c.allocation == "equal":
        share = np.full(G, n // G)
        share[:n % G] += 1
    else:
        base = min(2, n // G)
        share = rng.multinomial(n - base * G, pops / pops.sum()) + base
    gidx = np.repeat(np.arange(G), share)
    sex = np.where(rng.random(n) < 0.5, "male", "female")
    age = np.clip(rng.normal(42.0, 12.0, n), 18.0, 85.0)
    nat = rng.choice(len(NATIONALITIES), size=n, p=NATIONALITY_PROBS)
    masked = rng.random(n) < c.age_missing_frac
    respondents = []
    for i in range(n):
        respondents.append(Respondent(
            id=i + 1, governorate_id=int(gidx[i]), sex=str(sex[i]), age_group=band_of(age[i]),
            nationality=NATIONALITIES[nat[i]],
            age_years=None if masked[i] else float(age[i])))
    center = mean_age(respondents) if not masked.any() else float(np.mean(age[~masked]))
    full = [Respondent(r.id, r.governorate_id, r.sex, r.age_group, r.nationality, float(age[i]))
            for i, r in enumerate(respondents)]
    z = np.array([build_design_row(r, center) for r in full]).reshape(n, -1)[:, :P]

    # group catalog: probes first, then targets. The first probes have
    # known sizes, the last ones a membership question.
    n_known = int(round(c.known_fraction * c.n_probe))
    n_asked = int(round(c.membership_coverage * c.n_probe))
    kinds = []
    for k in range(K):
        known, asked = k < n_known, k >= c.n_probe - n_asked
        if k >= c.n_probe:
            kinds.append("target")
        elif known and asked:
            kinds.append("probe_both")
        elif known:
            kinds.append("probe_known_only")
        else:
            kinds.append("probe_direct")

    # prevalences
    prev = np.empty((G, K))
    for k in range(K):
        lo, hi = c.probe_prevalence if k < c.n_probe else c.target_prevalence
        base_p = np.exp(rng.uniform(np.log(lo), np.log(hi)))
        prev[:, k] = base_p * np.exp(rng.normal(0.0, c.governorate_prevalence_sd, G))
    prev = np.clip(prev, 1e-6, 0.5)

    # degrees, covariate effects, biases
    gov_shift = rng.normal(0.0, c.governorate_degree_sd, G)
    delta = np.log(c.degree_scale) + gov_shift[gidx] + rng.normal(0.0, c.degree_log_sd, n)
    beta = rng.normal(0.0, c.beta_sd, (P, K))
    if P > 1:
        beta[1] = rng.normal(0.0, c.age_beta_sd, K)
    lo, hi = c.tau_N_range
    tau_N = rng.uniform(lo, hi, K)
    omega = sample_lkj(K, c.lkj_eta, rng)
    mu_b, tau = bias_lognormal_params(tau_N)
    Lo = np.linalg.cholesky(omega + 1e-12 * np.eye(K))
    bias = mu_b + tau * (rng.standard_normal((n, K)) @ Lo.T)

    log_rate = delta[:, None] + np.log(prev)[gidx] + z @ beta + bias
    rate = np.exp(np.minimum(log_rate, 30.0))
    raw = rng.poisson(rate)
    if np.mean(rate > c.truncation_cap) > 0.5:
        warnings.warn("more than half of expected counts exceed the truncation cap", stacklevel=2)
    responses = truncate_responses(raw, c.truncation_cap)

    # membership answers
    membership = {}
    member_prob = np.full((G, K), np.nan)
    for k in range(K):
        if kinds[k] in ("probe_direct", "probe_both"):
            member_prob[:, k] = prev[:, k]
            membership[k + 1] = (rng.random(n) < prev[gidx, k]).astype(np.int8)

    groups = []
    for k in range(K):
        known = None
        if kinds[k] in ("probe_both", "probe_known_only"):
            known = {g: int(min(max(round(c.known_size_multiplier * prev[g, k] * pops[g]), 1),
                                pops[g] - 1)) for g in range(G)}
        groups.append(Group(k + 1, f"group{k + 1:02d}", kinds[k], known))

    dataset = SurveyDataset(governorates, respondents, groups, responses,
                            _strata(N, AGE_BANDS), membership, AGE_BANDS)
    truth = GroundTruth(prev, np.exp(delta), beta, tau_N, omega, member_prob, bias, seed,
                        tuple(kinds), {"age_center": center, "raw_counts": raw})
    return dataset, truth


def write_truth(path, truth: GroundTruth, dataset: SurveyDataset):
    """Long-format ``truth.csv``: quantity, governorate, group, index, value."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quantity", "governorate", "group", "index", "value"])
        w.writerow(["seed", "", "", "", truth.seed])
        for g, gov in enumerate(dataset.governorates):
            for k, gr in enumerate(dataset.groups):
                w.writerow(["prevalence", gov.name, gr.id, "", repr(float(truth.prevalence[g, k]))])
        for i, r in enumerate(dataset.respondents):
            w.writerow(["degree", "", "", r.id, repr(float(truth.degree[i]))])
        for p in range(truth.beta.shape[0]):
            for k, gr in enumerate(dataset.groups):
                w.writerow(["beta", "", gr.id, COVARIATES[p], repr(float(truth.beta[p, k]))])
        for k, gr in enumerate(dataset.groups):
            w.writerow(["tau_N", "", gr.id, "", repr(float(truth.tau_N[k]))])
        for a, ga in enumerate(dataset.groups):
            for b, gb in enumerate(dataset.groups):
                w.writerow(["omega", "", ga.id, gb.id, repr(float(truth.omega[a, b]))])


def read_truth_prevalence(path, dataset: SurveyDataset) -> np.ndarray:
    gov = {g.name: g.id for g in dataset.governorates}
    prev = np.full((dataset.G, dataset.K), np.nan)
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["quantity"] == "prevalence":
                prev[gov[row["governorate"]], dataset.group_position[int(row["group"])]] = float(row["value"])
    return prev


def zero_membership_rate(prevalence, n, replicates, seed):
    """Share of simulated samples of size ``n`` in which nobody is a member."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    members = (rng.random((replicates, n)) < prevalence).sum(axis=1)
    return float(np.mean(members == 0))


def scenario_dict(config: ScenarioConfig):
    return asdict(config)


# -- simulation-based calibration -------------------------------------------------

SBC_MIN_REPLICATES = 20
SBC_MAX_FAILURE_RATE = 0.2
SBC_SCENARIO = ScenarioConfig(n=200, K=6, G=3, n_probe=4)


class SBCError(RuntimeError):
    pass


@dataclass(frozen=True)
class SBCRow:
    replicate: int
    seed: int
    governorate: str
    group: int
    kind: str
    level: float
    lower: float
    upper: float
    truth: float
    covered: bool


@dataclass(frozen=True, eq=False)
class SBCReport:
    rows: tuple
    levels: tuple
    replicates: int
    failures: tuple = ()          # (replicate, seed, message)
    warnings: tuple = ()

    def coverage(self, level=None, kind=None):
        """``(rate, binomial standard error, cells)`` for one level and group kind."""
        level = self.levels[-1] if level is None else level
        hits = [r.covered for r in self.rows
                if np.isclose(r.level, level) and (kind is None or r.kind == kind)]
        if not hits:
            return np.nan, np.nan, 0
        p = float(np.mean(hits))
        return p, float(np.sqrt(p * (1 - p) / len(hits))), len(hits)

    def kinds(self):
        return sorted({r.kind for r in self.rows})

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["replicate", "seed", "governorate", "group", "kind", "level", "lower",
                        "upper", "truth", "covered"])
            for r in self.rows:
                w.writerow([r.replicate, r.seed, r.governorate, r.group, r.kind, r.level,
                            repr(r.lower), repr(r.upper), repr(r.truth), int(r.covered)])

    def write_summary_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["level", "kind", "coverage", "mc_se", "cells"])
            for level in self.levels:
                for kind in ["all"] + self.kinds():
                    rate, se, n = self.coverage(level, None if kind == "all" else kind)
                    w.writerow([level, kind, repr(rate), repr(se), n])

    def text(self):
        lines = [f"SBC: {self.replicates} replicates, {len(self.failures)} failed"]
        for level in self.levels:
            for kind in ["all"] + self.kinds():
                rate, se, n = self.coverage(level, None if kind == "all" else kind)
                lines.append(f"  {level:.0%} intervals, {kind:<17} coverage {rate:.3f} "
                             f"(MC se {se:.3f}, {n} cells)")
        for rep, seed, msg in self.failures:
            lines.append(f"  replicate {rep} (seed {seed}) failed: {msg}")
        lines.extend(f"  warning: {w}" for w in self.warnings)
        return "\n".join(lines)


def sbc_replicate(replicate, seed, config, probe_sampler, nsum_sampler, levels,
                  policy_mode="direct_first_known_otherwise"):
    """One calibration replicate: simulate, fit both models, scale, check intervals."""
    from .ard import prepare
    from .nsum import NsumData, sample_posterior
    from .probe import fit_probe_models, prevalence_draws
    from .scaling import ProbePolicy, scale_draws

    dataset, truth = generate(config, seed)
    dataset = prepare(dataset)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        probes = fit_probe_models(dataset, probe_sampler)
        prev = prevalence_draws(probes, dataset.governorates) if probes else None
        post = sample_posterior(NsumData.from_dataset(dataset), nsum_sampler, threads=1)
    scaled = scale_draws(post, prev, dataset, ProbePolicy(policy_mode))
    rows = []
    for g, gov in enumerate(dataset.governorates):
        c = scaled.shift(g)
        for k, group in enumerate(dataset.groups):
            vals = np.exp(scaled.rho_tilde(g, k, c))
            for level in levels:
                lo, hi = np.quantile(vals, [(1 - level) / 2, (1 + level) / 2])
                p = float(truth.prevalence[g, k])
                rows.append(SBCRow(replicate, seed, gov.name, group.id, group.kind, float(level),
                                   float(lo), float(hi), p, bool(lo <= p <= hi)))
    return rows


def _sbc_task(args):
    replicate, seed, kw = args
    try:
        return replicate, seed, sbc_replicate(replicate, seed, **kw), None
    except Exception as exc:  # recorded, not fatal
        return replicate, seed, None, f"{type(exc).__name__}: {exc}"


def sbc_experiment(config: ScenarioConfig = SBC_SCENARIO, replicates=SBC_MIN_REPLICATES,
                   levels=(0.9,), seed=1, probe_sampler=None, nsum_sampler=None, threads=1,
                   policy_mode="direct_first_known_otherwise") -> SBCReport:
    """Coverage of central posterior intervals for ``p_gk`` over simulated replicates.

    Each replicate draws its own seed from ``SeedSequence(seed)``. Failed
    replicates are recorded; more than 20% failures raises ``SBCError``.
    """
    from concurrent.futures import ProcessPoolExecutor

    from .hmc import SamplerConfig

    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    notes = []
    if replicates < SBC_MIN_REPLICATES:
        notes.append(f"{replicates} replicates is below the recommended {SBC_MIN_REPLICATES}; "
                     "coverage estimates are very noisy")
        warnings.warn(notes[-1], stacklevel=2)
    probe_sampler = probe_sampler or SamplerConfig(chains=2, warmup=300, draws_per_chain=300)
    nsum_sampler = nsum_sampler or SamplerConfig(chains=2, warmup=300, draws_per_chain=300)
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(replicates)]
    kw = dict(config=config, probe_sampler=probe_sampler, nsum_sampler=nsum_sampler,
              levels=tuple(levels), policy_mode=policy_mode)
    tasks = [(r, seeds[r], kw) for r in range(replicates)]
    if threads > 1 and replicates > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_sbc_task, tasks))
    else:
        results = [_sbc_task(t) for t in tasks]
    rows, failures = [], []
    for rep, s, res, err in results:
        if err is None:
            rows.extend(res)
        else:
            failures.append((rep, s, err))
    if len(failures) > SBC_MAX_FAILURE_RATE * replicates:
        raise SBCError(f"{len(failures)} of {replicates} replicates failed; first: "
                       f"{failures[0][2]}")
    return SBCReport(tuple(rows), tuple(levels), replicates, tuple(failures), tuple(notes))


__all__ = ["ScenarioConfig", "GroundTruth", "generate", "write_truth", "read_truth_prevalence",
           "zero_membership_rate", "scenario_dict", "sbc_experiment", "sbc_replicate",
           "SBCReport", "SBCRow", "SBCError", "SBC_SCENARIO"]
