"""Direct probe-group prevalence from respondents' own membership answers.

Each probe group gets an independent Bayesian logistic model with a
governorate random intercept::

    logit(gamma_g) = alpha + sigma_u * u_g,   u_g ~ Normal(0, 1)
    alpha ~ Normal(0, 10^2),                   sigma_u ~ half-Cauchy(0, 2.5)

The posterior keeps ``gamma_g`` strictly positive in governorates where no
respondent reported membership.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from functools import partial

import numpy as np
from scipy.special import expit, log_expit

from . import diagnostics
from .ard import DataError, SurveyDataset
from .hmc import SamplerConfig, run_chain, run_chains
from .io import read_cache, write_cache

ALPHA_SD = 10.0
SIGMA_SCALE = 2.5
DIVERGENCE_WARN_RATE = 0.05
RHAT_WARN = 1.05
GAMMA_FLOOR = np.finfo(float).tiny


class ProbeModelError(DataError):
    pass


@dataclass(frozen=True, eq=False)
class MembershipData:
    group_id: int
    indicators: np.ndarray
    governorate_ids: np.ndarray
    n_governorates: int
    weights: np.ndarray | None = None

    def __post_init__(self):
        ind = np.asarray(self.indicators, dtype=bool)
        gid = np.asarray(self.governorate_ids, dtype=np.intp)
        if ind.shape != gid.shape:
            raise DataError("indicators and governorate ids differ in length")
        if self.weights is not None and np.shape(self.weights) != ind.shape:
            raise DataError("weights and indicators differ in length")
        if gid.size and (gid.min() < 0 or gid.max() >= self.n_governorates):
            raise DataError("governorate id out of range")
        object.__setattr__(self, "indicators", ind)
        object.__setattr__(self, "governorate_ids", gid)

    def sufficient_stats(self, weighted=False):
        """Per-governorate (weighted) member and non-member totals."""
        w = self.weights if (weighted and self.weights is not None) else np.ones(self.indicators.size)
        members = np.bincount(self.governorate_ids, weights=w * self.indicators,
                              minlength=self.n_governorates)
        others = np.bincount(self.governorate_ids, weights=w * ~self.indicators,
                             minlength=self.n_governorates)
        return members, others

    @classmethod
    def from_dataset(cls, dataset: SurveyDataset, group_id: int):
        group = dataset.group(group_id)
        if not group.has_membership_question:
            raise DataError(f"group {group_id} ({group.label}) has no membership question")
        if group_id not in dataset.membership:
            raise DataError(f"no membership answers for group {group_id} ({group.label})")
        ind = dataset.membership[group_id]
        keep = ind >= 0
        weights = dataset.weights[keep] if dataset.is_weighted else None
        return cls(group_id, ind[keep] == 1, dataset.gov_index[keep], dataset.G, weights)


class LogisticModel:
    """Log posterior of the random-intercept model on ``(alpha, log sigma_u, u)``."""

    def __init__(self, members, others):
        self.members = np.asarray(members, dtype=float)
        self.others = np.asarray(others, dtype=float)
        self.G = self.members.size
        self.dim = self.G + 2

    def unpack(self, theta):
        return theta[0], np.exp(theta[1]), theta[2:]

    def logp_grad(self, theta):
        alpha, sigma, u = self.unpack(theta)
        eta = alpha + sigma * u
        lp = float(np.sum(self.members * log_expit(eta) + self.others * log_expit(-eta)))
        d_eta = self.members - (self.members + self.others) * expit(eta)
        lp += -0.5 * (alpha / ALPHA_SD) ** 2 - 0.5 * float(u @ u)
        lp += -np.log1p((sigma / SIGMA_SCALE) ** 2) + theta[1]
        grad = np.empty(self.dim)
        grad[0] = d_eta.sum() - alpha / ALPHA_SD ** 2
        grad[1] = sigma * float(d_eta @ u) - 2 * sigma ** 2 / (SIGMA_SCALE ** 2 + sigma ** 2) + 1.0
        grad[2:] = sigma * d_eta - u
        return lp, grad


@dataclass(frozen=True, eq=False)
class LogisticPosterior:
    group_id: int
    alpha: np.ndarray          # (R,)
    u: np.ndarray              # (R, G) governorate offsets sigma_u * u_raw
    sigma_u: np.ndarray        # (R,)
    chains: int
    diagnostics: list = field(default_factory=list)
    divergences: int = 0
    warnings: tuple = ()

    @property
    def R(self):
        return self.alpha.size

    def gamma(self):
        """``(R, G)`` prevalence draws."""
        g = expit(self.alpha[:, None] + self.u)
        return np.clip(g, GAMMA_FLOOR, 1.0 - np.finfo(float).eps)


def _probe_chain(c, model, theta0s, config, seeds):
    return run_chain(model.logp_grad, theta0s[c], config, seeds[c])


def fit_probe_model(data: MembershipData, config: SamplerConfig, weighted: bool = False,
                    threads: int = 1) -> LogisticPosterior:
    """Sample the logistic random-intercept posterior for one probe group."""
    members, others = data.sufficient_stats(weighted)
    if data.indicators.sum() == 0:
        raise ProbeModelError(f"group {data.group_id}: no respondent reported membership in any "
                              "governorate; use known sizes for this group instead")
    model = LogisticModel(members, others)
    seeds = np.random.SeedSequence([config.seed, data.group_id]).spawn(config.chains)
    pooled = members.sum() / (members.sum() + others.sum())
    theta0s = []
    for s in seeds:
        rng = np.random.Generator(np.random.PCG64(s.spawn(1)[0]))
        th = rng.uniform(-config.init_jitter, config.init_jitter, model.dim)
        th[0] += np.log(pooled / (1 - pooled))
        theta0s.append(th)
    fn = partial(_probe_chain, model=model, theta0s=theta0s, config=config, seeds=seeds)
    results = run_chains(fn, config.chains, threads)
    draws = np.stack([r.draws for r in results])          # (chains, D, dim)
    alpha = draws[:, :, 0]
    sigma = np.exp(draws[:, :, 1])
    u = sigma[:, :, None] * draws[:, :, 2:]
    gamma = expit(alpha[:, :, None] + u)
    diag = (diagnostics.summarize_block(alpha, "alpha")
            + diagnostics.summarize_block(sigma, "sigma_u")
            + diagnostics.summarize_block(u, "u")
            + diagnostics.summarize_block(gamma, "gamma"))
    n_div = int(sum(r.divergent.sum() for r in results))
    notes = []
    total = config.chains * config.draws_per_chain
    if n_div > DIVERGENCE_WARN_RATE * total:
        notes.append(f"group {data.group_id}: {n_div} divergent transitions of {total}")
    bad = [d["parameter"] for d in diag if not d["rhat"] <= RHAT_WARN]
    if bad:
        notes.append(f"group {data.group_id}: R-hat above {RHAT_WARN} for {', '.join(bad[:5])}")
    for note in notes:
        warnings.warn(note, stacklevel=2)
    return LogisticPosterior(data.group_id, alpha.reshape(-1), u.reshape(-1, data.n_governorates),
                             sigma.reshape(-1), config.chains, diag, n_div, tuple(notes))


def fit_probe_models(dataset: SurveyDataset, config: SamplerConfig, weighted: bool = False,
                     threads: int = 1, group_ids=None) -> dict[int, LogisticPosterior]:
    """Fit every probe group that has membership answers."""
    if group_ids is None:
        group_ids = [g.id for g in dataset.groups
                     if g.has_membership_question and g.id in dataset.membership]
    out = {}
    for gid in group_ids:
        data = MembershipData.from_dataset(dataset, gid)
        out[gid] = fit_probe_model(data, config, weighted=weighted, threads=threads)
    return out


@dataclass(frozen=True, eq=False)
class PrevalenceDraws:
    group_ids: tuple
    gamma: np.ndarray          # (R, G, K_probe)
    sizes: np.ndarray          # (R, G, K_probe)

    @property
    def R(self):
        return self.gamma.shape[0]

    def for_group(self, group_id):
        return self.gamma[:, :, self.group_ids.index(group_id)]


def prevalence_draws(posteriors, governorates) -> PrevalenceDraws:
    """Stack ``gamma = inv_logit(alpha + u_g)`` and ``sizes = gamma * N_g``."""
    if isinstance(posteriors, LogisticPosterior):
        posteriors = {posteriors.group_id: posteriors}
    if not posteriors:
        raise ValueError("no probe posteriors given")
    ids = tuple(posteriors)
    R = {p.R for p in posteriors.values()}
    if len(R) != 1:
        raise ValueError(f"probe posteriors have differing draw counts {sorted(R)}")
    gamma = np.stack([posteriors[k].gamma() for k in ids], axis=-1)
    N_g = np.array([g.adult_population for g in governorates], dtype=float)
    return PrevalenceDraws(ids, gamma, gamma * N_g[None, :, None])


def write_prevalence_csv(path, draws: PrevalenceDraws, governorates):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["draw", "group", "governorate", "gamma"])
        for r in range(draws.R):
            for k, gid in enumerate(draws.group_ids):
                for g, gov in enumerate(governorates):
                    w.writerow([r, gid, gov.name, repr(float(draws.gamma[r, g, k]))])


def save_probe_cache(path, posteriors: dict[int, LogisticPosterior], meta=None):
    arrays = {}
    for gid, p in posteriors.items():
        arrays[f"{gid}/alpha"] = p.alpha
        arrays[f"{gid}/u"] = p.u
        arrays[f"{gid}/sigma_u"] = p.sigma_u
    meta = dict(meta or {})
    meta["groups"] = {str(gid): {"chains": p.chains, "divergences": p.divergences,
                                 "warnings": list(p.warnings)} for gid, p in posteriors.items()}
    write_cache(path, "probe_posterior", arrays, meta)


def load_probe_cache(path):
    arrays, meta = read_cache(path, "probe_posterior")
    out = {}
    for key, info in meta["groups"].items():
        gid = int(key)
        out[gid] = LogisticPosterior(gid, arrays[f"{key}/alpha"], arrays[f"{key}/u"],
                                     arrays[f"{key}/sigma_u"], info["chains"], [],
                                     info["divergences"], tuple(info["warnings"]))
    return out, meta
