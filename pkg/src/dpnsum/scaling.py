"""Bootstrap scaling of NSUM draws against probe-group prevalences.

The NSUM posterior only identifies ``delta_i + rho_gk``. For every NSUM draw
``m`` and probe-prevalence draw ``r`` a per-governorate shift

    c_g[m, r] = log( mean_{k in probe set} exp(rho_gk[m]) / gamma_gk[r] )

moves the level from the log-prevalences to the log-degrees:
``rho~ = rho - c`` and ``delta~ = delta + c``. Probe prevalences come from the
direct (membership-question) posterior or from known sizes, as chosen by a
``ProbePolicy``. With ``averaged_gamma`` the prevalence draws are averaged over
``r`` first, which gives ``M`` draws and anti-conservative intervals.

Draws are never stored as the full ``M x R`` fan-out; shift constants are
built per governorate on demand. Quantiles use linear interpolation between
order statistics (numpy's default, "type 7").
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .ard import DataError, SurveyDataset

MODES = ("full_bootstrap", "averaged_gamma")
POLICY_MODES = ("direct_first_known_otherwise", "known_first_direct_otherwise",
                "direct_only", "known_only")
ESTIMANDS = ("prevalence", "size", "degree", "target_size")
ANTI_CONSERVATIVE = "anti-conservative"


class ScalingError(DataError):
    pass


# -- shift constant -------------------------------------------------------------

def shift_constant(rho_draw, gamma_draw, probe_set=None):
    """Equal-weight shift ``log(mean_k exp(rho_k) / gamma_k)`` for one draw pair.

    ``rho_draw`` and ``gamma_draw`` are indexable by the entries of
    ``probe_set`` (dicts keyed by group id, or arrays with ``probe_set``
    holding positions). Without ``probe_set`` every entry is used.
    """
    if probe_set is None:
        probe_set = list(rho_draw.keys()) if isinstance(rho_draw, dict) else range(len(rho_draw))
    probe_set = list(probe_set)
    if not probe_set:
        raise ScalingError("probe set is empty")
    total = 0.0
    for k in probe_set:
        g = float(gamma_draw[k])
        if not g > 0:
            raise ScalingError(f"probe group {k}: prevalence {g!r} is not positive")
        total += np.exp(float(rho_draw[k])) / g
    return float(np.log(total / len(probe_set)))


def equal_weight_shift(rho, gamma):
    """Vectorized equal-weight shift.

    Parameters
    ----------
    rho : (M, Kp) probe log-prevalences for one governorate
    gamma : (R, Kp) probe prevalences for the same governorate

    Returns
    -------
    (M, R) shift constants
    """
    rho = np.asarray(rho, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    top = rho.max(axis=1, keepdims=True)
    ratio = np.exp(rho - top) @ (1.0 / gamma).T
    return np.log(ratio / rho.shape[1]) + top


# -- probe policy ----------------------------------------------------------------

@dataclass(frozen=True)
class ProbePolicy:
    mode: str = "direct_first_known_otherwise"
    probe_set: tuple | None = None      # group ids; None means every usable probe group

    def __post_init__(self):
        if self.mode not in POLICY_MODES:
            raise ValueError(f"unknown probe policy {self.mode!r}; choose from {POLICY_MODES}")
        if self.probe_set is not None:
            object.__setattr__(self, "probe_set", tuple(int(k) for k in self.probe_set))

    @property
    def short(self):
        return {"direct_first_known_otherwise": "direct_first",
                "known_first_direct_otherwise": "known_first"}.get(self.mode, self.mode)


def _known_prevalence(group, dataset):
    """Known prevalence per governorate, NaN where unknown.

    A national-only size is spread as the national prevalence ``N_k / N``.
    """
    G = dataset.G
    out = np.full(G, np.nan)
    pops = np.array([g.adult_population for g in dataset.governorates], dtype=float)
    if group.known_size:
        for g, gov in enumerate(dataset.governorates):
            if gov.id in group.known_size:
                out[g] = group.known_size[gov.id] / pops[g]
    if np.isnan(out).any() and group.known_size_national:
        out[np.isnan(out)] = group.known_size_national / dataset.total_adult_population
    return out


def resolve_sources(policy: ProbePolicy, dataset: SurveyDataset, prevalence=None):
    """Pick a prevalence source per probe group under ``policy``.

    Returns ``[(group_id, "direct" | "known"), ...]`` in probe-set order.
    """
    direct_ids = set(prevalence.group_ids) if prevalence is not None else set()
    if policy.probe_set is None:
        candidates = [g.id for g in dataset.groups if g.is_probe]
        strict = False
    else:
        candidates = list(policy.probe_set)
        strict = True
    out = []
    for gid in candidates:
        group = dataset.group(gid)
        known = _known_prevalence(group, dataset)
        has_known = bool(np.all(np.isfinite(known)))
        has_direct = gid in direct_ids
        if policy.mode == "direct_first_known_otherwise":
            order = ("direct", "known")
        elif policy.mode == "known_first_direct_otherwise":
            order = ("known", "direct")
        elif policy.mode == "direct_only":
            order = ("direct",)
        else:
            order = ("known",)
        source = next((s for s in order if (has_direct if s == "direct" else has_known)), None)
        if source is None:
            if strict:
                missing = [gov.name for g, gov in enumerate(dataset.governorates)
                           if not np.isfinite(known[g])] or ["all"]
                raise ScalingError(
                    f"probe group {gid} ({group.label}): no prevalence source under "
                    f"{policy.mode} (direct draws: {'yes' if has_direct else 'no'}; "
                    f"known size missing for governorate(s) {', '.join(missing)})")
            continue
        out.append((gid, source))
    if not out:
        raise ScalingError(f"no usable probe groups under policy {policy.mode}")
    return out


def probe_gamma(sources, dataset: SurveyDataset, prevalence=None):
    """``(R, G, Kp)`` prevalence draws; known sources are constant over ``r``."""
    uses_direct = any(s == "direct" for _, s in sources)
    R = prevalence.R if uses_direct else 1
    gamma = np.empty((R, dataset.G, len(sources)))
    for j, (gid, source) in enumerate(sources):
        if source == "direct":
            gamma[:, :, j] = prevalence.for_group(gid)
        else:
            gamma[:, :, j] = _known_prevalence(dataset.group(gid), dataset)[None, :]
    bad = np.argwhere(~(gamma > 0))
    if bad.size:
        _, g, j = bad[0]
        raise ScalingError(f"probe group {sources[j][0]} has non-positive prevalence in "
                           f"governorate {dataset.governorates[g].name}")
    return gamma


# -- scaled draws ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ScaledDraws:
    """Lazily scaled draws.

    ``rho_tilde`` / ``delta_tilde`` return flattened fan-outs in ``m``-major
    order, so element ``m * R + r`` belongs to the pair ``(m, r)``.
    """

    rho: np.ndarray              # (M, G, K) unscaled
    delta: np.ndarray            # (M, n) unscaled
    gamma: np.ndarray            # (R, G, Kp); R = 1 under averaged_gamma
    probe_positions: tuple       # column of each probe group in rho
    sources: tuple               # ((group_id, source), ...)
    gidx: np.ndarray             # (n,) governorate index per respondent
    weights: np.ndarray          # (n,) respondent weights for degree averages
    mode: str = "full_bootstrap"
    policy: str = "direct_first_known_otherwise"
    shift_fn: Callable = equal_weight_shift
    group_ids: tuple = ()
    governorate_names: tuple = ()
    populations: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def M(self):
        return self.rho.shape[0]

    @property
    def R(self):
        return self.gamma.shape[0]

    @property
    def G(self):
        return self.rho.shape[1]

    @property
    def K(self):
        return self.rho.shape[2]

    @property
    def length(self):
        return self.M * self.R

    @property
    def probe_set(self):
        return tuple(gid for gid, _ in self.sources)

    def shift(self, g):
        """``(M, R)`` shift constants for governorate ``g``."""
        rho_p = self.rho[:, g, list(self.probe_positions)]
        return self.shift_fn(rho_p, self.gamma[:, g, :])

    def iter_shift(self, g, chunk=256):
        """Yield ``(m_slice, c_chunk)`` over blocks of NSUM draws."""
        rho_p = self.rho[:, g, list(self.probe_positions)]
        for start in range(0, self.M, chunk):
            sl = slice(start, min(start + chunk, self.M))
            yield sl, self.shift_fn(rho_p[sl], self.gamma[:, g, :])

    def rho_tilde(self, g, k, c=None):
        c = self.shift(g) if c is None else c
        return (self.rho[:, g, k][:, None] - c).reshape(-1)

    def delta_tilde(self, i, c=None):
        g = int(self.gidx[i])
        c = self.shift(g) if c is None else c
        return (self.delta[:, i][:, None] + c).reshape(-1)

    def degree_draws(self, g, weighted=True, c=None):
        """Per-draw mean degree ``mean_{i in g} exp(delta~_i)`` (length ``M * R``)."""
        members = np.flatnonzero(self.gidx == g)
        if members.size == 0:
            raise ScalingError(f"no respondents in governorate {self.governorate_names[g]}")
        w = self.weights[members] if weighted else np.ones(members.size)
        d = self.delta[:, members]
        top = d.max(axis=1, keepdims=True)
        log_avg = np.log(np.exp(d - top) @ w / w.sum()) + top[:, 0]
        c = self.shift(g) if c is None else c
        return np.exp(log_avg[:, None] + c).reshape(-1)


def scale_draws(nsum, prevalence, dataset: SurveyDataset, policy: ProbePolicy | None = None,
                mode="full_bootstrap", shift_fn=None) -> ScaledDraws:
    """Scale NSUM draws against probe prevalences (direct draws and/or known sizes).

    Parameters
    ----------
    nsum : NsumPosterior, or a mapping with ``rho`` (M, G, K) and ``delta`` (M, n)
    prevalence : PrevalenceDraws or None (known sizes only)
    dataset : the fitted ``SurveyDataset`` (governorates, groups, weights)
    policy : ProbePolicy
    mode : "full_bootstrap" or "averaged_gamma"
    shift_fn : callable ``(rho (M, Kp), gamma (R, Kp)) -> (M, R)``
    """
    if mode not in MODES:
        raise ValueError(f"unknown scaling mode {mode!r}; choose from {MODES}")
    policy = policy or ProbePolicy()
    draws = nsum.draws if hasattr(nsum, "draws") else nsum
    rho = np.asarray(draws["rho"], dtype=float)
    delta = np.asarray(draws["delta"], dtype=float)
    if rho.shape[1:] != (dataset.G, dataset.K):
        raise ScalingError(f"NSUM draws cover {rho.shape[1:]} (G, K) cells, dataset has "
                           f"{(dataset.G, dataset.K)}")
    if delta.shape[1] != dataset.n:
        raise ScalingError(f"NSUM draws cover {delta.shape[1]} respondents, dataset has {dataset.n}")
    if prevalence is not None and prevalence.gamma.shape[1] != dataset.G:
        raise ScalingError("probe prevalence draws and dataset differ in governorates")
    sources = resolve_sources(policy, dataset, prevalence)
    gamma = probe_gamma(sources, dataset, prevalence)
    if mode == "averaged_gamma":
        gamma = gamma.mean(axis=0, keepdims=True)
    positions = tuple(dataset.group_position[gid] for gid, _ in sources)
    weights = dataset.weights if dataset.is_weighted else np.ones(dataset.n)
    return ScaledDraws(
        rho=rho, delta=delta, gamma=gamma, probe_positions=positions, sources=tuple(sources),
        gidx=np.asarray(dataset.gov_index), weights=np.asarray(weights, dtype=float), mode=mode,
        policy=policy.mode, shift_fn=shift_fn or equal_weight_shift,
        group_ids=tuple(g.id for g in dataset.groups),
        governorate_names=tuple(g.name for g in dataset.governorates),
        populations=np.array([g.adult_population for g in dataset.governorates], dtype=float))


# -- summaries -------------------------------------------------------------------

@dataclass(frozen=True)
class SummaryRow:
    estimand: str
    governorate: str
    group: str
    point: float
    q025: float
    q975: float
    mode: str
    policy: str


@dataclass(frozen=True, eq=False)
class SummaryTable:
    rows: tuple
    point: str = "mean"
    rounded: bool = False
    note: str = ""

    FIELDS = ("estimand", "governorate", "group", "point", "q025", "q975", "mode", "policy")

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def lookup(self, governorate, group=""):
        for row in self.rows:
            if row.governorate == governorate and row.group == str(group):
                return row
        raise KeyError((governorate, group))

    def write_csv(self, path, append=False):
        with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if not append:
                w.writerow(self.FIELDS)
            for row in self.rows:
                w.writerow([row.estimand, row.governorate, row.group, repr(float(row.point)),
                            repr(float(row.q025)), repr(float(row.q975)), row.mode, row.policy])

    def format(self, digits=None):
        """Text lines such as ``Irbid 500 (470–530)``."""
        lines = []
        for row in self.rows:
            label = row.governorate + (f" [{row.group}]" if row.group else "")
            lines.append(f"{label} {format_interval(row.point, row.q025, row.q975, digits)}")
        if self.note:
            lines.append(f"({self.note})")
        return "\n".join(lines)


def round_to(x, base=5):
    """Round half away from zero to the nearest multiple of ``base``."""
    x = np.asarray(x, dtype=float) / base
    return np.sign(x) * np.floor(np.abs(x) + 0.5) * base


def _fmt(v, digits):
    if digits is None:
        return f"{v:.0f}" if abs(v) >= 1 and float(v).is_integer() else f"{v:.4g}"
    return f"{v:.{digits}f}"


def format_interval(point, lo, hi, digits=None):
    return f"{_fmt(point, digits)} ({_fmt(lo, digits)}–{_fmt(hi, digits)})"


def summarize_values(values, point="mean"):
    """``(point, q025, q975)`` of a 1-D draw array."""
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.size == 0:
        raise ValueError("no draws to summarize")
    if point == "mean":
        p = float(values.mean())
    elif point == "median":
        p = float(np.median(values))
    else:
        raise ValueError(f"unknown point summary {point!r}")
    lo, hi = np.quantile(values, [0.025, 0.975])
    return p, float(lo), float(hi)


def summarize(scaled: ScaledDraws, estimand="prevalence", point="mean", groups=None,
              round5=False, weighted=True) -> SummaryTable:
    """Posterior summaries of scaled draws.

    ``prevalence`` and ``size`` summarize ``exp(rho~)`` (times ``N_g``) per
    governorate and group; ``degree`` summarizes the (weighted) governorate
    mean of ``exp(delta~)``. ``round5`` rounds every number to the nearest 5.
    """
    if estimand not in ("prevalence", "size", "degree"):
        raise ValueError(f"unknown estimand {estimand!r}")
    note = f"{ANTI_CONSERVATIVE} intervals (probe prevalences averaged before scaling)" \
        if scaled.mode == "averaged_gamma" and estimand == "degree" else ""
    rows = []
    positions = _group_positions(scaled, groups)
    for g, name in enumerate(scaled.governorate_names):
        c = scaled.shift(g)
        if estimand == "degree":
            stats = summarize_values(scaled.degree_draws(g, weighted, c), point)
            rows.append(_row(estimand, name, "", stats, scaled, round5))
            continue
        for k in positions:
            vals = np.exp(scaled.rho_tilde(g, k, c))
            if estimand == "size":
                vals *= scaled.populations[g]
            stats = summarize_values(vals, point)
            rows.append(_row(estimand, name, str(scaled.group_ids[k]), stats, scaled, round5))
    return SummaryTable(tuple(rows), point, round5, note)


def adjusted_target_size(scaled: ScaledDraws, beta_male, groups=None, point="mean",
                         round5=False) -> SummaryTable:
    """Sizes ``exp(rho~ + beta_male / 2) * N_g``, averaging over respondent sex.

    ``beta_male`` is ``(M, K)``; draw ``m`` is paired with every ``(m, r)``.
    """
    beta_male = np.asarray(beta_male, dtype=float)
    if beta_male.shape != (scaled.M, scaled.K):
        raise ScalingError(f"beta_male draws have shape {beta_male.shape}, expected "
                           f"{(scaled.M, scaled.K)}")
    rows = []
    for g, name in enumerate(scaled.governorate_names):
        c = scaled.shift(g)
        for k in _group_positions(scaled, groups):
            log_size = scaled.rho[:, g, k][:, None] + 0.5 * beta_male[:, k][:, None] - c
            vals = np.exp(log_size.reshape(-1)) * scaled.populations[g]
            rows.append(_row("target_size", name, str(scaled.group_ids[k]),
                             summarize_values(vals, point), scaled, round5))
    return SummaryTable(tuple(rows), point, round5)


def target_positions(dataset: SurveyDataset):
    return [dataset.group_position[g.id] for g in dataset.groups if g.kind == "target"]


def _group_positions(scaled, groups):
    if groups is None:
        return list(range(scaled.K))
    ids = list(scaled.group_ids)
    return [ids.index(int(gid)) for gid in groups]


def _row(estimand, gov, group, stats, scaled, round5):
    p, lo, hi = stats
    if round5:
        p, lo, hi = (float(round_to(v)) for v in (p, lo, hi))
    return SummaryRow(estimand, gov, group, p, lo, hi, scaled.mode, scaled.policy)


def male_coefficient(nsum, covariates=None):
    """``(M, K)`` draws of the male covariate effect (zeros if not modeled)."""
    draws = nsum.draws if hasattr(nsum, "draws") else nsum
    beta = np.asarray(draws["beta"])
    covariates = list(covariates if covariates is not None
                      else getattr(nsum, "meta", {}).get("covariates", ()))
    if "male" not in covariates:
        return np.zeros((beta.shape[0], beta.shape[2]))
    return beta[:, covariates.index("male"), :]


# -- policy comparison -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PolicyComparison:
    tables: dict                 # policy mode -> SummaryTable of target sizes
    overlap_fraction: float
    mean_width: dict             # policy mode -> mean interval width

    def widths(self, mode):
        return np.array([r.q975 - r.q025 for r in self.tables[mode]])


def compare_policies(nsum, prevalence, dataset: SurveyDataset,
                     modes=("direct_first_known_otherwise", "known_first_direct_otherwise"),
                     groups=None, point="mean") -> PolicyComparison:
    """Target-size intervals under several probe policies on the same fit."""
    groups = groups if groups is not None else [g.id for g in dataset.groups
                                                if g.kind == "target"]
    beta_male = male_coefficient(nsum)
    tables = {}
    for mode in modes:
        scaled = scale_draws(nsum, prevalence, dataset, ProbePolicy(mode))
        tables[mode] = adjusted_target_size(scaled, beta_male, groups, point)
    first = tables[modes[0]].rows
    overlaps = []
    for i, row in enumerate(first):
        ok = all(max(row.q025, t.rows[i].q025) <= min(row.q975, t.rows[i].q975)
                 for t in tables.values())
        overlaps.append(ok)
    widths = {m: float(np.mean([r.q975 - r.q025 for r in t.rows])) for m, t in tables.items()}
    return PolicyComparison(tables, float(np.mean(overlaps)) if overlaps else np.nan, widths)


def write_scaled_draws_csv(path, scaled: ScaledDraws, groups=None):
    """Full ``M x R`` export of ``rho~`` (can be very large)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["m", "r", "governorate", "group", "rho_tilde"])
        for g, name in enumerate(scaled.governorate_names):
            for sl, c in scaled.iter_shift(g):
                for k in _group_positions(scaled, groups):
                    vals = scaled.rho[sl, g, k][:, None] - c
                    for mi, m in enumerate(range(sl.start, sl.stop)):
                        for r in range(scaled.R):
                            w.writerow([m, r, name, scaled.group_ids[k], repr(float(vals[mi, r]))])


__all__ = ["ProbePolicy", "ScaledDraws", "SummaryTable", "SummaryRow", "shift_constant",
           "equal_weight_shift", "resolve_sources", "probe_gamma", "scale_draws", "summarize",
           "summarize_values", "adjusted_target_size", "male_coefficient", "compare_policies",
           "format_interval", "round_to", "target_positions", "write_scaled_draws_csv",
           "ScalingError", "MODES", "POLICY_MODES"]
