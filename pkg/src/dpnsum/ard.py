"""Survey data model for aggregated relational data (ARD).

Holds respondents, groups, governorates and the response matrix, and
implements the preprocessing that precedes model fitting: post-stratification
weights, age imputation, response truncation and covariate design rows.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np

SEXES = ("male", "female")
NATIONALITIES = ("Jordanian", "Syrian", "Egyptian", "Other")
GROUP_KINDS = ("probe_direct", "probe_known_only", "probe_both", "target")
AGE_BANDS = ("18-19", "20-24", "25-29", "30-34", "35-39", "40-44", "45-49",
             "50-54", "55-59", "60-64", "65-69", "70-74", "75-79", "80+")
COVARIATES = ("male", "age", "syrian", "egyptian", "other_nationality")
DEFAULT_CAP = 100
# Respondents could name an occupation freely; those answers are not analysed.
DEFAULT_EXCLUDED_LABELS = ("Other (respondent provided occupation)",)


class DataError(ValueError):
    """Raised when survey inputs violate the data model."""


def band_limits(band: str) -> tuple[float, float]:
    """``'20-24' -> (20, 25)``, ``'80+' -> (80, inf)``."""
    band = band.strip()
    if band.endswith("+"):
        return float(band[:-1]), math.inf
    lo, hi = band.split("-")
    return float(lo), float(hi) + 1.0


def band_of(age: float, bands: Sequence[str] = AGE_BANDS) -> str:
    for band in bands:
        lo, hi = band_limits(band)
        if lo <= age < hi:
            return band
    raise DataError(f"age {age} falls outside every age band")


def normalize_sex(value: str) -> str:
    v = value.strip().lower()
    if v in ("male", "m"):
        return "male"
    if v in ("female", "f"):
        return "female"
    raise DataError(f"unknown sex {value!r}")


def normalize_nationality(value: str) -> str:
    v = value.strip().lower()
    for nat in NATIONALITIES:
        if v == nat.lower():
            return nat
    return "Other"


@dataclass(frozen=True)
class Governorate:
    id: int
    name: str
    adult_population: int

    def __post_init__(self):
        if self.adult_population <= 0:
            raise DataError(f"governorate {self.name!r} needs a positive adult population")


@dataclass(frozen=True)
class Respondent:
    id: int
    governorate_id: int
    sex: str
    age_group: str
    nationality: str
    age_years: float | None = None
    weight: float | None = None
    raw_weight: float | None = None

    def __post_init__(self):
        if self.sex not in SEXES:
            raise DataError(f"respondent {self.id}: unknown sex {self.sex!r}")
        if self.nationality not in NATIONALITIES:
            raise DataError(f"respondent {self.id}: unknown nationality {self.nationality!r}")
        if self.age_years is not None:
            lo, hi = band_limits(self.age_group)
            if not lo <= self.age_years < hi:
                raise DataError(f"respondent {self.id}: age {self.age_years} "
                                f"outside age group {self.age_group}")
        if self.weight is not None and not self.weight > 0:
            raise DataError(f"respondent {self.id}: weight must be positive")


@dataclass(frozen=True)
class Group:
    id: int
    label: str
    kind: str
    known_size: Mapping[int, int] | None = None
    known_size_national: int | None = None

    def __post_init__(self):
        if self.kind not in GROUP_KINDS:
            raise DataError(f"group {self.id}: unknown kind {self.kind!r}")
        if self.kind == "probe_known_only" and not self.has_known_size:
            raise DataError(f"group {self.id} ({self.label}) is probe_known_only "
                            "but has no known size")

    @property
    def has_known_size(self) -> bool:
        return bool(self.known_size) or self.known_size_national is not None

    @property
    def is_probe(self) -> bool:
        return self.kind != "target"

    @property
    def has_membership_question(self) -> bool:
        return self.kind in ("probe_direct", "probe_both")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ResponseMatrix:
    """``n x K`` ARD counts; unobserved cells hold 0 and ``observed=False``."""

    counts: np.ndarray
    truncation_cap: int
    truncated_flags: np.ndarray
    observed: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "counts", _frozen(np.asarray(self.counts, dtype=np.int64)))
        object.__setattr__(self, "truncated_flags", _frozen(np.asarray(self.truncated_flags, dtype=bool)))
        object.__setattr__(self, "observed", _frozen(np.asarray(self.observed, dtype=bool)))
        if self.counts.shape != self.truncated_flags.shape or self.counts.shape != self.observed.shape:
            raise DataError("response arrays disagree in shape")

    @property
    def shape(self):
        return self.counts.shape

    def __eq__(self, other):
        if not isinstance(other, ResponseMatrix):
            return NotImplemented
        return (self.truncation_cap == other.truncation_cap
                and np.array_equal(self.counts, other.counts)
                and np.array_equal(self.truncated_flags, other.truncated_flags)
                and np.array_equal(self.observed, other.observed))


def truncate_responses(matrix, cap: int = DEFAULT_CAP, respondent_ids=None) -> ResponseMatrix:
    """Clip counts at ``cap`` and flag the clipped cells.

    ``matrix`` is a ``ResponseMatrix`` or a raw integer array. Flags already
    set on a ``ResponseMatrix`` are kept, so repeated calls are idempotent.
    """
    if cap < 1:
        raise DataError(f"truncation cap must be >= 1, got {cap}")
    if isinstance(matrix, ResponseMatrix):
        raw = np.asarray(matrix.counts)
        observed = matrix.observed
        prior_flags = matrix.truncated_flags
    else:
        raw = np.asarray(matrix)
        observed = np.ones(raw.shape, dtype=bool)
        prior_flags = np.zeros(raw.shape, dtype=bool)
    if raw.size and raw.min() < 0:
        row = int(np.argwhere(raw < 0)[0, 0])
        who = respondent_ids[row] if respondent_ids is not None else row
        raise DataError(f"negative count for respondent {who}")
    clipped = raw > cap
    return ResponseMatrix(np.minimum(raw, cap), cap, prior_flags | clipped, observed)


@dataclass(frozen=True, eq=False)
class SurveyDataset:
    governorates: tuple[Governorate, ...]
    respondents: tuple[Respondent, ...]
    groups: tuple[Group, ...]
    responses: ResponseMatrix
    national_strata: Mapping[tuple[str, str], int]
    membership: Mapping[int, np.ndarray] = field(default_factory=dict)
    age_bands: tuple[str, ...] = AGE_BANDS

    def __post_init__(self):
        object.__setattr__(self, "governorates", tuple(self.governorates))
        object.__setattr__(self, "respondents", tuple(self.respondents))
        object.__setattr__(self, "groups", tuple(self.groups))
        object.__setattr__(self, "national_strata", dict(self.national_strata))
        object.__setattr__(self, "membership",
                           {int(k): _frozen(np.asarray(v, dtype=np.int8))
                            for k, v in self.membership.items()})
        G = len(self.governorates)
        for g, gov in enumerate(self.governorates):
            if gov.id != g:
                raise DataError(f"governorate ids must be 0..G-1 in order; {gov.name} has id {gov.id}")
        for r in self.respondents:
            if not 0 <= r.governorate_id < G:
                raise DataError(f"respondent {r.id} references unknown governorate {r.governorate_id}")
        if self.responses.shape != (len(self.respondents), len(self.groups)):
            raise DataError(f"response matrix shape {self.responses.shape} does not match "
                            f"{len(self.respondents)} respondents x {len(self.groups)} groups")
        ids = [gr.id for gr in self.groups]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate group ids")
        for gid, ind in self.membership.items():
            if gid not in ids:
                raise DataError(f"membership given for unknown group {gid}")
            if ind.shape != (len(self.respondents),):
                raise DataError(f"membership for group {gid} has wrong length")
        for gr in self.groups:
            for g, size in (gr.known_size or {}).items():
                if not 0 <= g < G:
                    raise DataError(f"group {gr.id}: known size for unknown governorate {g}")
                if not 0 < size < self.governorates[g].adult_population:
                    raise DataError(f"group {gr.id}: known size {size} in "
                                    f"{self.governorates[g].name} outside (0, N_g)")

    @property
    def n(self) -> int:
        return len(self.respondents)

    @property
    def K(self) -> int:
        return len(self.groups)

    @property
    def G(self) -> int:
        return len(self.governorates)

    @property
    def total_adult_population(self) -> int:
        return sum(g.adult_population for g in self.governorates)

    @cached_property
    def gov_index(self) -> np.ndarray:
        return _frozen(np.array([r.governorate_id for r in self.respondents], dtype=np.intp))

    @cached_property
    def group_position(self) -> dict[int, int]:
        return {gr.id: k for k, gr in enumerate(self.groups)}

    @cached_property
    def strata_observed(self) -> dict[tuple[str, str, int], int]:
        """Observed counts ``O[s, a, g]``."""
        return dict(Counter((r.sex, r.age_group, r.governorate_id) for r in self.respondents))

    @property
    def weights(self) -> np.ndarray:
        if any(r.weight is None for r in self.respondents):
            raise DataError("weights have not been computed")
        return np.array([r.weight for r in self.respondents], dtype=float)

    @property
    def is_weighted(self) -> bool:
        return all(r.weight is not None for r in self.respondents)

    def group(self, group_id: int) -> Group:
        return self.groups[self.group_position[group_id]]

    def with_respondents(self, respondents) -> "SurveyDataset":
        return replace(self, respondents=tuple(respondents))

    def __eq__(self, other):
        if not isinstance(other, SurveyDataset):
            return NotImplemented
        return (self.governorates == other.governorates
                and self.respondents == other.respondents
                and self.groups == other.groups
                and self.responses == other.responses
                and self.national_strata == other.national_strata
                and self.age_bands == other.age_bands
                and self.membership.keys() == other.membership.keys()
                and all(np.array_equal(v, other.membership[k]) for k, v in self.membership.items()))


def compute_weights(dataset: SurveyDataset, normalize: bool = True) -> SurveyDataset:
    """Post-stratification weights ``w = N_sa * n * N_g / (N * O_sag)``.

    The formula value is kept as ``raw_weight``. With ``normalize`` the
    ``weight`` used downstream is rescaled to mean one within each
    governorate.
    """
    n = dataset.n
    N = dataset.total_adult_population
    observed = dataset.strata_observed
    raw = np.empty(n)
    for i, r in enumerate(dataset.respondents):
        key = (r.sex, r.age_group)
        if key not in dataset.national_strata:
            raise DataError(f"stratum {r.sex}/{r.age_group} missing from national strata "
                            f"(respondent {r.id})")
        O = observed.get((r.sex, r.age_group, r.governorate_id), 0)
        if O <= 0:
            raise AssertionError(f"occupied cell {key} has zero observed count")
        N_g = dataset.governorates[r.governorate_id].adult_population
        raw[i] = dataset.national_strata[key] * n * N_g / (N * O)
    final = raw.copy()
    if normalize:
        gidx = dataset.gov_index
        for g in np.unique(gidx):
            sel = gidx == g
            final[sel] = raw[sel] / raw[sel].mean()
    respondents = [replace(r, weight=float(final[i]), raw_weight=float(raw[i]))
                   for i, r in enumerate(dataset.respondents)]
    return dataset.with_respondents(respondents)


def adult_population_from_yearbook(age_band_counts: Mapping[str, int]) -> int:
    """Adults (18+) from 5-year yearbook bands.

    Ages 18-19 are taken as 2/5 of the 15-19 band; bands starting at 20 or
    above are summed whole, younger bands ignored.
    """
    bands = {b.strip(): c for b, c in age_band_counts.items()}
    if "15-19" not in bands:
        raise DataError("yearbook bands must include 15-19")
    total = 0.4 * bands["15-19"]
    for band, count in bands.items():
        if band_limits(band)[0] >= 20:
            total += count
    return int(math.floor(total + 0.5))


def strata_from_yearbook(counts: Mapping[tuple, int], bands: Sequence[str] = AGE_BANDS):
    """National ``(sex, band) -> count`` for the survey age bands.

    ``counts`` maps ``(sex, yearbook band)`` to people. The survey's 18-19
    band is 2/5 of the 15-19 yearbook band, per sex; other bands must match
    yearbook bands exactly.
    """
    out = {}
    for sex in SEXES:
        for band in bands:
            if band == "18-19":
                if (sex, "15-19") not in counts:
                    raise DataError(f"yearbook lacks the 15-19 band for {sex}")
                out[(sex, band)] = int(math.floor(0.4 * counts[(sex, "15-19")] + 0.5))
            elif (sex, band) in counts:
                out[(sex, band)] = int(counts[(sex, band)])
            else:
                raise DataError(f"yearbook lacks band {band} for {sex}")
    return out


def impute_ages(respondents: Sequence[Respondent]) -> list[Respondent]:
    """Fill missing ages with the mean observed age of the same age group."""
    by_group = defaultdict(list)
    for r in respondents:
        if r.age_years is not None:
            by_group[r.age_group].append(r.age_years)
    out = []
    for r in respondents:
        if r.age_years is None:
            if not by_group[r.age_group]:
                raise DataError(f"age group {r.age_group} has no observed ages to impute from")
            r = replace(r, age_years=float(np.mean(by_group[r.age_group])))
        out.append(r)
    return out


def build_design_row(respondent: Respondent, age_center: float) -> np.ndarray:
    """Covariates ``[male, age - center, Syrian, Egyptian, Other]``.

    A Jordanian female aged ``age_center`` maps to the zero vector.
    """
    if respondent.age_years is None:
        raise DataError(f"respondent {respondent.id} has no age; impute first")
    nat = respondent.nationality
    return np.array([
        1.0 if respondent.sex == "male" else 0.0,
        respondent.age_years - age_center,
        1.0 if nat == "Syrian" else 0.0,
        1.0 if nat == "Egyptian" else 0.0,
        1.0 if nat == "Other" else 0.0,
    ])


def mean_age(respondents: Sequence[Respondent]) -> float:
    ages = [r.age_years for r in respondents if r.age_years is not None]
    return float(np.mean(ages)) if ages else 0.0


def design_matrix(dataset: SurveyDataset, age_center: float | None = None) -> np.ndarray:
    if age_center is None:
        age_center = mean_age(dataset.respondents)
    rows = [build_design_row(r, age_center) for r in dataset.respondents]
    return np.array(rows).reshape(dataset.n, len(COVARIATES))


def prepare(dataset: SurveyDataset, normalize_weights: bool = True) -> SurveyDataset:
    """Impute ages and compute weights if not already done."""
    if any(r.age_years is None for r in dataset.respondents):
        dataset = dataset.with_respondents(impute_ages(dataset.respondents))
    if not dataset.is_weighted:
        dataset = compute_weights(dataset, normalize=normalize_weights)
    return dataset
