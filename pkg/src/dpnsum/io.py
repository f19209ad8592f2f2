"""CSV ingestion/serialization of survey datasets and a binary draw cache.

Dataset directory layout (UTF-8, comma separated, header row required)::

    governorates.csv  governorate, adult_population
    respondents.csv   id, governorate, sex, age_years, age_group, nationality
                      [, raw_weight, weight]
    groups.csv        group_id, label, kind, known_size_national
    known_sizes.csv   group_id, governorate, known_size          (optional)
    responses.csv     respondent_id, group_id, count [, truncated]
    strata.csv        sex, age_group, national_count
    membership.csv    respondent_id, group_id, member            (optional)
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
import warnings
from pathlib import Path

import numpy as np

from .ard import (
    AGE_BANDS,
    DEFAULT_CAP,
    DEFAULT_EXCLUDED_LABELS,
    GROUP_KINDS,
    DataError,
    Governorate,
    Group,
    Respondent,
    ResponseMatrix,
    SurveyDataset,
    band_of,
    normalize_nationality,
    normalize_sex,
    truncate_responses,
)

DATASET_FILES = ("governorates.csv", "respondents.csv", "groups.csv", "responses.csv",
                 "strata.csv")
OPTIONAL_FILES = ("known_sizes.csv", "membership.csv")


def read_rows(path, required):
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing input file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file, header row required")
        fields = [f.strip() for f in reader.fieldnames]
        missing = [c for c in required if c not in fields]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            rows.append((line_no, {k.strip(): (v or "").strip() for k, v in row.items() if k}))
    return rows


def _complain(msg, lenient):
    if lenient:
        warnings.warn(msg, stacklevel=3)
    else:
        raise DataError(msg)


def _float_or_none(text):
    return float(text) if text != "" else None


def load_dataset(directory, cap: int = DEFAULT_CAP, lenient: bool = False,
                 exclude_labels=DEFAULT_EXCLUDED_LABELS) -> SurveyDataset:
    """Read a dataset directory. Malformed rows raise ``DataError`` unless ``lenient``."""
    d = Path(directory)

    governorates = []
    gov_by_name = {}
    for line, row in read_rows(d / "governorates.csv", ["governorate", "adult_population"]):
        try:
            gov = Governorate(len(governorates), row["governorate"], int(row["adult_population"]))
        except (ValueError, DataError) as exc:
            _complain(f"governorates.csv line {line}: {exc}", lenient)
            continue
        if gov.name in gov_by_name:
            _complain(f"governorates.csv line {line}: duplicate governorate {gov.name}", lenient)
            continue
        gov_by_name[gov.name] = gov.id
        governorates.append(gov)

    known = {}
    ks_path = d / "known_sizes.csv"
    if ks_path.exists():
        for line, row in read_rows(ks_path, ["group_id", "governorate", "known_size"]):
            try:
                g = gov_by_name[row["governorate"]]
                known.setdefault(int(row["group_id"]), {})[g] = int(row["known_size"])
            except (KeyError, ValueError) as exc:
                _complain(f"known_sizes.csv line {line}: bad row ({exc})", lenient)

    groups = []
    for line, row in read_rows(d / "groups.csv", ["group_id", "label", "kind", "known_size_national"]):
        try:
            gid = int(row["group_id"])
            if row["label"] in exclude_labels:
                continue
            nat = row["known_size_national"]
            groups.append(Group(gid, row["label"], row["kind"], known.get(gid) or None,
                                int(nat) if nat else None))
        except (ValueError, DataError) as exc:
            _complain(f"groups.csv line {line}: {exc}", lenient)
    gpos = {gr.id: k for k, gr in enumerate(groups)}

    respondents = []
    for line, row in read_rows(d / "respondents.csv",
                               ["id", "governorate", "sex", "age_years", "age_group", "nationality"]):
        try:
            if row["governorate"] not in gov_by_name:
                raise DataError(f"unknown governorate {row['governorate']!r}")
            age = _float_or_none(row["age_years"])
            band = row["age_group"] or (band_of(age) if age is not None else "")
            if not band:
                raise DataError("neither age_years nor age_group given")
            respondents.append(Respondent(
                id=int(row["id"]),
                governorate_id=gov_by_name[row["governorate"]],
                sex=normalize_sex(row["sex"]),
                age_group=band,
                nationality=normalize_nationality(row["nationality"]),
                age_years=age,
                weight=_float_or_none(row.get("weight", "")),
                raw_weight=_float_or_none(row.get("raw_weight", "")),
            ))
        except (ValueError, DataError) as exc:
            _complain(f"respondents.csv line {line}: {exc}", lenient)
    rpos = {r.id: i for i, r in enumerate(respondents)}
    if len(rpos) != len(respondents):
        raise DataError("respondents.csv: duplicate respondent ids")

    n, K = len(respondents), len(groups)
    counts = np.zeros((n, K), dtype=np.int64)
    observed = np.zeros((n, K), dtype=bool)
    flags = np.zeros((n, K), dtype=bool)
    for line, row in read_rows(d / "responses.csv", ["respondent_id", "group_id", "count"]):
        try:
            rid, gid = int(row["respondent_id"]), int(row["group_id"])
            if gid not in gpos:
                # responses to excluded groups are dropped along with the group
                continue
            if rid not in rpos:
                raise DataError(f"unknown respondent {rid}")
            c = int(row["count"])
            if c < 0:
                raise DataError(f"negative count for respondent {rid}")
        except (ValueError, DataError) as exc:
            _complain(f"responses.csv line {line}: {exc}", lenient)
            continue
        counts[rpos[rid], gpos[gid]] = c
        observed[rpos[rid], gpos[gid]] = True
        # a previously written file records cells that were clipped before
        flags[rpos[rid], gpos[gid]] = row.get("truncated", "0") == "1"
    responses = truncate_responses(ResponseMatrix(counts, cap, flags, observed), cap)

    strata = {}
    for line, row in read_rows(d / "strata.csv", ["sex", "age_group", "national_count"]):
        try:
            strata[(normalize_sex(row["sex"]), row["age_group"])] = int(row["national_count"])
        except (ValueError, DataError) as exc:
            _complain(f"strata.csv line {line}: {exc}", lenient)

    membership = {}
    m_path = d / "membership.csv"
    if m_path.exists():
        for line, row in read_rows(m_path, ["respondent_id", "group_id", "member"]):
            try:
                rid, gid = int(row["respondent_id"]), int(row["group_id"])
                if gid not in gpos:
                    continue
                if rid not in rpos:
                    raise DataError(f"unknown respondent {rid}")
                member = int(row["member"])
                if member not in (0, 1):
                    raise DataError(f"member must be 0 or 1, got {member}")
            except (ValueError, DataError) as exc:
                _complain(f"membership.csv line {line}: {exc}", lenient)
                continue
            membership.setdefault(gid, np.full(n, -1, dtype=np.int8))[rpos[rid]] = member

    bands = tuple(b for b in AGE_BANDS)
    return SurveyDataset(governorates, respondents, groups, responses, strata, membership, bands)


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_dataset(dataset: SurveyDataset, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    gov_names = [g.name for g in dataset.governorates]
    _write_csv(d / "governorates.csv", ["governorate", "adult_population"],
               [(g.name, g.adult_population) for g in dataset.governorates])
    weighted = dataset.is_weighted
    header = ["id", "governorate", "sex", "age_years", "age_group", "nationality"]
    if weighted:
        header += ["raw_weight", "weight"]
    rows = []
    for r in dataset.respondents:
        row = [r.id, gov_names[r.governorate_id], r.sex, r.age_years, r.age_group, r.nationality]
        if weighted:
            row += [r.raw_weight, r.weight]
        rows.append(row)
    _write_csv(d / "respondents.csv", header, rows)
    _write_csv(d / "groups.csv", ["group_id", "label", "kind", "known_size_national"],
               [(gr.id, gr.label, gr.kind, gr.known_size_national) for gr in dataset.groups])
    _write_csv(d / "known_sizes.csv", ["group_id", "governorate", "known_size"],
               [(gr.id, gov_names[g], size) for gr in dataset.groups
                for g, size in sorted((gr.known_size or {}).items())])
    counts, observed = dataset.responses.counts, dataset.responses.observed
    flags = dataset.responses.truncated_flags
    _write_csv(d / "responses.csv", ["respondent_id", "group_id", "count", "truncated"],
               [(r.id, gr.id, int(counts[i, k]), int(flags[i, k]))
                for i, r in enumerate(dataset.respondents)
                for k, gr in enumerate(dataset.groups) if observed[i, k]])
    _write_csv(d / "strata.csv", ["sex", "age_group", "national_count"],
               [(s, a, c) for (s, a), c in sorted(dataset.national_strata.items())])
    _write_csv(d / "membership.csv", ["respondent_id", "group_id", "member"],
               [(r.id, gid, int(ind[i]))
                for gid, ind in sorted(dataset.membership.items())
                for i, r in enumerate(dataset.respondents) if ind[i] >= 0])
    return d


DATA_DIR = Path(__file__).resolve().parent / "data"


def load_yearbook(path=None) -> dict[tuple[str, str], int]:
    """``(sex, age_band) -> count`` from a yearbook CSV (sex, age_band, count).

    Without ``path`` the bundled illustrative table is read. Its band values
    are synthetic, constrained to a total of 11,516,000 people and 6,873,239
    adults under the 2/5 rule for ages 18-19.
    """
    path = Path(path) if path is not None else DATA_DIR / "yearbook.csv"
    out = {}
    for line_no, row in read_rows(path, ("sex", "age_band", "count")):
        try:
            key = (normalize_sex(row["sex"]), row["age_band"])
            out[key] = out.get(key, 0) + int(row["count"])
        except ValueError as exc:
            raise DataError(f"{path}:{line_no}: {exc}") from None
    return out


def yearbook_bands(counts: dict[tuple[str, str], int]) -> dict[str, int]:
    """Collapse ``(sex, band)`` counts to per-band totals."""
    out = {}
    for (_, band), c in counts.items():
        out[band] = out.get(band, 0) + c
    return out


def load_probe_catalog(path=None) -> list[dict]:
    """Probe/target group catalog rows (group_id, label, category, kind, ...)."""
    path = Path(path) if path is not None else DATA_DIR / "probe_catalog.csv"
    rows = []
    for line_no, row in read_rows(path, ("group_id", "label", "kind")):
        if row["kind"] not in GROUP_KINDS:
            raise DataError(f"{path}:{line_no}: unknown group kind {row['kind']!r}")
        rows.append(dict(row, group_id=int(row["group_id"])))
    return rows


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dataset_hashes(directory) -> dict[str, str]:
    d = Path(directory)
    return {name: file_sha256(d / name) for name in DATASET_FILES + OPTIONAL_FILES
            if (d / name).exists()}


# --- binary cache -----------------------------------------------------------

CACHE_MAGIC = b"DPNSUMC\x00"
CACHE_VERSION = 1


class CacheError(ValueError):
    pass


def write_cache(path, kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None):
    """Write arrays to a small self-describing binary file.

    Layout: magic, uint16 version, uint32 header length, JSON header, then the
    raw little-endian C-order array buffers in header order.
    """
    specs = []
    payload = io.BytesIO()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        specs.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape)})
        payload.write(a.tobytes())
    header = json.dumps({"kind": kind, "arrays": specs, "meta": meta or {}},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<HI", CACHE_VERSION, len(header)))
        fh.write(header)
        fh.write(payload.getvalue())


def read_cache(path, kind: str | None = None):
    """Return ``(arrays, meta)``; raises ``CacheError`` on a bad magic, version or kind."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:len(CACHE_MAGIC)] != CACHE_MAGIC:
        raise CacheError(f"{path}: not a dpnsum cache")
    off = len(CACHE_MAGIC)
    version, hlen = struct.unpack_from("<HI", data, off)
    if version != CACHE_VERSION:
        raise CacheError(f"{path}: cache version {version}, expected {CACHE_VERSION}")
    off += struct.calcsize("<HI")
    header = json.loads(data[off:off + hlen])
    off += hlen
    if kind is not None and header["kind"] != kind:
        raise CacheError(f"{path}: cache holds {header['kind']!r}, expected {kind!r}")
    arrays = {}
    for spec in header["arrays"]:
        dt = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        a = np.frombuffer(data, dtype=dt, count=count, offset=off).reshape(spec["shape"])
        arrays[spec["name"]] = a.copy()
        off += count * dt.itemsize
    return arrays, header["meta"]
