import shutil

import numpy as np
import pytest

from dpnsum.ard import DataError, compute_weights
from dpnsum.io import (
    CacheError,
    load_dataset,
    load_probe_catalog,
    read_cache,
    write_cache,
    write_dataset,
)
from dpnsum.simgen import ScenarioConfig, generate


@pytest.fixture
def written(tmp_path):
    ds, _ = generate(ScenarioConfig(n=40, K=6, G=3, n_probe=4, age_missing_frac=0.1,
                                    truncation_cap=20), 2)
    d = write_dataset(ds, tmp_path / "data")
    return ds, d


def test_round_trip_is_exact(written, tmp_path):
    ds, d = written
    back = load_dataset(d, cap=20)
    assert back == ds
    assert back.responses.truncated_flags.any()
    # writing the reloaded dataset again yields identical bytes
    d2 = write_dataset(back, tmp_path / "again")
    for f in d.iterdir():
        assert f.read_bytes() == (d2 / f.name).read_bytes(), f.name


def test_round_trip_with_weights(written, tmp_path):
    ds, _ = written
    from dpnsum.ard import impute_ages
    ds = compute_weights(ds.with_respondents(impute_ages(ds.respondents)))
    back = load_dataset(write_dataset(ds, tmp_path / "w"), cap=20)
    assert back.is_weighted
    np.testing.assert_array_equal(back.weights, ds.weights)
    assert back == ds


def test_missing_file_is_named(written):
    _, d = written
    (d / "strata.csv").unlink()
    with pytest.raises(DataError, match="strata.csv"):
        load_dataset(d)


def test_malformed_rows_rejected_or_skipped(written):
    _, d = written
    with open(d / "respondents.csv", "a", encoding="utf-8") as fh:
        fh.write("999,Nowhere,female,30,30-34,Jordanian\n")
    with pytest.raises(DataError, match="line .*Nowhere"):
        load_dataset(d, cap=20)
    with pytest.warns(UserWarning, match="Nowhere"):
        ds = load_dataset(d, cap=20, lenient=True)
    assert 999 not in [r.id for r in ds.respondents]


def test_other_occupation_group_excluded(written, tmp_path):
    _, d = written
    text = (d / "groups.csv").read_text(encoding="utf-8")
    text += "99,Other (respondent provided occupation),probe_direct,\n"
    (d / "groups.csv").write_text(text, encoding="utf-8")
    with open(d / "responses.csv", "a", encoding="utf-8") as fh:
        fh.write("1,99,3,0\n")
    ds = load_dataset(d, cap=20)
    assert 99 not in [g.id for g in ds.groups]


def test_unknown_nationality_maps_to_other(written):
    _, d = written
    lines = (d / "respondents.csv").read_text(encoding="utf-8").splitlines()
    parts = lines[1].split(",")
    parts[5] = "Iraqi"
    lines[1] = ",".join(parts)
    (d / "respondents.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    assert load_dataset(d, cap=20).respondents[0].nationality == "Other"


def test_cache_round_trip_and_errors(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([1, 2, 3], dtype=np.int64)}
    p = tmp_path / "x.bin"
    write_cache(p, "thing", arrays, {"seed": 3})
    got, meta = read_cache(p, "thing")
    assert meta == {"seed": 3}
    for k in arrays:
        np.testing.assert_array_equal(got[k], arrays[k])
        assert got[k].dtype == arrays[k].dtype
    with pytest.raises(CacheError, match="expected 'other'"):
        read_cache(p, "other")
    raw = bytearray(p.read_bytes())
    raw[8] = 99          # version field
    p.write_bytes(bytes(raw))
    with pytest.raises(CacheError, match="version"):
        read_cache(p)
    (tmp_path / "junk.bin").write_bytes(b"hello world")
    with pytest.raises(CacheError, match="not a dpnsum cache"):
        read_cache(tmp_path / "junk.bin")


def test_probe_catalog_shape():
    rows = load_probe_catalog()
    kinds = {r["kind"] for r in rows}
    assert kinds <= {"probe_direct", "probe_known_only", "probe_both", "target"}
    assert len({r["group_id"] for r in rows}) == len(rows)
