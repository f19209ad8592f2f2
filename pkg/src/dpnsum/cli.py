"""Command-line front end: ``dpnsum <command> --config run.json``.

Commands share one JSON configuration file; ``--set key=value`` overrides
any (dotted) key with a JSON-parsed value. Every command writes into the
configured output directory and records what it read and wrote in
``manifest.json`` there.

Exit codes: 0 success, 2 input/validation error, 3 success with diagnostic
warnings (outputs are still written).
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .ard import DEFAULT_CAP, DataError, compute_weights, impute_ages, prepare
from .hmc import SamplerConfig
from .io import CacheError, dataset_hashes, file_sha256, load_dataset, read_cache, write_cache, \
    write_dataset
from .nsum import NsumData, NsumModelError, load_posterior_cache, sample_posterior, \
    save_posterior_cache
from .probe import ProbeModelError, fit_probe_models, load_probe_cache, prevalence_draws, \
    save_probe_cache, write_prevalence_csv
from .scaling import MODES, POLICY_MODES, ProbePolicy, ScaledDraws, ScalingError, \
    equal_weight_shift, scale_draws, summarize
from .simgen import SBC_SCENARIO, SBCError, ScenarioConfig, generate, sbc_experiment, \
    scenario_dict, write_truth

EXIT_OK, EXIT_INPUT, EXIT_WARN = 0, 2, 3

DEFAULT_CONFIG = {
    "data_dir": None,
    "output_dir": "dpnsum_out",
    "seed": 1,
    "truncation_cap": DEFAULT_CAP,
    "normalize_weights": True,
    "lenient": False,
    "probe_sampler": {"chains": 4, "warmup": 500, "draws_per_chain": 500,
                      "target_accept": 0.95},
    "nsum_sampler": {"chains": 4, "warmup": 500, "draws_per_chain": 500,
                     "target_accept": 0.8, "thin_bias": 10},
    "nsum_model": {"prior_var": 100.0, "lkj_eta": 2.0, "eta_clamp": 30.0,
                   "centered": ["delta", "rho"]},
    "policies": ["direct_first_known_otherwise"],
    "probe_set": None,
    "scaling_mode": "full_bootstrap",
    "point": "mean",
    "estimands": ["prevalence", "size", "degree"],
    "round5": False,
    "probe_weighted": False,
    "weighted_degree": True,
    "scenario": {},
    "sbc": {"replicates": 20, "levels": [0.9], "scenario": scenario_dict(SBC_SCENARIO),
            "policy": "direct_first_known_otherwise"},
}

# keys that cannot change any output and are left out of the config hash;
# input data is tracked by content hash in the manifest instead of by path
_UNHASHED = ("threads", "output_dir", "data_dir")


class ConfigError(ValueError):
    pass


# -- configuration -------------------------------------------------------------

def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _set_dotted(cfg, assignment):
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, text = assignment.split("=", 1)
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    node = cfg
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r}: {p} is not a section")
    node[parts[-1]] = value


def load_config(path=None, overrides=(), **flags):
    """Defaults, then the JSON file, then ``--set`` overrides, then explicit flags."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            user = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{p}: top level must be an object")
        unknown = sorted(set(user) - set(DEFAULT_CONFIG))
        if unknown:
            raise ConfigError(f"{p}: unknown config keys {unknown}")
        cfg = _merge(cfg, user)
    for item in overrides:
        _set_dotted(cfg, item)
    for k, v in flags.items():
        if v is not None:
            cfg[k] = v
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    for name in ("probe_sampler", "nsum_sampler"):
        try:
            sampler_config(cfg, name)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}: {exc}") from None
    for mode in cfg["policies"]:
        if mode not in POLICY_MODES:
            raise ConfigError(f"unknown probe policy {mode!r}; choose from {list(POLICY_MODES)}")
    if cfg["scaling_mode"] not in MODES:
        raise ConfigError(f"unknown scaling mode {cfg['scaling_mode']!r}; choose from {list(MODES)}")
    if cfg["point"] not in ("mean", "median"):
        raise ConfigError("point must be 'mean' or 'median'")
    for e in cfg["estimands"]:
        if e not in ("prevalence", "size", "degree"):
            raise ConfigError(f"unknown estimand {e!r}")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    for name in ("normalize_weights", "round5", "probe_weighted", "weighted_degree"):
        if not isinstance(cfg[name], bool):
            raise ConfigError(f"{name} must be true or false")


def sampler_config(cfg, name):
    d = dict(cfg[name])
    d.setdefault("seed", cfg["seed"])
    d["threads"] = cfg.get("threads", 1) or 1
    return SamplerConfig.from_dict(d)


def config_hash(cfg):
    clean = {k: v for k, v in cfg.items() if k not in _UNHASHED}
    text = json.dumps(clean, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


# -- run directory and manifest ------------------------------------------------

class Run:
    """Output directory plus its manifest for one command invocation."""

    def __init__(self, cfg, command):
        self.cfg = cfg
        self.command = command
        self.out = Path(cfg["output_dir"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs = {}
        self.outputs = []

    def path(self, name):
        return self.out / name

    def read(self, path):
        path = Path(path)
        if not path.exists():
            raise DataError(f"missing input file: {path}")
        self.inputs[str(path)] = file_sha256(path)
        return path

    def read_dataset_dir(self, directory):
        for name, digest in dataset_hashes(directory).items():
            self.inputs[str(Path(directory) / name)] = digest

    def wrote(self, name):
        self.outputs.append(name)

    def finish(self, status, notes=()):
        mpath = self.path("manifest.json")
        manifest = {}
        if mpath.exists():
            try:
                manifest = json.loads(mpath.read_text(encoding="utf-8"))
            except json.JSONDecodeError:
                manifest = {}
        manifest.update({"version": __version__, "seed": self.cfg["seed"],
                         "config_hash": config_hash(self.cfg)})
        steps = manifest.setdefault("steps", {})
        steps[self.command] = {
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": {n: file_sha256(self.path(n)) for n in sorted(set(self.outputs))},
            "status": status,
            "warnings": list(notes),
        }
        manifest["config"] = {k: v for k, v in self.cfg.items() if k not in _UNHASHED}
        mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _dataset_dir(cfg, prefer_weighted=True):
    weighted = Path(cfg["output_dir"]) / "weighted"
    if prefer_weighted and (weighted / "respondents.csv").exists():
        return weighted
    if cfg["data_dir"] is None:
        raise DataError("no data_dir configured (set it in the config or pass --data)")
    d = Path(cfg["data_dir"])
    if not d.is_dir():
        raise DataError(f"data directory not found: {d}")
    return d


def _load(run, prefer_weighted=True, require_weights=True):
    d = _dataset_dir(run.cfg, prefer_weighted)
    run.read_dataset_dir(d)
    ds = load_dataset(d, cap=run.cfg["truncation_cap"], lenient=run.cfg["lenient"])
    if require_weights and not ds.is_weighted:
        raise DataError(f"{d / 'respondents.csv'} has no weights; run `dpnsum weights` first")
    return prepare(ds, run.cfg["normalize_weights"])


def _write_diagnostics(path, rows, extra=()):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["block", "parameter", "rhat", "ess_bulk", "ess_tail"])
        for block, r in list(extra) + [("", r) for r in rows]:
            w.writerow([block, r["parameter"], _num(r["rhat"]), _num(r["ess_bulk"]),
                        _num(r["ess_tail"])])


def _num(x):
    return repr(float(x)) if np.isfinite(x) else "nan"


def _capture(fn, *args, **kw):
    """Run ``fn`` while collecting (not printing) its warnings."""
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = fn(*args, **kw)
    return result, [str(w.message) for w in caught]


def prepare_ages(ds):
    if any(r.age_years is None for r in ds.respondents):
        ds = ds.with_respondents(impute_ages(ds.respondents))
    return ds


# -- commands ------------------------------------------------------------------

def cmd_weights(run):
    ds = load_dataset(_dataset_dir(run.cfg, prefer_weighted=False), cap=run.cfg["truncation_cap"],
                      lenient=run.cfg["lenient"])
    run.read_dataset_dir(_dataset_dir(run.cfg, prefer_weighted=False))
    ds = compute_weights(prepare_ages(ds), normalize=run.cfg["normalize_weights"])
    write_dataset(ds, run.path("weighted"))
    for name in sorted(p.name for p in run.path("weighted").iterdir()):
        run.wrote(f"weighted/{name}")
    w = ds.weights
    print(f"weights: {ds.n} respondents, {ds.G} governorates; "
          f"weight range {w.min():.4g}-{w.max():.4g}")
    return []


def cmd_fit_probe(run):
    ds = _load(run)
    cfg = sampler_config(run.cfg, "probe_sampler")
    posts, notes = _capture(fit_probe_models, ds, cfg, weighted=run.cfg["probe_weighted"],
                           threads=cfg.threads)
    if not posts:
        raise DataError("dataset has no probe groups with membership answers")
    save_probe_cache(run.path("probe_posterior.bin"), posts,
                     {"config_hash": config_hash(run.cfg), "seed": run.cfg["seed"]})
    run.wrote("probe_posterior.bin")
    extra = [(f"group {gid}", r) for gid, p in posts.items() for r in p.diagnostics]
    _write_diagnostics(run.path("probe_diagnostics.csv"), [], extra)
    run.wrote("probe_diagnostics.csv")
    write_prevalence_csv(run.path("probe_prevalence_draws.csv"),
                         prevalence_draws(posts, ds.governorates), ds.governorates)
    run.wrote("probe_prevalence_draws.csv")
    div = sum(p.divergences for p in posts.values())
    print(f"fit-probe: {len(posts)} probe groups, {div} divergent transitions")
    return notes


def cmd_fit_nsum(run):
    ds = _load(run)
    cfg = sampler_config(run.cfg, "nsum_sampler")
    model = dict(run.cfg["nsum_model"])
    model["centered"] = tuple(model.get("centered", ()))
    post, notes = _capture(sample_posterior, NsumData.from_dataset(ds), cfg, **model)
    save_posterior_cache(run.path("nsum_posterior.bin"), post,
                         {"config_hash": config_hash(run.cfg), "seed": run.cfg["seed"],
                          "group_ids": [g.id for g in ds.groups]})
    run.wrote("nsum_posterior.bin")
    _write_diagnostics(run.path("nsum_diagnostics.csv"), post.diagnostics)
    run.wrote("nsum_diagnostics.csv")
    print(f"fit-nsum: {post.M} draws, {post.divergences} divergent, "
          f"max R-hat {post.max_rhat():.3f}")
    return notes


def _policy_file(mode, stem, ext):
    return f"{stem}_{ProbePolicy(mode).short}.{ext}"


def _load_nsum(run, ds):
    path = run.read(run.path("nsum_posterior.bin"))
    post = load_posterior_cache(path)
    if post.meta.get("group_ids") not in (None, [g.id for g in ds.groups]):
        raise CacheError(f"{path}: fitted groups {post.meta['group_ids']} do not match the dataset")
    return post


def _load_prevalence(run, ds):
    path = run.path("probe_posterior.bin")
    if not path.exists():
        return None
    posts, _ = load_probe_cache(run.read(path))
    return prevalence_draws(posts, ds.governorates) if posts else None


def cmd_scale(run):
    ds = _load(run)
    post = _load_nsum(run, ds)
    prev = _load_prevalence(run, ds)
    probe_set = run.cfg["probe_set"]
    for mode in run.cfg["policies"]:
        scaled = scale_draws(post, prev, ds, ProbePolicy(mode, probe_set), run.cfg["scaling_mode"])
        name = _policy_file(mode, "scaling", "bin")
        write_cache(run.path(name), "scaling",
                    {"gamma": scaled.gamma, "probe_positions": np.array(scaled.probe_positions)},
                    {"policy": mode, "mode": scaled.mode,
                     "sources": [[gid, s] for gid, s in scaled.sources]})
        run.wrote(name)
        name = _policy_file(mode, "shift", "csv")
        with open(run.path(name), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["governorate", "mean", "q025", "q975", "mode", "policy"])
            for g, gov in enumerate(scaled.governorate_names):
                c = scaled.shift(g)
                lo, hi = np.quantile(c, [0.025, 0.975])
                w.writerow([gov, repr(float(c.mean())), repr(float(lo)), repr(float(hi)),
                            scaled.mode, mode])
        run.wrote(name)
        print(f"scale [{mode}]: probes {', '.join(f'{g}:{s}' for g, s in scaled.sources)}; "
              f"{scaled.length} scaled draws per cell")
    return []


def _load_scaled(run, ds, post, mode):
    path = run.path(_policy_file(mode, "scaling", "bin"))
    if not path.exists():
        raise DataError(f"missing input file: {path} (run `dpnsum scale` first)")
    arrays, meta = read_cache(run.read(path), "scaling")
    if meta["policy"] != mode:
        raise CacheError(f"{path}: holds policy {meta['policy']}, expected {mode}")
    return ScaledDraws(
        rho=post.draws["rho"], delta=post.draws["delta"], gamma=arrays["gamma"],
        probe_positions=tuple(int(p) for p in arrays["probe_positions"]),
        sources=tuple((int(g), s) for g, s in meta["sources"]), gidx=np.asarray(ds.gov_index),
        weights=ds.weights, mode=meta["mode"], policy=mode, shift_fn=equal_weight_shift,
        group_ids=tuple(g.id for g in ds.groups),
        governorate_names=tuple(g.name for g in ds.governorates),
        populations=np.array([g.adult_population for g in ds.governorates], dtype=float))


def cmd_summarize(run):
    ds = _load(run)
    post = _load_nsum(run, ds)
    notes = []
    for mode in run.cfg["policies"]:
        scaled = _load_scaled(run, ds, post, mode)
        for estimand in run.cfg["estimands"]:
            table = summarize(scaled, estimand, run.cfg["point"], round5=run.cfg["round5"],
                              weighted=run.cfg["weighted_degree"])
            name = _policy_file(mode, f"summary_{estimand}", "csv")
            table.write_csv(run.path(name))
            run.wrote(name)
            print(f"# {estimand} [{mode}, {scaled.mode}]")
            print(table.format())
    return notes


def cmd_simulate(run):
    scenario = ScenarioConfig.from_dict(run.cfg["scenario"])
    ds, truth = _capture(generate, scenario, run.cfg["seed"])[0]
    d = run.path("data")
    write_dataset(ds, d)
    write_truth(run.path("truth.csv"), truth, ds)
    (run.path("scenario.json")).write_text(
        json.dumps(scenario_dict(scenario), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for name in sorted(p.name for p in d.iterdir()):
        run.wrote(f"data/{name}")
    run.wrote("truth.csv")
    run.wrote("scenario.json")
    print(f"simulate: n={ds.n} K={ds.K} G={ds.G} written to {d}")
    return []


def cmd_sbc(run):
    sb = run.cfg["sbc"]
    scenario = ScenarioConfig.from_dict(sb.get("scenario", {}))
    report, notes = _capture(
        sbc_experiment, scenario, replicates=int(sb.get("replicates", 20)),
        levels=tuple(sb.get("levels", (0.9,))), seed=run.cfg["seed"],
        probe_sampler=sampler_config(run.cfg, "probe_sampler"),
        nsum_sampler=sampler_config(run.cfg, "nsum_sampler"),
        threads=run.cfg.get("threads", 1) or 1,
        policy_mode=sb.get("policy", "direct_first_known_otherwise"))
    report.write_csv(run.path("sbc_rows.csv"))
    report.write_summary_csv(run.path("sbc_summary.csv"))
    run.path("sbc_report.txt").write_text(report.text() + "\n", encoding="utf-8")
    for name in ("sbc_rows.csv", "sbc_summary.csv", "sbc_report.txt"):
        run.wrote(name)
    print(report.text())
    return notes + [f"replicate {r} failed: {m}" for r, _, m in report.failures]


def cmd_validate(run):
    d = _dataset_dir(run.cfg, prefer_weighted=False)
    run.read_dataset_dir(d)
    ds, notes = _capture(load_dataset, d, cap=run.cfg["truncation_cap"],
                         lenient=run.cfg["lenient"])
    kinds = {}
    for g in ds.groups:
        kinds[g.kind] = kinds.get(g.kind, 0) + 1
    print(f"validate: {ds.n} respondents, {ds.K} groups, {ds.G} governorates")
    print("  groups by kind: " + ", ".join(f"{k}={v}" for k, v in sorted(kinds.items())))
    print(f"  truncated cells: {int(ds.responses.truncated_flags.sum())}")
    for gid, ind in sorted(ds.membership.items()):
        if not np.any(ind == 1):
            notes.append(f"probe group {gid} ({ds.group(gid).label}): no respondent reported "
                         "membership; direct estimation is impossible")
    compute_weights(prepare_ages(ds), normalize=run.cfg["normalize_weights"])
    return notes


COMMANDS = {
    "weights": (cmd_weights, "compute post-stratification weights"),
    "fit-probe": (cmd_fit_probe, "fit the direct probe-group prevalence models"),
    "fit-nsum": (cmd_fit_nsum, "fit the NSUM model"),
    "scale": (cmd_scale, "scale NSUM draws against probe prevalences"),
    "summarize": (cmd_summarize, "write prevalence, size and degree summaries"),
    "simulate": (cmd_simulate, "generate a synthetic dataset with ground truth"),
    "sbc": (cmd_sbc, "run a simulation-based calibration experiment"),
    "validate": (cmd_validate, "check a dataset directory and configuration"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="dpnsum", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"dpnsum {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("-c", "--config", help="JSON run configuration")
        p.add_argument("--data", dest="data_dir", help="dataset directory (overrides data_dir)")
        p.add_argument("-o", "--out", dest="output_dir", help="output directory")
        p.add_argument("--seed", type=int, help="random seed")
        p.add_argument("--threads", type=int, default=1, help="worker processes (default 1)")
        p.add_argument("--lenient", action="store_true", default=None,
                       help="skip malformed input rows with a warning")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config key (dotted, JSON value)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    fn = COMMANDS[args.command][0]
    try:
        cfg = load_config(args.config, args.overrides, data_dir=args.data_dir,
                          output_dir=args.output_dir, seed=args.seed, lenient=args.lenient)
        cfg["threads"] = max(1, args.threads)
        run = Run(cfg, args.command)
        notes = fn(run)
    except (ConfigError, DataError, CacheError, ProbeModelError, NsumModelError, ScalingError,
            SBCError, FileNotFoundError) as exc:
        print(f"dpnsum {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    for note in notes:
        print(f"warning: {note}", file=sys.stderr)
    status = EXIT_WARN if notes else EXIT_OK
    run.finish(status, notes)
    return status


if __name__ == "__main__":
    sys.exit(main())
