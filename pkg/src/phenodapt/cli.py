"""Command-line entry points: generate | run | eval | report.

All commands read a JSON config (--config) and write artifacts under --out.
Outputs are deterministic for a fixed config: CSV floats use repr() and no
timestamps enter any hashed file.
"""

import argparse
import dataclasses
import json
import multiprocessing
import sys
from pathlib import Path

import numpy as np

from .evalreport import (MetricError, aggregate, cells_read, cells_write,
                         emit_scatter, report_text, species_rows)
from .model import ModelConfig, PhenoFormer
from .synthdata import (ClimateConfig, CsvFormatError, Dataset, SPLIT_KINDS,
                        SpeciesParams, SplitError, apply_split, csv_read,
                        csv_write, generate_dataset, shift_stats, subset,
                        to_arrays)
from .trainer import (ADAPTATION_METHODS, METHODS, TrainConfig, fit,
                      fit_thermal_time, predict_for_method,
                      predict_thermal_time)

SCHEMA_VERSION = 1

_TUPLE_FIELDS = ("year_range", "elevation_range", "latitude_range")


class ConfigError(ValueError):
    """Raised for malformed configs; the message names the offending field."""


# ---------------------------------------------------------------------------
# config parsing


def _build(cls, payload, where, extra=None):
    """Instantiate a dataclass from a JSON object, naming unknown fields."""
    if not isinstance(payload, dict):
        raise ConfigError(f"{where}: expected an object, got {type(payload).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in payload:
        if key not in names:
            raise ConfigError(f"{where}.{key}: unknown field "
                              f"(known: {', '.join(sorted(names))})")
    kwargs = {k: tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v
              for k, v in payload.items()}
    if extra:
        kwargs.update(extra)
    try:
        obj = cls(**kwargs)
        if hasattr(obj, "validate"):
            obj.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    return obj


def load_config(path, allowed: set) -> dict:
    if path is None:
        raise ConfigError("--config is required for this command")
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    version = cfg.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {version}")
    for key in cfg:
        if key != "schema_version" and key not in allowed:
            raise ConfigError(f"{key}: unknown field "
                              f"(known: {', '.join(sorted(allowed))})")
    return cfg


def _species_list(spec):
    if spec is None:
        return None
    if not isinstance(spec, list) or not spec:
        raise ConfigError("species: expected a nonempty list of parameter objects")
    return [_build(SpeciesParams, s, f"species[{i}]") for i, s in enumerate(spec)]


def load_records(cfg: dict, seed_override=None):
    """Resolve the dataset block to a list of records (synthetic or CSV)."""
    ds = cfg.get("dataset")
    if not isinstance(ds, dict):
        raise ConfigError("dataset: required object with 'synthetic' or 'csv'")
    unknown = set(ds) - {"synthetic", "csv"}
    if unknown:
        raise ConfigError(f"dataset.{sorted(unknown)[0]}: unknown field")
    if ("synthetic" in ds) == ("csv" in ds):
        raise ConfigError("dataset: exactly one of 'synthetic' or 'csv'")
    if "csv" in ds:
        path = Path(ds["csv"])
        if not path.exists():
            raise ConfigError(f"dataset.csv: file not found: {path}")
        records = csv_read(path)
        if not records:
            raise ConfigError(f"dataset.csv: no data rows in {path}")
        return records
    extra = {"seed": seed_override} if seed_override is not None else None
    climate = _build(ClimateConfig, ds["synthetic"], "dataset.synthetic", extra=extra)
    return generate_dataset(climate, _species_list(cfg.get("species")))


def _split_spec(cfg: dict, required: bool = True):
    spec = cfg.get("split")
    if spec is None:
        if required:
            raise ConfigError("split: required object, e.g. "
                              '{"kind": "elevation", "test_frac": 0.25}')
        return None
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError('split: expected an object with a "kind" key')
    if spec["kind"] not in SPLIT_KINDS:
        raise ConfigError(f"split.kind: unknown kind {spec['kind']!r} "
                          f"(known: {', '.join(SPLIT_KINDS)})")
    return spec


def _train_config(cfg: dict, method: str, seed: int) -> TrainConfig:
    overrides = dict(cfg.get("train") or {})
    for fixed in ("method", "seed"):
        if fixed in overrides:
            raise ConfigError(f"train.{fixed}: set per run from the "
                              f"'{'methods' if fixed == 'method' else 'seeds'}' list")
    model = _build(ModelConfig, overrides.pop("model", {}), "train.model")
    return _build(TrainConfig, overrides, "train",
                  extra={"method": method, "seed": seed, "model": model})


def _methods_list(cfg: dict) -> list:
    methods = cfg.get("methods")
    if not isinstance(methods, list) or not methods:
        raise ConfigError("methods: required nonempty list")
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"methods: unknown method {m!r} "
                              f"(known: {', '.join(METHODS)})")
    return methods


def _seeds_list(cfg: dict, override) -> list:
    if override is not None:
        return [int(override)]
    seeds = cfg.get("seeds", list(range(10)))
    if not isinstance(seeds, list) or not seeds or \
            not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds: expected a nonempty list of integers")
    return seeds


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    cfg = load_config(args.config, {"dataset", "species", "split"})
    records = load_records(cfg, seed_override=args.seed)
    if args.out is None:
        raise ConfigError("--out is required: dataset CSV path or directory")
    out = Path(args.out)
    if out.suffix != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "dataset.csv"
    csv_write(records, out)

    years = [r.year for r in records]
    labels = np.stack([r.y for r in records])
    print(f"wrote {out}")
    print(f"  {len(records)} site-years, {len({r.site_id for r in records})} sites, "
          f"years {min(years)}-{max(years)}, {labels.shape[1]} species")
    print(f"  labels present: {int(np.isfinite(labels).sum())}/{labels.size}")
    spec = _split_spec(cfg, required=False)
    for kind in SPLIT_KINDS:
        if spec is not None and spec["kind"] == kind:
            use = spec
        elif kind == "chronological":
            qs = np.quantile(sorted(set(years)), [0.6, 0.8], method="lower")
            use = {"kind": kind, "train_end_year": int(qs[0]),
                   "val_end_year": int(qs[1])}
        else:
            use = {"kind": kind}
        try:
            train, _, test = apply_split(records, use)
        except SplitError as exc:
            print(f"  split {kind}: unavailable ({exc})")
            continue
        s = shift_stats(train, test)
        print(f"  split {kind}: {len(train)} train / {len(test)} test, "
              f"delta_t {s['delta_t']:+.2f} degC, "
              f"delta_date {s['delta_date']:+.1f} days (test - train)")
    return 0


# ---------------------------------------------------------------------------
# run


def _prepare_data(cfg: dict):
    """(train, val, fit-val, target pool, split kind) resolved from the config.

    With train.val_source_holdout the model-selection split is carved from the
    labeled source domain instead; the unlabeled pool always stays val + test.
    """
    records = load_records(cfg)
    spec = _split_spec(cfg)
    train, val, test = apply_split(records, spec)
    return {
        "train": to_arrays(train),
        "val": to_arrays(val),
        "test": to_arrays(test),
        "pool": to_arrays(val + test),
        "split": spec["kind"],
    }


def _holdout_split(train: Dataset, seed: int, frac: float = 0.2):
    n = len(train)
    n_val = max(int(round(n * frac)), 1)
    if n_val >= n:
        raise ConfigError(f"val_source_holdout: training split too small ({n})")
    perm = np.random.default_rng(np.random.SeedSequence([seed, 0xD0D])).permutation(n)
    return subset(train, np.sort(perm[n_val:])), subset(train, np.sort(perm[:n_val]))


def _execute_cell(cfg: dict, method: str, seed: int, out_dir, data=None):
    """Train/fit one (method, seed) cell and score the test split.

    Returns (rows, split_kind, error) with error None on success. All
    artifacts land in out_dir/runs/<method>_seed<seed>.
    """
    if data is None:
        data = _prepare_data(cfg)
    run_dir = Path(out_dir) / "runs" / f"{method}_seed{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    test = data["test"]
    try:
        if method == "thermal-time":
            fitted = fit_thermal_time(data["train"])
            pred = predict_thermal_time(test.x, fitted)
            (run_dir / "config.json").write_text(json.dumps(
                {"method": method, "seed": seed}, indent=2) + "\n")
            (run_dir / "result.json").write_text(json.dumps({
                "method": method, "seed": seed,
                "species": [None if sp is None else dataclasses.asdict(sp)
                            for sp in fitted]}, indent=2) + "\n")
        else:
            tc = _train_config(cfg, method, seed)
            mc = tc.model
            got = (test.x.shape[1], test.x.shape[2], test.y.shape[1])
            want = (mc.channels, mc.seq_len, mc.species)
            if got != want:
                raise ConfigError(
                    f"train.model: (channels, series, species) = {want} "
                    f"does not match the dataset's {got}")
            fit_train, fit_val = (data["train"], data["val"])
            if tc.val_source_holdout:
                fit_train, fit_val = _holdout_split(data["train"], seed)
            pool = data["pool"] if method in ADAPTATION_METHODS else None
            result = fit(fit_train, fit_val, tc, target_pool=pool, run_dir=run_dir)
            if result.aborted:
                raise RuntimeError(result.abort_reason)
            pred = predict_for_method(result.model, method, test.x)
        n_species = test.y.shape[1]
        emit_scatter(test.y.ravel(), pred.ravel(),
                     np.tile(np.arange(1, n_species + 1), len(test)),
                     run_dir / "scatter.csv")
        rows = species_rows(test.y, pred, method, data["split"], seed)
        return rows, data["split"], None
    except (MetricError, RuntimeError, ValueError) as exc:
        return [], data["split"], f"{method} seed {seed}: {exc}"


def _cell_worker(payload):
    cfg, method, seed, out_dir = payload
    return _execute_cell(cfg, method, seed, out_dir)


def cmd_run(args) -> int:
    cfg = load_config(args.config,
                      {"dataset", "species", "split", "methods", "seeds", "train"})
    if args.out is None:
        raise ConfigError("--out is required: results directory")
    methods = _methods_list(cfg)
    seeds = _seeds_list(cfg, args.seed)
    _split_spec(cfg)
    for method in methods:
        if method != "thermal-time":     # surface bad overrides before the grid
            _train_config(cfg, method, seeds[0])
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg, indent=2) + "\n")

    tasks = [(method, seed) for method in methods for seed in seeds]
    if args.jobs > 1:
        payloads = [(cfg, method, seed, out_dir) for method, seed in tasks]
        with multiprocessing.get_context("spawn").Pool(args.jobs) as pool:
            outcomes = pool.map(_cell_worker, payloads)
    else:
        data = _prepare_data(cfg)
        outcomes = [_execute_cell(cfg, method, seed, out_dir, data=data)
                    for method, seed in tasks]

    all_rows, failures = [], {}
    for (method, seed), (rows, split, err) in zip(tasks, outcomes):
        if err is None:
            all_rows.extend(rows)
            print(f"{method} seed {seed}: {len(rows)} species cells")
        else:
            failures[(method, split)] = failures.get((method, split), 0) + 1
            print(f"{method} seed {seed}: FAILED ({err})", file=sys.stderr)

    cells_write(all_rows, out_dir / "cells.csv")
    report = report_text(all_rows, failures)
    (out_dir / "report.txt").write_text(report)
    (out_dir / "summary.json").write_text(json.dumps({
        "methods": methods, "seeds": seeds,
        "failures": {f"{m}|{s}": c for (m, s), c in sorted(failures.items())},
    }, indent=2) + "\n")
    print()
    print(report, end="")

    dead = [m for m in methods
            if not any(r.method == m for r in all_rows)]
    if dead:
        print(f"error: every run failed for: {', '.join(dead)}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# eval


def _eval_mode(model: PhenoFormer, requested: str) -> str:
    if requested == "auto":
        hybrid = model._hybrid_sites()
        ready = bool(hybrid) and all(ln.initialized for _, ln in hybrid)
        return "target-eval" if ready else "source-eval"
    if requested not in ("source-eval", "target-eval"):
        raise ConfigError(f"mode: expected auto, source-eval or target-eval, "
                          f"got {requested!r}")
    return requested


def cmd_eval(args) -> int:
    cfg = load_config(args.config,
                      {"checkpoint", "dataset", "species", "split", "mode", "label"})
    ckpt = cfg.get("checkpoint")
    if not ckpt:
        raise ConfigError("checkpoint: required path to a saved model")
    if not Path(ckpt).exists():
        raise ConfigError(f"checkpoint: file not found: {ckpt}")
    model = PhenoFormer.load(ckpt)

    records = load_records(cfg)
    spec = _split_spec(cfg, required=False)
    if spec is not None:
        _, _, records = apply_split(records, spec)
    ds = to_arrays(records)
    mc = model.cfg
    got = (ds.x.shape[1], ds.x.shape[2], ds.y.shape[1])
    want = (mc.channels, mc.seq_len, mc.species)
    if got != want:
        raise ConfigError(
            f"dataset: shape mismatch with checkpoint; model expects "
            f"(channels, series, species) = {want}, dataset has {got}")

    if model.bn is not None:
        pred = predict_for_method(model, "adabn", ds.x)
        mode = "source-eval+adapted-stats"
    else:
        mode = _eval_mode(model, cfg.get("mode", "auto"))
        pred = model.predict(ds.x, mode=mode)

    label = cfg.get("label", "checkpoint")
    split = spec["kind"] if spec is not None else "all"
    rows = species_rows(ds.y, pred, label, split, seed=0)
    if not rows:
        raise MetricError("no species had enough labeled test points to score")
    print(f"checkpoint {ckpt}  ({mode}, {len(ds)} samples)")
    for r in rows:
        print(f"  species {r.species}: R2 {r.r2:.4f}  RMSE {r.rmse:.3f}  "
              f"MAE {r.mae:.3f}  (n={r.n})")
    agg = aggregate(rows)
    print(f"  mean over species: R2 {agg['r2_mean']:.4f}  "
          f"RMSE {agg['rmse_mean']:.3f}  MAE {agg['mae_mean']:.3f}")
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        emit_scatter(ds.y.ravel(), pred.ravel(),
                     np.tile(np.arange(1, ds.y.shape[1] + 1), len(ds)),
                     out / "scatter.csv")
        cells_write(rows, out / "cells.csv")
        print(f"wrote {out / 'scatter.csv'} and {out / 'cells.csv'}")
    return 0


# ---------------------------------------------------------------------------
# report


def cmd_report(args) -> int:
    results_dir = args.out
    if results_dir is None and args.config is not None:
        results_dir = load_config(args.config, {"results_dir"}).get("results_dir")
    if results_dir is None:
        raise ConfigError("--out (or config results_dir) is required: "
                          "a directory holding cells.csv")
    results_dir = Path(results_dir)
    cells = results_dir / "cells.csv"
    if not cells.exists():
        raise ConfigError(f"no cells.csv under {results_dir}")
    rows = cells_read(cells)

    failures = {}
    summary = results_dir / "summary.json"
    if summary.exists():
        recorded = json.loads(summary.read_text()).get("failures", {})
        failures = {tuple(k.split("|", 1)): v for k, v in recorded.items()}

    report = report_text(rows, failures)
    (results_dir / "report.txt").write_text(report)
    print(report, end="")
    from . import figures   # matplotlib import only on the report path
    written = figures.render_all(results_dir)
    for path in written:
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phenodapt",
        description="Domain-adaptive phenology regression: synthetic data, "
                    "training, evaluation and reporting.")
    sub = parser.add_subparsers(dest="command", required=True)
    specs = {
        "generate": ("write a synthetic dataset CSV and split summary",
                     cmd_generate),
        "run": ("train a methods x seeds grid and write cells/report",
                cmd_run),
        "eval": ("score a saved checkpoint on a dataset", cmd_eval),
        "report": ("rebuild report.txt and figures from cells.csv",
                   cmd_report),
    }
    for name, (help_text, handler) in specs.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", type=Path, default=None,
                        help="JSON config file")
        sp.add_argument("--out", type=Path, default=None,
                        help="output file or directory")
        sp.add_argument("--jobs", type=int, default=1,
                        help="worker processes for the run grid")
        sp.add_argument("--seed", type=int, default=None,
                        help="override: dataset seed (generate) or "
                             "single run seed (run)")
        sp.set_defaults(handler=handler)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.handler(args)
    except (ConfigError, SplitError, CsvFormatError, MetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
