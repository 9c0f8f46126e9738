"""End-to-end command tests: generate | run | eval | report.

The run fixtures train genuinely tiny models (embed dim 8, 2 epochs) on a
6-site synthetic dataset, so the whole module stays in the tens of seconds.
"""

import copy
import hashlib
import json

import numpy as np
import pytest

from phenodapt.cli import main
from phenodapt.evalreport import aggregate, cells_read, scatter_read
from phenodapt.synthdata import SampleRecord, csv_write

TINY_MODEL = {"channels": 7, "seq_len": 365, "species": 2,
              "embed_dim": 8, "disc_dim": 8, "heads": 2, "ffn_dim": 16}

BASE = {
    "schema_version": 1,
    "dataset": {"synthetic": {"n_sites": 6, "year_range": [2000, 2007],
                              "missing_rate": 0.05, "seed": 3}},
    "species": [{"t_base": 2.0, "f_star": 180.0},
                {"t_base": 4.0, "f_star": 320.0}],
    "split": {"kind": "random", "test_frac": 0.25, "val_frac": 0.15, "seed": 1},
    "methods": ["vanilla", "thermal-time"],
    "seeds": [0, 1],
    "train": {"max_epochs": 2, "patience": 2, "batch_size": 16, "lr": 3e-4,
              "model": TINY_MODEL},
}


def write_config(path, cfg):
    path.write_text(json.dumps(cfg, indent=2))
    return path


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_grid(tmp, cfg, extra=()):
    config = write_config(tmp / "config.json", cfg)
    out = tmp / "results"
    code = main(["run", "--config", str(config), "--out", str(out), *extra])
    return code, out


@pytest.fixture(scope="module")
def grid(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("grid")
    code, out = run_grid(tmp, BASE)
    assert code == 0
    return out


@pytest.fixture(scope="module")
def miranda_grid(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("miranda")
    cfg = copy.deepcopy(BASE)
    cfg["methods"] = ["miranda"]
    cfg["seeds"] = [0]
    cfg["train"]["max_epochs"] = 1
    code, out = run_grid(tmp, cfg)
    assert code == 0
    return out


# ---------------------------------------------------------------------------
# generate


def test_generate_writes_dataset_and_summary(tmp_path, capsys):
    cfg = {k: BASE[k] for k in ("schema_version", "dataset", "species")}
    config = write_config(tmp_path / "c.json", cfg)
    code = main(["generate", "--config", str(config),
                 "--out", str(tmp_path / "data")])
    assert code == 0
    assert (tmp_path / "data" / "dataset.csv").exists()
    out = capsys.readouterr().out
    assert "48 site-years, 6 sites, years 2000-2007, 2 species" in out
    assert "split elevation:" in out
    assert "split chronological:" in out


def test_generate_deterministic(tmp_path):
    cfg = {k: BASE[k] for k in ("schema_version", "dataset", "species")}
    config = write_config(tmp_path / "c.json", cfg)
    for name in ("a.csv", "b.csv"):
        assert main(["generate", "--config", str(config),
                     "--out", str(tmp_path / name)]) == 0
    assert sha(tmp_path / "a.csv") == sha(tmp_path / "b.csv")


def test_generate_seed_override_changes_bytes(tmp_path):
    cfg = {k: BASE[k] for k in ("schema_version", "dataset", "species")}
    config = write_config(tmp_path / "c.json", cfg)
    assert main(["generate", "--config", str(config),
                 "--out", str(tmp_path / "a.csv")]) == 0
    assert main(["generate", "--config", str(config), "--seed", "99",
                 "--out", str(tmp_path / "b.csv")]) == 0
    assert sha(tmp_path / "a.csv") != sha(tmp_path / "b.csv")


# ---------------------------------------------------------------------------
# config validation


def test_unknown_synthetic_field_named(tmp_path, capsys):
    cfg = copy.deepcopy(BASE)
    cfg["dataset"]["synthetic"]["n_site"] = 4
    config = write_config(tmp_path / "c.json", cfg)
    assert main(["run", "--config", str(config),
                 "--out", str(tmp_path / "r")]) == 2
    assert "dataset.synthetic.n_site" in capsys.readouterr().err


def test_unknown_top_level_key_named(tmp_path, capsys):
    cfg = copy.deepcopy(BASE)
    cfg["shedule"] = 1
    config = write_config(tmp_path / "c.json", cfg)
    assert main(["run", "--config", str(config),
                 "--out", str(tmp_path / "r")]) == 2
    assert "shedule" in capsys.readouterr().err


def test_unknown_method_rejected(tmp_path, capsys):
    cfg = copy.deepcopy(BASE)
    cfg["methods"] = ["qda"]
    config = write_config(tmp_path / "c.json", cfg)
    assert main(["run", "--config", str(config),
                 "--out", str(tmp_path / "r")]) == 2
    assert "'qda'" in capsys.readouterr().err


def test_bad_train_override_fails_before_grid(tmp_path, capsys):
    cfg = copy.deepcopy(BASE)
    cfg["train"]["lr"] = -1.0
    config = write_config(tmp_path / "c.json", cfg)
    out = tmp_path / "r"
    assert main(["run", "--config", str(config), "--out", str(out)]) == 2
    assert "train" in capsys.readouterr().err
    assert not (out / "cells.csv").exists()


def test_dataset_requires_exactly_one_source(tmp_path, capsys):
    cfg = copy.deepcopy(BASE)
    cfg["dataset"]["csv"] = "also.csv"
    config = write_config(tmp_path / "c.json", cfg)
    assert main(["run", "--config", str(config),
                 "--out", str(tmp_path / "r")]) == 2
    assert "exactly one" in capsys.readouterr().err


def test_jobs_must_be_positive(tmp_path, capsys):
    config = write_config(tmp_path / "c.json", BASE)
    assert main(["run", "--config", str(config), "--out", str(tmp_path / "r"),
                 "--jobs", "0"]) == 2
    assert "--jobs" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# run


def test_run_artifacts(grid):
    assert (grid / "cells.csv").exists()
    assert (grid / "report.txt").exists()
    assert (grid / "summary.json").exists()
    for method in ("vanilla", "thermal-time"):
        for seed in (0, 1):
            run_dir = grid / "runs" / f"{method}_seed{seed}"
            assert (run_dir / "config.json").exists()
            assert (run_dir / "result.json").exists()
            assert (run_dir / "scatter.csv").exists()
    assert (grid / "runs" / "vanilla_seed0" / "epochs.csv").exists()
    assert (grid / "runs" / "vanilla_seed0" / "checkpoint.npz").exists()


def test_run_cells_cover_grid(grid):
    rows = cells_read(grid / "cells.csv")
    combos = {(r.method, r.seed, r.species) for r in rows}
    assert combos == {(m, s, sp) for m in ("vanilla", "thermal-time")
                      for s in (0, 1) for sp in (1, 2)}
    assert all(r.split == "random" for r in rows)


def test_run_report_matches_cells(grid):
    rows = cells_read(grid / "cells.csv")
    sub = [r for r in rows if r.method == "thermal-time"]
    agg = aggregate(sub)
    text = (grid / "report.txt").read_text()
    assert f"{agg['r2_mean']:.4f} ({agg['r2_std']:.4f})" in text


def test_run_scatter_counts_match_test_split(grid):
    t, p, sp = scatter_read(grid / "runs" / "vanilla_seed0" / "scatter.csv")
    # 12 test site-years x 2 species, minus masked labels
    assert 12 <= len(t) <= 24
    assert set(sp.tolist()) <= {1, 2}
    assert np.isfinite(p).all()


def test_rerun_is_byte_identical(grid, tmp_path):
    code, again = run_grid(tmp_path, BASE)
    assert code == 0
    same = ["cells.csv", "report.txt", "summary.json",
            "runs/vanilla_seed0/epochs.csv", "runs/vanilla_seed0/scatter.csv",
            "runs/vanilla_seed1/epochs.csv",
            "runs/thermal-time_seed0/scatter.csv",
            "runs/thermal-time_seed0/result.json"]
    for rel in same:
        assert sha(grid / rel) == sha(again / rel), rel
    first = np.load(grid / "runs" / "vanilla_seed0" / "checkpoint.npz")
    second = np.load(again / "runs" / "vanilla_seed0" / "checkpoint.npz")
    assert sorted(first.files) == sorted(second.files)
    for key in first.files:
        assert np.array_equal(first[key], second[key]), key


def test_parallel_jobs_match_serial(grid, tmp_path):
    code, par = run_grid(tmp_path, BASE, extra=("--jobs", "2"))
    assert code == 0
    assert sha(grid / "cells.csv") == sha(par / "cells.csv")
    assert sha(grid / "runs" / "vanilla_seed1" / "epochs.csv") == \
        sha(par / "runs" / "vanilla_seed1" / "epochs.csv")


def test_run_seed_flag_restricts_grid(tmp_path):
    cfg = copy.deepcopy(BASE)
    cfg["methods"] = ["thermal-time"]
    config = write_config(tmp_path / "c.json", cfg)
    out = tmp_path / "r"
    assert main(["run", "--config", str(config), "--out", str(out),
                 "--seed", "7"]) == 0
    assert (out / "runs" / "thermal-time_seed7").exists()
    rows = cells_read(out / "cells.csv")
    assert {r.seed for r in rows} == {7}


def test_all_runs_failed_exits_nonzero(tmp_path, capsys):
    rng = np.random.default_rng(0)
    records = [SampleRecord(site_id=i % 4, year=2000 + i // 4,
                            elevation=500.0, latitude=46.5,
                            x=rng.normal(10.0, 3.0, (7, 365)),
                            y=np.array([np.nan, np.nan]))
               for i in range(16)]
    csv_write(records, tmp_path / "unlabeled.csv")
    cfg = copy.deepcopy(BASE)
    cfg["dataset"] = {"csv": str(tmp_path / "unlabeled.csv")}
    cfg["methods"] = ["vanilla"]
    cfg["seeds"] = [0]
    cfg["train"]["max_epochs"] = 1
    config = write_config(tmp_path / "c.json", cfg)
    out = tmp_path / "r"
    with np.errstate(invalid="ignore"):
        code = main(["run", "--config", str(config), "--out", str(out)])
    assert code == 1
    err = capsys.readouterr().err
    assert "FAILED" in err and "every run failed for: vanilla" in err
    assert (out / "report.txt").exists()
    assert "all runs failed" in (out / "report.txt").read_text()


def test_model_shape_mismatch_names_config(tmp_path, capsys):
    cfg = copy.deepcopy(BASE)
    cfg["train"]["model"] = dict(TINY_MODEL, species=4)
    cfg["methods"] = ["vanilla"]
    cfg["seeds"] = [0]
    config = write_config(tmp_path / "c.json", cfg)
    assert main(["run", "--config", str(config),
                 "--out", str(tmp_path / "r")]) == 1
    assert "train.model" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# eval


def eval_config(grid_dir, run_name, **overrides):
    cfg = {"schema_version": 1,
           "checkpoint": str(grid_dir / "runs" / run_name / "checkpoint.npz"),
           "dataset": BASE["dataset"], "species": BASE["species"],
           "split": BASE["split"]}
    cfg.update(overrides)
    return cfg


def test_eval_reproduces_run_predictions(grid, tmp_path, capsys):
    config = write_config(tmp_path / "c.json", eval_config(grid, "vanilla_seed0"))
    out = tmp_path / "eval"
    assert main(["eval", "--config", str(config), "--out", str(out)]) == 0
    assert sha(out / "scatter.csv") == \
        sha(grid / "runs" / "vanilla_seed0" / "scatter.csv")
    printed = capsys.readouterr().out
    assert "species 1:" in printed and "mean over species" in printed


def test_eval_auto_mode_matches_hybrid_run(miranda_grid, tmp_path):
    config = write_config(tmp_path / "c.json",
                          eval_config(miranda_grid, "miranda_seed0"))
    out = tmp_path / "eval"
    assert main(["eval", "--config", str(config), "--out", str(out)]) == 0
    assert sha(out / "scatter.csv") == \
        sha(miranda_grid / "runs" / "miranda_seed0" / "scatter.csv")


def test_eval_shape_mismatch_rejected(grid, tmp_path, capsys):
    cfg = eval_config(grid, "vanilla_seed0")
    del cfg["species"]   # falls back to the 5 default species
    config = write_config(tmp_path / "c.json", cfg)
    assert main(["eval", "--config", str(config)]) == 2
    assert "shape mismatch" in capsys.readouterr().err


def test_eval_rejects_unknown_mode(grid, tmp_path, capsys):
    config = write_config(tmp_path / "c.json",
                          eval_config(grid, "vanilla_seed0", mode="weird"))
    assert main(["eval", "--config", str(config)]) == 2
    assert "mode" in capsys.readouterr().err


def test_eval_missing_checkpoint(tmp_path, capsys):
    config = write_config(tmp_path / "c.json",
                          {"checkpoint": str(tmp_path / "nope.npz"),
                           "dataset": BASE["dataset"]})
    assert main(["eval", "--config", str(config)]) == 2
    assert "checkpoint" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# report


def test_report_recomputes_and_renders(grid, capsys):
    original = (grid / "report.txt").read_text()
    (grid / "report.txt").unlink()
    assert main(["report", "--out", str(grid)]) == 0
    assert (grid / "report.txt").read_text() == original
    pngs = sorted(p.name for p in (grid / "figures").glob("*.png"))
    assert "seed_spread.png" in pngs
    assert any(n.startswith("scatter_") for n in pngs)
    assert any(n.startswith("curves_") for n in pngs)
    assert original.rstrip("\n") in capsys.readouterr().out


def test_report_requires_cells(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["report", "--out", str(tmp_path / "empty")]) == 2
    assert "cells.csv" in capsys.readouterr().err
