"""Figure rendering from the delimited outputs (cells/scatter/epochs CSVs).

Every figure here is derived from files the run and eval paths already
wrote; nothing is computed from live model state, so figures can always be
regenerated after the fact with the report command.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .evalreport import cells_read, scatter_read, aggregate  # noqa: E402

_SAVE_KW = dict(dpi=110, bbox_inches="tight", metadata={"Software": None})


def render_scatter(scatter_csv, out_png, title: str | None = None) -> Path:
    """Predicted vs true dates, one marker set per species, identity line."""
    t, p, sp = scatter_read(scatter_csv)
    fig, ax = plt.subplots(figsize=(5, 5))
    for s in sorted(set(sp.tolist())):
        m = sp == s
        ax.scatter(t[m], p[m], s=12, alpha=0.6, label=f"species {s}")
    if len(t):
        lo = min(t.min(), p.min())
        hi = max(t.max(), p.max())
        ax.plot([lo, hi], [lo, hi], "k--", linewidth=1, label="identity")
    ax.set_xlabel("true date (day of year)")
    ax.set_ylabel("predicted date (day of year)")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.savefig(out_png, **_SAVE_KW)
    plt.close(fig)
    return Path(out_png)


def render_seed_spread(cells_csv, out_png) -> Path:
    """Aggregate R2 per (method, split) with the seed/species spread as error bars."""
    rows = cells_read(cells_csv)
    groups = sorted({(r.method, r.split) for r in rows})
    labels, means, stds = [], [], []
    for method, split in groups:
        agg = aggregate([r for r in rows if r.method == method and r.split == split])
        labels.append(f"{method}\n{split}")
        means.append(agg["r2_mean"])
        stds.append(agg["r2_std"])
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(labels), 4))
    ax.bar(range(len(labels)), means, yerr=stds, capsize=4, color="#4878a8")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel("test R2 (mean over seed x species)")
    ax.axhline(0.0, color="k", linewidth=0.8)
    fig.savefig(out_png, **_SAVE_KW)
    plt.close(fig)
    return Path(out_png)


def _read_epochs(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    return ([int(r["epoch"]) for r in rows],
            [float(r["train_mse"]) for r in rows],
            [float(r["val_rmse"]) for r in rows])


def render_curves(epoch_csvs: list, out_png) -> Path:
    """Training MSE and validation RMSE over epochs; one line per labeled run."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for label, path in epoch_csvs:
        ep, mse, vr = _read_epochs(path)
        ax1.plot(ep, mse, label=label)
        ax2.plot(ep, vr, label=label)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train MSE (standardized)")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("val RMSE (days)")
    ax1.set_yscale("log")
    ax1.legend(fontsize=8)
    fig.savefig(out_png, **_SAVE_KW)
    plt.close(fig)
    return Path(out_png)


def render_all(results_dir, figures_dir=None) -> list:
    """Render every figure the artifacts in results_dir support."""
    results_dir = Path(results_dir)
    figures_dir = Path(figures_dir) if figures_dir else results_dir / "figures"
    figures_dir.mkdir(parents=True, exist_ok=True)
    written = []
    cells = results_dir / "cells.csv"
    if cells.exists():
        written.append(render_seed_spread(cells, figures_dir / "seed_spread.png"))
    by_method: dict[str, list] = {}
    for run in sorted((results_dir / "runs").glob("*")):
        method = run.name.rsplit("_seed", 1)[0]
        by_method.setdefault(method, []).append(run)
    for method, runs in sorted(by_method.items()):
        first = runs[0]
        if (first / "scatter.csv").exists():
            written.append(render_scatter(first / "scatter.csv",
                                          figures_dir / f"scatter_{method}.png",
                                          title=f"{method} ({first.name})"))
        curve_runs = [(r.name, r / "epochs.csv") for r in runs
                      if (r / "epochs.csv").exists()]
        if curve_runs:
            written.append(render_curves(curve_runs,
                                         figures_dir / f"curves_{method}.png"))
    return written
