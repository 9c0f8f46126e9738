"""Metrics, per-cell tables, aggregates, and delimited outputs for figures.

A "cell" is one (method, split, species, seed) combination; aggregates are
unweighted means over cells, with the sample standard deviation of R2 as the
spread statistic. All files written here are timestamp-free so identical
configs produce identical bytes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, asdict

import numpy as np


class MetricError(ValueError):
    pass


def metrics(y_true, y_pred) -> tuple[float, float, float]:
    """(R2, RMSE, MAE) over the finite-truth pairs.

    R2 = 1 - SS_res/SS_tot, not clamped: a bad predictor goes negative.
    """
    y_true = np.asarray(y_true, dtype=np.float64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.float64).ravel()
    if y_true.shape != y_pred.shape:
        raise MetricError(f"length mismatch: {y_true.shape} vs {y_pred.shape}")
    m = np.isfinite(y_true)
    t, p = y_true[m], y_pred[m]
    if t.size < 2:
        raise MetricError(f"need >= 2 labeled pairs, got {t.size}")
    ss_tot = float(((t - t.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise MetricError("R2 undefined: constant truths")
    ss_res = float(((t - p) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot
    rmse = float(np.sqrt(np.mean((t - p) ** 2)))
    mae = float(np.mean(np.abs(t - p)))
    return r2, rmse, mae


@dataclass
class MetricRow:
    method: str
    split: str
    species: int     # 1-based
    seed: int
    r2: float
    rmse: float
    mae: float
    n: int


def species_rows(y_true: np.ndarray, y_pred: np.ndarray, method: str,
                 split: str, seed: int) -> list[MetricRow]:
    """One MetricRow per species with enough labels to score."""
    rows = []
    for s in range(y_true.shape[1]):
        col = y_true[:, s]
        m = np.isfinite(col)
        if m.sum() < 2 or np.ptp(col[m]) == 0.0:
            continue
        r2, rmse, mae = metrics(col[m], y_pred[m, s])
        rows.append(MetricRow(method, split, s + 1, seed, r2, rmse, mae, int(m.sum())))
    return rows


def aggregate(rows: list[MetricRow]) -> dict:
    """Unweighted mean over cells; sample std (ddof=1) of R2, 0.0 for one cell."""
    if not rows:
        raise MetricError("aggregate: no rows")
    # summing in sorted order makes the result independent of row order
    r2 = np.sort([r.r2 for r in rows])
    return {
        "r2_mean": float(r2.mean()),
        "r2_std": float(r2.std(ddof=1)) if len(rows) > 1 else 0.0,
        "rmse_mean": float(np.sort([r.rmse for r in rows]).mean()),
        "mae_mean": float(np.sort([r.mae for r in rows]).mean()),
        "cells": len(rows),
    }


# ---------------------------------------------------------------------------
# delimited outputs

CELL_FIELDS = ("method", "split", "species", "seed", "r2", "rmse", "mae", "n")


def cells_write(rows: list[MetricRow], path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CELL_FIELDS)
        for r in rows:
            d = asdict(r)
            w.writerow([d["method"], d["split"], d["species"], d["seed"],
                        repr(d["r2"]), repr(d["rmse"]), repr(d["mae"]), d["n"]])


def cells_read(path) -> list[MetricRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != list(CELL_FIELDS):
            raise MetricError(f"bad cells header {header}")
        return [MetricRow(row[0], row[1], int(row[2]), int(row[3]),
                          float(row[4]), float(row[5]), float(row[6]), int(row[7]))
                for row in reader]


def emit_scatter(y_true, y_pred, species, path):
    """Per-point (true, pred, species) CSV behind an identity-line preamble."""
    y_true = np.asarray(y_true, dtype=np.float64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.float64).ravel()
    species = np.asarray(species).ravel()
    if not (len(y_true) == len(y_pred) == len(species)):
        raise MetricError("emit_scatter: misaligned columns")
    m = np.isfinite(y_true)
    lo = float(min(y_true[m].min(), y_pred[m].min())) if m.any() else 0.0
    hi = float(max(y_true[m].max(), y_pred[m].max())) if m.any() else 0.0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("# predicted vs true dates, one row per labeled test point\n")
        fh.write(f"# identity reference line: y = x from {lo!r} to {hi!r}\n")
        w = csv.writer(fh)
        w.writerow(["true", "pred", "species"])
        for t, p, s in zip(y_true[m], y_pred[m], species[m]):
            w.writerow([repr(float(t)), repr(float(p)), int(s)])
    return int(m.sum())


def scatter_read(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if rows[0] != ["true", "pred", "species"]:
        raise MetricError(f"bad scatter header {rows[0]}")
    body = rows[1:]
    return (np.array([float(r[0]) for r in body]),
            np.array([float(r[1]) for r in body]),
            np.array([int(r[2]) for r in body]))


# ---------------------------------------------------------------------------
# text report


def report_text(rows: list[MetricRow], failures: dict | None = None) -> str:
    """Aggregate table over (method, split), Table-style columns.

    failures maps (method, split) -> count of failed runs, reported in-line.
    """
    lines = [
        "Aggregate test metrics.",
        "Cells are (seed x species); values are unweighted cell means;",
        "the bracketed spread is the sample standard deviation (ddof=1) of R2.",
        "",
        f"{'method':<14}{'split':<20}{'R2 (std)':<22}{'RMSE':>9}{'MAE':>9}"
        f"{'cells':>7}{'failed':>8}",
    ]
    groups = sorted({(r.method, r.split) for r in rows})
    failures = failures or {}
    for method, split in groups:
        sub = [r for r in rows if r.method == method and r.split == split]
        agg = aggregate(sub)
        failed = failures.get((method, split), 0)
        lines.append(
            f"{method:<14}{split:<20}"
            f"{agg['r2_mean']:.4f} ({agg['r2_std']:.4f})   "
            f"{agg['rmse_mean']:>9.3f}{agg['mae_mean']:>9.3f}"
            f"{agg['cells']:>7}{failed:>8}")
    for key, count in sorted(failures.items()):
        if key not in groups:
            lines.append(f"{key[0]:<14}{key[1]:<20}all runs failed"
                         f"{'-':>21}{'-':>9}{0:>7}{count:>8}")
    return "\n".join(lines) + "\n"
