"""Success-rate curves from the trainer's metrics CSV."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


class MetricsError(ValueError):
    pass


def read_metrics(csv_path) -> dict:
    """Parse a trainer metrics CSV into {column: list}. Raises MetricsError
    naming the offending line on malformed rows."""
    path = Path(csv_path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MetricsError(f"{path}: empty file, no header") from None
        if "epoch" not in header:
            raise MetricsError(f"{path}: missing required column 'epoch'")
        columns = {name: [] for name in header}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise MetricsError(
                    f"{path}: line {lineno} has {len(row)} fields, expected {len(header)}")
            for name, cell in zip(header, row):
                columns[name].append(cell)
    return columns


def _numeric(values):
    out = []
    for v in values:
        try:
            out.append(float(v))
        except (TypeError, ValueError):
            out.append(np.nan)
    return np.asarray(out)


def plot_metrics(csv_paths, out_dir, labels=None) -> list[Path]:
    """One figure of per-task success curves and one of the multi-task curve.
    Several CSVs overlay as labeled variants. Returns written paths."""
    if isinstance(csv_paths, (str, Path)):
        csv_paths = [csv_paths]
    labels = labels or [Path(p).parent.name or f"run{i}" for i, p in enumerate(csv_paths)]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = [read_metrics(p) for p in csv_paths]

    task_cols = sorted({c for r in runs for c in r if c.startswith("success_")})

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for run, label in zip(runs, labels):
        epochs = _numeric(run["epoch"])
        for col in task_cols:
            if col not in run:
                continue
            vals = _numeric(run[col])
            mask = ~np.isnan(vals)
            name = col.removeprefix("success_")
            suffix = f" ({label})" if len(runs) > 1 else ""
            ax.plot(epochs[mask], vals[mask], marker="o", markersize=3, label=name + suffix)
    ax.set_xlabel("epoch")
    ax.set_ylabel("success rate")
    ax.set_ylim(-0.05, 1.05)
    ax.set_title("per-task success")
    if task_cols:
        ax.legend(fontsize=7)
    per_task_path = out / "success_per_task.png"
    fig.savefig(per_task_path, dpi=120, bbox_inches="tight")
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for run, label in zip(runs, labels):
        epochs = _numeric(run["epoch"])
        cols = [c for c in task_cols if c in run]
        if cols:
            stack = np.stack([_numeric(run[c]) for c in cols])
            multi = np.nanmean(stack, axis=0)
        else:
            multi = np.full(len(epochs), np.nan)
        mask = ~np.isnan(multi)
        ax.plot(epochs[mask], multi[mask], marker="o", markersize=3, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("multi-task success rate")
    ax.set_ylim(-0.05, 1.05)
    ax.set_title("multi-task success")
    ax.legend(fontsize=8)
    multi_path = out / "success_multi_task.png"
    fig.savefig(multi_path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return [per_task_path, multi_path]
