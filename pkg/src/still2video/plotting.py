"""Matplotlib figures written next to the CSV outputs (Agg backend, no display)."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import EmbeddingPoint, MetricsReport  # noqa: E402

_LABELS = {
    "rmse_frames": "RMSE on frames",
    "rmse_flows": "RMSE on flows (px)",
    "perceptual": "perceptual dissimilarity",
}


def plot_metrics(report: MetricsReport, path: str | Path) -> Path:
    """One panel per metric; one mean curve (with std band) per method."""
    metrics = report.metrics()
    fig, axes = plt.subplots(1, max(1, len(metrics)), figsize=(4.2 * max(1, len(metrics)), 3.4), squeeze=False)
    for ax, metric in zip(axes[0], metrics):
        for method in report.methods():
            try:
                mean, std = report.aggregate(method, metric)
            except KeyError:
                continue
            t = np.arange(1, len(mean) + 1)
            ax.plot(t, mean, marker="o", ms=3, label=method)
            if np.any(std > 0):
                ax.fill_between(t, mean - std, mean + std, alpha=0.2)
        ax.set_xlabel("time step")
        ax.set_title(_LABELS.get(metric, metric))
        ax.grid(alpha=0.3)
    axes[0][0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_embedding(points: Sequence[EmbeddingPoint], path: str | Path, highlight: str | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    xs = np.array([p.x for p in points])
    ys = np.array([p.y for p in points])
    ax.scatter(xs, ys, s=24, c=np.arange(len(points)), cmap="viridis")
    for p in points:
        if highlight is not None and p.id == highlight:
            ax.scatter([p.x], [p.y], s=90, facecolors="none", edgecolors="red")
        ax.annotate(p.id, (p.x, p.y), fontsize=6, xytext=(2, 2), textcoords="offset points")
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_training_log(csv_path: str | Path, path: str | Path) -> Path:
    """Plot every loss column of a training CSV (step, total, ...) on a log axis."""
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{csv_path}: empty training log")
    steps = np.array([int(r["step"]) for r in rows])
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    for col in rows[0]:
        if col == "step":
            continue
        vals = np.array([float(r[col]) for r in rows])
        ax.plot(steps, np.maximum(vals, 1e-12), label=col, lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)
