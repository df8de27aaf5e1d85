"""Figures for evaluation and training reports (written to files, never shown)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import BUCKETS, EvalReport  # noqa: E402

# fixed metadata keeps the PNG bytes reproducible
_META = {"Software": None}
_STYLES = {"small": "-", "medium": "--", "large": ":"}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_recall_vs_k(reports: Sequence[EvalReport], path) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for n, report in enumerate(reports):
        color = f"C{n}"
        for bucket in BUCKETS:
            pts = [(k, r) for k, b, r in report.recall if b == bucket and r is not None]
            if not pts:
                continue
            ks, rs = zip(*pts)
            ax.plot(ks, [100 * r for r in rs], _STYLES[bucket], color=color, marker="o", ms=3,
                    label=f"{report.name} {bucket}")
    ax.set_xlabel("number of regions K")
    ax.set_ylabel("recall (%)")
    ax.set_ylim(0, 102)
    if ax.lines:
        ax.legend(fontsize=7)
    return _save(fig, path)


def plot_cost_vs_k(reports: Sequence[EvalReport], path) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for n, report in enumerate(reports):
        if report.cost:
            ks, cs = zip(*report.cost)
            ax.plot(ks, cs, marker="o", ms=3, color=f"C{n}", label=report.name)
    ax.set_xlabel("number of regions K")
    ax.set_ylabel("resized pixels / native pixels")
    if ax.lines:
        ax.legend(fontsize=7)
    return _save(fig, path)


def plot_pr_curves(report: EvalReport, path, iou: float = 0.5) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    categories = sorted({c for c, t, _, _ in report.pr_curves if t == iou})
    for n, cat in enumerate(categories):
        pts = [(r, p) for c, t, r, p in report.pr_curves if c == cat and t == iou]
        rs, ps = zip(*pts)
        ax.plot(rs, ps, color=f"C{n}", label=f"category {cat}")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_title(f"{report.name} IoU {iou:.2f}")
    if ax.lines:
        ax.legend(fontsize=7)
    return _save(fig, path)


def plot_training(mean_return: Sequence[float], path, window: int = 50) -> Path:
    import numpy as np

    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    values = np.asarray(mean_return, dtype=float)
    if len(values):
        ax.plot(values, color="0.75", lw=0.6)
        if len(values) >= window:
            smooth = np.convolve(values, np.ones(window) / window, mode="valid")
            ax.plot(np.arange(window - 1, len(values)), smooth, color="C0")
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean episode return")
    return _save(fig, path)
