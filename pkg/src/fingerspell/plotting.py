"""Report figures: training curves and per-length evaluation accuracy."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import EditCounts, accuracy_from_counts  # noqa: E402

# fixed metadata keeps PNG output byte-stable across runs
_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_META)
    plt.close(fig)
    return path


def plot_history(history: list[dict], path) -> Path:
    """Train loss and validation accuracy per epoch, two stacked panels."""
    epochs = [h["epoch"] for h in history]
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(5, 5), sharex=True)
    top.plot(epochs, [h["train_loss"] for h in history], color="k", lw=1.2)
    top.set_ylabel("train CTC loss")
    val = [(h["epoch"], h["val_accuracy"]) for h in history if "val_accuracy" in h]
    if val:
        bottom.plot(*zip(*val), color="tab:blue", lw=1.2, marker="o", ms=3)
    bottom.set_ylim(-0.02, 1.02)
    bottom.set_ylabel("val letter accuracy")
    bottom.set_xlabel("epoch")
    for ax in (top, bottom):
        ax.spines[["top", "right"]].set_visible(False)
    return _save(fig, Path(path))


def accuracy_by_length(rows) -> dict[int, float]:
    """Pooled letter accuracy grouped by reference length."""
    groups: dict[int, EditCounts] = defaultdict(EditCounts)
    for _, _, _, counts in rows:
        groups[counts.ref_length] = groups[counts.ref_length] + counts
    return {n: accuracy_from_counts(c) for n, c in sorted(groups.items())}


def plot_evaluation(rows, path) -> Path:
    """Bar chart of accuracy per word length with sample counts on top."""
    acc = accuracy_by_length(rows)
    sizes = defaultdict(int)
    for *_, c in rows:
        sizes[c.ref_length] += 1
    fig, ax = plt.subplots(figsize=(5, 3))
    xs = list(acc)
    bars = ax.bar([str(x) for x in xs], [acc[x] for x in xs], color="0.6", edgecolor="k", lw=0.6)
    for bar, x in zip(bars, xs):
        ax.annotate(f"n={sizes[x]}", (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                    ha="center", va="bottom", fontsize=7)
    ax.set_ylim(0, 1.1)
    ax.set_xlabel("reference length")
    ax.set_ylabel("letter accuracy")
    ax.spines[["top", "right"]].set_visible(False)
    return _save(fig, Path(path))
