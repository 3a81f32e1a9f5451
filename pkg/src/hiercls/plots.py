"""Matplotlib figures for the report path.

All figures render through the Agg backend straight to PNG files with
fixed sizes and no embedded software tag, so rerunning a pipeline with
identical inputs reproduces the bytes.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from hiercls.metrics import MetricReport  # noqa: E402
from hiercls.trainer import EpochRow  # noqa: E402

_SAVE_KW = {"dpi": 110, "metadata": {"Software": None}}


def save_confusion_png(report: MetricReport, path, title: str) -> None:
    n = len(report.class_order)
    fig, ax = plt.subplots(figsize=(1.0 + 0.6 * n, 0.8 + 0.6 * n))
    counts = report.confusion
    ax.imshow(counts, cmap="Blues")
    ax.set_xticks(range(n), report.class_order, rotation=45, ha="right")
    ax.set_yticks(range(n), report.class_order)
    ax.set_xlabel("predicted")
    ax.set_ylabel("truth")
    ax.set_title(title)
    vmax = counts.max() if counts.size else 0
    for i in range(n):
        for j in range(n):
            v = int(counts[i, j])
            if v:
                color = "white" if vmax and counts[i, j] > 0.6 * vmax else "black"
                ax.text(j, i, str(v), ha="center", va="center", fontsize=8, color=color)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_curves_png(curves: Mapping[str, Sequence[EpochRow]], path, title: str) -> None:
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for name, rows in curves.items():
        epochs = [r.epoch for r in rows]
        label = "" if len(curves) == 1 else f"{name} "
        ax.plot(epochs, [r.train_loss for r in rows], label=f"{label}train")
        if any(r.val_loss is not None for r in rows):
            ax.plot(
                epochs,
                [r.val_loss for r in rows],
                linestyle="--",
                label=f"{label}val",
            )
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_per_class_f1_png(
    per_mode: Mapping[str, Mapping[str, float]], path, title: str
) -> None:
    """Grouped bars: one cluster per class, one bar per mode."""
    classes: list[str] = []
    for f1s in per_mode.values():
        for c in f1s:
            if c not in classes:
                classes.append(c)
    modes = list(per_mode)
    x = np.arange(len(classes), dtype=np.float64)
    width = 0.8 / max(1, len(modes))
    fig, ax = plt.subplots(figsize=(1.4 + 0.9 * len(classes), 4.2))
    for i, mode in enumerate(modes):
        vals = [per_mode[mode].get(c, 0.0) for c in classes]
        ax.bar(x + (i - (len(modes) - 1) / 2) * width, vals, width, label=mode)
    ax.set_xticks(x, classes, rotation=30, ha="right")
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("F1")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
