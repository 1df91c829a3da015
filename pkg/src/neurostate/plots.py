"""Figure rendering for training and evaluation reports.

Everything draws through the non-interactive Agg backend and writes
straight to files, so report commands work on headless machines.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .montage import default_template

__all__ = [
    "plot_channel_bank",
    "plot_confusion",
    "plot_loss_curves",
    "plot_topography",
]


def plot_loss_curves(log_path, out_png) -> Path:
    """Render per-step losses from a training log (one JSON record per line)."""
    steps, total, rec, dec = [], [], [], []
    with open(log_path) as f:
        for line in f:
            if not line.strip():
                continue
            record = json.loads(line)
            steps.append(record["step"])
            total.append(record["loss_total"])
            rec.append(record["loss_rec"])
            dec.append(record["loss_dec"])
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, total, label="total", lw=1.2)
    ax.plot(steps, rec, label="reconstruction", lw=0.9, alpha=0.8)
    ax.plot(steps, dec, label="decoupling", lw=0.9, alpha=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return out_png


def _head_axes(ax):
    head = plt.Circle((0.0, 0.0), 1.0, fill=False, lw=1.0, color="k")
    ax.add_patch(head)
    # nose marker at the anterior pole
    ax.plot([-0.08, 0.0, 0.08], [0.99, 1.1, 0.99], color="k", lw=1.0)
    ax.set_xlim(-1.25, 1.25)
    ax.set_ylim(-1.2, 1.3)
    ax.set_aspect("equal")
    ax.axis("off")


def plot_topography(values, out_png, template=None, title="", annotate=False) -> Path:
    """Scatter per-channel values on a top-down head view.

    ``values`` must align with the template channel order; coordinates
    are the template's unit-sphere positions viewed from above.
    """
    tpl = template if template is not None else default_template()
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size != len(tpl.channel_names):
        raise ValueError(
            f"expected {len(tpl.channel_names)} values, got {values.size}"
        )
    xy = tpl.coords[:, :2]
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    _head_axes(ax)
    sc = ax.scatter(xy[:, 0], xy[:, 1], c=values, cmap="viridis", s=70,
                    edgecolors="k", linewidths=0.4, zorder=3)
    if annotate:
        for name, (x, y) in zip(tpl.channel_names, xy):
            ax.annotate(name, (x, y), fontsize=4, ha="center", va="center", zorder=4)
    if title:
        ax.set_title(title, fontsize=10)
    fig.colorbar(sc, ax=ax, shrink=0.75)
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return out_png


def plot_channel_bank(bank, out_png, template=None, max_filters: int = 8) -> Path:
    """Topographies for the first few columns of a (60, K) filter bank."""
    tpl = template if template is not None else default_template()
    bank = np.asarray(bank, dtype=np.float64)
    if bank.ndim != 2 or bank.shape[0] != len(tpl.channel_names):
        raise ValueError(f"bank must be ({len(tpl.channel_names)}, K), got {bank.shape}")
    k = min(max_filters, bank.shape[1])
    fig, axes = plt.subplots(1, k, figsize=(2.2 * k, 2.5))
    if k == 1:
        axes = [axes]
    for i, ax in enumerate(axes):
        _head_axes(ax)
        ax.scatter(tpl.coords[:, 0], tpl.coords[:, 1], c=bank[:, i],
                   cmap="coolwarm", s=18, zorder=3)
        ax.set_title(f"filter {i}", fontsize=8)
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return out_png


def plot_confusion(y_true, y_pred, out_png, class_names=None) -> Path:
    """Count matrix with annotated cells."""
    y_true = np.asarray(y_true, dtype=np.int64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    n = int(max(y_true.max(), y_pred.max())) + 1
    counts = np.zeros((n, n), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        counts[t, p] += 1
    fig, ax = plt.subplots(figsize=(4.0 + 0.3 * n, 3.5 + 0.3 * n))
    im = ax.imshow(counts, cmap="Blues")
    for i in range(n):
        for j in range(n):
            ax.text(j, i, str(counts[i, j]), ha="center", va="center",
                    color="k" if counts[i, j] < counts.max() * 0.6 else "w",
                    fontsize=8)
    ticks = class_names if class_names is not None else [str(i) for i in range(n)]
    ax.set_xticks(range(n), ticks, rotation=45, ha="right")
    ax.set_yticks(range(n), ticks)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return out_png
