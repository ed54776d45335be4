"""Matplotlib figures written next to command outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _show(ax, img):
    ax.imshow(np.clip((np.asarray(img) + 1.0) / 2.0, 0, 1), interpolation="nearest")
    ax.set_xticks([])
    ax.set_yticks([])


def image_grid(rows, path, row_labels=None, col_labels=None, cell=1.1):
    """Save a grid of [-1, 1] images; ``rows`` is a list of equal-length image lists."""
    n_rows = len(rows)
    n_cols = max(len(r) for r in rows)
    h, w = np.asarray(rows[0][0]).shape[:2]
    fig, axes = plt.subplots(n_rows, n_cols, squeeze=False,
                             figsize=(cell * n_cols * w / h + 1.2, cell * n_rows + 0.4))
    for i, row in enumerate(rows):
        for j in range(n_cols):
            ax = axes[i, j]
            if j < len(row):
                _show(ax, row[j])
            else:
                ax.axis("off")
        if row_labels:
            axes[i, 0].set_ylabel(row_labels[i], fontsize=8)
    if col_labels:
        for j, lab in enumerate(col_labels[:n_cols]):
            axes[0, j].set_title(lab, fontsize=7)
    fig.tight_layout(pad=0.3)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def loss_curves(series: dict, path, window: int = 100, title=None):
    """One panel per named series, raw values plus a moving average."""
    series = {k: np.asarray(v, dtype=float) for k, v in series.items() if len(v)}
    if not series:
        return None
    fig, axes = plt.subplots(len(series), 1, squeeze=False, figsize=(6, 2.0 * len(series)))
    for ax, (name, vals) in zip(axes[:, 0], series.items()):
        ax.plot(vals, lw=0.5, alpha=0.4, color="0.5")
        if len(vals) >= window:
            smooth = np.convolve(vals, np.ones(window) / window, mode="valid")
            ax.plot(np.arange(window - 1, len(vals)), smooth, lw=1.2, color="C0")
        ax.set_ylabel(name, fontsize=8)
        ax.tick_params(labelsize=7)
    axes[-1, 0].set_xlabel("iteration", fontsize=8)
    if title:
        axes[0, 0].set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def metric_bars(values: dict, path, title=None):
    names = list(values)
    fig, ax = plt.subplots(figsize=(1.0 + 0.8 * len(names), 2.6))
    ax.bar(range(len(names)), [values[n] for n in names], color="C0")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=7)
    ax.tick_params(axis="y", labelsize=7)
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
