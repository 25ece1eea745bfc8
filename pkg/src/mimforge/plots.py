"""Matplotlib figure rendering for the report paths; files only, no display."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def render_convergence_figure(series: dict[str, list[tuple[int, float]]], metric: str, out_path: str | os.PathLike) -> None:
    """One line per run: per-epoch metric curves."""
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for name, points in series.items():
        if not points:
            continue
        xs, ys = zip(*points)
        ax.plot(xs, ys, marker="o", markersize=3, linewidth=1.4, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel(metric)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=140)
    plt.close(fig)


def render_ablation_figure(rows: list[dict], out_path: str | os.PathLike) -> None:
    """Grouped bars: per-arm classification accuracy and segmentation mIoU."""
    arms = [r["arm"] for r in rows]
    acc = [r["classify_accuracy"] for r in rows]
    miou = [r["segment_miou"] for r in rows]
    x = range(len(arms))
    width = 0.38
    fig, ax = plt.subplots(figsize=(7.2, 4.2))
    ax.bar([i - width / 2 for i in x], acc, width, label="classify accuracy")
    ax.bar([i + width / 2 for i in x], miou, width, label="segment mIoU")
    ax.set_xticks(list(x))
    ax.set_xticklabels(arms, rotation=20, ha="right", fontsize=8)
    ax.set_ylim(0, 1)
    ax.grid(True, axis="y", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=140)
    plt.close(fig)


def render_sample_grid(images, out_path: str | os.PathLike, cols: int = 8) -> None:
    """Small montage of dataset samples."""
    n = len(images)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(cols * 1.1, rows * 1.1))
    for i in range(rows * cols):
        ax = axes.flat[i] if rows * cols > 1 else axes
        ax.axis("off")
        if i < n:
            ax.imshow(images[i], interpolation="nearest")
    fig.tight_layout(pad=0.2)
    fig.savefig(out_path, dpi=140)
    plt.close(fig)
