"""Delimited reports plus matplotlib figures rendered next to them.

Every writer emits a CSV at the requested path and a PNG sibling with
the same stem, so a report directory reads as data plus picture pairs.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .compress import REPORT_COLUMNS, ReportRow


def figure_path(csv_path) -> Path:
    return Path(csv_path).with_suffix(".png")


def write_metrics(csv_path, metrics) -> Path:
    """Training trace rows (step, loss, lr) and a loss/lr curve."""
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss", "lr"])
        for step, loss, lr in metrics:
            w.writerow([step, f"{loss:.8f}", f"{lr:.8e}"])

    steps = [m[0] for m in metrics]
    losses = [m[1] for m in metrics]
    lrs = [m[2] for m in metrics]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses, color="tab:blue", lw=1.2, label="loss")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    ax2 = ax.twinx()
    ax2.plot(steps, lrs, color="tab:orange", lw=1.0, ls="--", label="lr")
    ax2.set_ylabel("learning rate")
    ax.set_title("training trace")
    fig.tight_layout()
    out = figure_path(csv_path)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def write_compression_report(csv_path, rows: list[ReportRow]) -> Path:
    """Per-layer compression stats and a two-panel error/rank figure."""
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow(
                [
                    r.projection,
                    r.group,
                    r.layer,
                    f"{r.pca_error:.10e}",
                    r.residual_rank,
                    f"{r.whitening_ridge:.6e}",
                    f"{r.cr_achieved:.6f}",
                ]
            )

    tags = sorted({r.projection for r in rows})
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for tag in tags:
        sub = sorted((r for r in rows if r.projection == tag), key=lambda r: r.layer)
        layers = [r.layer for r in sub]
        ax1.plot(layers, [r.pca_error for r in sub], marker="o", ms=3, label=tag)
        ax2.plot(layers, [r.residual_rank for r in sub], marker="s", ms=3, label=tag)
    ax1.set_xlabel("layer")
    ax1.set_ylabel("basis reconstruction error")
    ax1.set_yscale("symlog", linthresh=1e-12)
    ax1.grid(alpha=0.3)
    ax1.legend(title="projection", fontsize=8)
    ax2.set_xlabel("layer")
    ax2.set_ylabel("residual rank")
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    out = figure_path(csv_path)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def similarity_csv_block(tag: str, matrix: np.ndarray) -> str:
    lines = [f"projection,{tag}"]
    for row in matrix:
        lines.append(",".join(f"{v:.6f}" for v in row))
    return "\n".join(lines)


def write_similarity(csv_path, blocks: dict[str, np.ndarray]) -> Path:
    """Atom cosine-similarity blocks per projection and a heatmap grid."""
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as f:
        for tag, matrix in blocks.items():
            f.write(similarity_csv_block(tag, matrix))
            f.write("\n")

    n = len(blocks)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.2))
    if n == 1:
        axes = [axes]
    im = None
    for ax, (tag, matrix) in zip(axes, blocks.items()):
        im = ax.imshow(matrix, vmin=-1.0, vmax=1.0, cmap="RdBu_r")
        ax.set_title(f"{tag} atoms")
        s = matrix.shape[0]
        ax.set_xticks(range(s))
        ax.set_yticks(range(s))
        if s <= 8:
            for i in range(s):
                for j in range(s):
                    ax.text(
                        j, i, f"{matrix[i, j]:.2f}",
                        ha="center", va="center", fontsize=7,
                    )
    if im is not None:
        fig.colorbar(im, ax=axes, shrink=0.8, label="cosine similarity")
    out = figure_path(csv_path)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out
