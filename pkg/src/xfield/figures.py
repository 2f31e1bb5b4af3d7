"""Matplotlib figure rendering for the report path.

Evaluation writes these next to the JSON/CSV output: a training loss curve,
an epipolar-slice figure (space horizontal, coordinate vertical) and a
per-image metric bar chart.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_loss_curve(losses: list[float], path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot(np.arange(1, len(losses) + 1), losses, lw=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("L1 loss")
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_epipolar_figure(slice_image: np.ndarray, path, coord_labels=None) -> None:
    """Render an epipolar slice with axes; rows are coordinate samples."""
    n, w = slice_image.shape[:2]
    fig, ax = plt.subplots(figsize=(6, max(2.0, 6.0 * n / w)))
    ax.imshow(np.clip(slice_image, 0, 1), aspect="auto", interpolation="nearest")
    ax.set_xlabel("pixel column")
    ax.set_ylabel("coordinate sample")
    if coord_labels is not None:
        ticks = np.linspace(0, n - 1, min(n, 5)).astype(int)
        ax.set_yticks(ticks)
        ax.set_yticklabels([f"{coord_labels[t]:.2f}" for t in ticks])
    ax.set_title("epipolar slice")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metric_bars(report, path) -> None:
    """Per-held-out-image PSNR/SSIM bars from an EvalReport."""
    indices = [str(e.index) for e in report.entries]
    psnrs = [min(e.psnr_db, 99.0) for e in report.entries]
    ssims = [e.ssim for e in report.entries]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.0))
    ax1.bar(indices, psnrs, color="#1f77b4")
    ax1.set_xlabel("held-out image")
    ax1.set_ylabel("PSNR (dB)")
    ax2.bar(indices, ssims, color="#ff7f0e")
    ax2.set_xlabel("held-out image")
    ax2.set_ylabel("SSIM")
    ax2.set_ylim(0, 1.0)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
