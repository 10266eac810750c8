"""Figures written next to the CSV outputs of the CLI."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .cost import CostReport  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "savefig.dpi": 120,
}


def plot_training(rows: Sequence[dict], path, title: str | None = None) -> Path:
    """Train L1, learning rate and validation PSNR per epoch."""
    path = Path(path)
    ep = np.array([r["epoch"] for r in rows], dtype=float)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 3, figsize=(10, 3))
        axes[0].plot(ep, [r["train_l1"] for r in rows], color="k")
        axes[0].set_ylabel("train L1")
        axes[1].plot(ep, [r["lr"] for r in rows], color="tab:blue")
        axes[1].set_ylabel("learning rate")
        val = np.array([r["val_psnr"] for r in rows], dtype=float)
        if np.isfinite(val).any():
            axes[2].plot(ep, val, color="tab:red")
        axes[2].set_ylabel("val PSNR (dB)")
        for ax in axes:
            ax.set_xlabel("epoch")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_cost(report: CostReport, path, title: str | None = None) -> Path:
    """Per-stage parameter and MAC totals as horizontal bars."""
    path = Path(path)
    groups = report.by_prefix()
    names = list(groups)
    params = np.array([groups[n][0] for n in names]) / 1e6
    macs = np.array([groups[n][1] for n in names]) / 1e9
    y = np.arange(len(names))
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 2, figsize=(8, 0.25 * len(names) + 1.2), sharey=True)
        axes[0].barh(y, params, color="tab:blue")
        axes[0].set_xlabel("params (M)")
        axes[1].barh(y, macs, color="tab:orange")
        axes[1].set_xlabel(f"MACs (G) at {report.resolution[0]}x{report.resolution[1]}")
        axes[0].set_yticks(y, names)
        axes[0].invert_yaxis()
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path

