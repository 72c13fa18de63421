"""Matplotlib figure output for the CLI report paths."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_training_curves(metrics: list[dict], path) -> None:
    """Loss terms and reference PSNR over iterations."""
    iters = [m["iteration"] for m in metrics]
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    axes[0].plot(iters, [m.get("ref_loss", np.nan) for m in metrics], lw=0.9)
    axes[0].set_yscale("log")
    axes[0].set_title("reference loss")
    axes[1].plot(iters, [m.get("sds_residual_norm", np.nan) for m in metrics],
                 lw=0.9, color="tab:orange")
    axes[1].set_title("score residual norm")
    axes[2].plot(iters, [m.get("psnr_ref", np.nan) for m in metrics],
                 lw=0.9, color="tab:green")
    axes[2].set_title("PSNR vs reference [dB]")
    for ax in axes:
        ax.set_xlabel("iteration")
        ax.grid(alpha=0.3)
    stages = [m.get("stage", 1) for m in metrics]
    if 2 in stages:
        boundary = iters[stages.index(2)]
        for ax in axes:
            ax.axvline(boundary, color="gray", ls="--", lw=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_amplitude_heatmap(log_amplitude: np.ndarray, path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(4.2, 4.0))
    im = ax.imshow(log_amplitude, cmap="magma")
    ax.set_title(title or "log amplitude spectrum")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_energy_profiles(grid: np.ndarray, profiles: dict[str, np.ndarray],
                         mean_profile: np.ndarray, path,
                         cutoffs: dict[str, dict[float, float]] | None = None) -> None:
    """Cumulative radial energy per image plus the folder mean."""
    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    for name, prof in profiles.items():
        ax.plot(grid, prof, lw=0.8, alpha=0.55, label=name)
    ax.plot(grid, mean_profile, lw=2.2, color="black", label="mean")
    ax.set_xlabel("normalized radius")
    ax.set_ylabel("cumulative energy fraction")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    if len(profiles) <= 8:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_view_metrics(rows: list[dict], path) -> None:
    """Per-view PSNR/SSIM bars for the eval report."""
    ids = [r["view_id"] for r in rows]
    x = np.arange(len(ids))
    fig, axes = plt.subplots(1, 2, figsize=(11, 3.6))
    axes[0].bar(x, [r["psnr_db"] for r in rows], color="tab:blue")
    axes[0].set_title("PSNR [dB]")
    axes[1].bar(x, [r["ssim"] for r in rows], color="tab:orange")
    axes[1].set_title("SSIM")
    axes[1].set_ylim(0, 1.05)
    for ax in axes:
        ax.set_xticks(x)
        ax.set_xticklabels(ids, rotation=90, fontsize=6)
        ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
