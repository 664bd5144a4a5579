"""Matplotlib figures written next to the CSV/JSON outputs of the CLI."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def read_training_log(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {
        "iter": np.array([int(r["iter"]) for r in rows]),
        "stage": np.array([int(r["stage"]) for r in rows]),
        "scene": [r["scene"] for r in rows],
        "loss_r": np.array([float(r["loss_r"]) for r in rows]),
        "loss_tv": np.array([float(r["loss_tv"]) for r in rows]),
        "psnr_running": np.array([float(r["psnr_running"]) for r in rows]),
    }


def plot_training_curve(log, path, smooth=20):
    """Reconstruction loss and running PSNR against iteration; stage changes as dashed lines."""
    if not isinstance(log, dict):
        log = read_training_log(log)
    it, loss = log["iter"], log["loss_r"]
    with plt.rc_context(RC):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7.0, 2.6))
        ax1.semilogy(it, loss, color="0.75", lw=0.6, label="per step")
        if len(loss) >= smooth:
            k = np.ones(smooth) / smooth
            ax1.semilogy(it[smooth - 1:], np.convolve(loss, k, mode="valid"), color="C0", lw=1.2,
                         label=f"mean of {smooth}")
        ax1.set_xlabel("iteration")
        ax1.set_ylabel("reconstruction loss")
        ax1.legend(frameon=False)
        ax2.plot(it, log["psnr_running"], color="C1", lw=1.2)
        ax2.set_xlabel("iteration")
        ax2.set_ylabel("running PSNR [dB]")
        for ax in (ax1, ax2):
            for b in np.nonzero(np.diff(log["stage"]))[0]:
                ax.axvline(it[b + 1], color="k", ls="--", lw=0.6)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_view_grid(gt_images, renders, metrics=None, path="views.png", max_views=6):
    """Ground truth, render and absolute error for up to ``max_views`` views."""
    n = min(len(renders), max_views)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(3, n, figsize=(1.6 * n, 5.0), squeeze=False)
        for j in range(n):
            gt = np.clip(gt_images[j], 0, 1)
            im = np.clip(renders[j], 0, 1)
            err = np.abs(gt - im).mean(axis=-1)
            axes[0, j].imshow(gt)
            axes[1, j].imshow(im)
            axes[2, j].imshow(err, cmap="magma", vmin=0, vmax=max(err.max(), 1e-3))
            if metrics is not None:
                v = metrics[j]
                axes[1, j].set_title(f"{v['psnr']:.1f} dB / {v['ssim']:.3f}")
            for ax in axes[:, j]:
                ax.set_xticks([])
                ax.set_yticks([])
        for ax, label in zip(axes[:, 0], ("ground truth", "render", "|error|")):
            ax.set_ylabel(label)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_volume_norms(volume, path, axis=2):
    """Per-node feature L2 norm on three slices through the volume."""
    norms = np.linalg.norm(volume.data.astype(np.float64), axis=-1)
    n = norms.shape[axis]
    picks = [n // 4, n // 2, (3 * n) // 4]
    vmax = max(float(norms.max()), 1e-6)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 3, figsize=(6.6, 2.4))
        for ax, k in zip(axes, picks):
            sl = np.take(norms, k, axis=axis)
            h = ax.imshow(sl.T, origin="lower", cmap="viridis", vmin=0, vmax=vmax)
            ax.set_title(f"slice {k}/{n}")
            ax.set_xticks([])
            ax.set_yticks([])
        fig.colorbar(h, ax=list(axes), shrink=0.8, label="|feature|")
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
