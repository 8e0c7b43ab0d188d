"""Figures written next to the CSV reports (loss curves, CMC, part maps)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update({
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
})


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training(records, path) -> Path:
    """Loss components and learning rate per optimizer step."""
    steps = np.array([r.step for r in records])
    fig, (ax, ax_lr) = plt.subplots(2, 1, figsize=(5.5, 4.5), sharex=True,
                                    gridspec_kw={"height_ratios": [3, 1]})
    ax.plot(steps, [r.loss_total for r in records], lw=1.2, label="total")
    ax.plot(steps, [r.loss_cls for r in records], lw=1.0, label="cls")
    ax.plot(steps, [r.loss_tri for r in records], lw=1.0, label="triplet")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    ax_lr.semilogy(steps, [r.lr for r in records], color="k", lw=1.0)
    ax_lr.set_ylabel("lr")
    ax_lr.set_xlabel("step")
    return _save(fig, path)


def plot_cmc(report, path, max_rank: int = 10) -> Path:
    ranks = sorted(k for k in report.cmc if k <= max_rank)
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(ranks, [report.cmc[k] for k in ranks], marker="o")
    ax.set_xlabel("rank")
    ax.set_ylabel("matching rate")
    ax.set_ylim(0, 1.02)
    ax.set_title(f"mAP = {report.mAP:.3f}")
    return _save(fig, path)


def plot_part_maps(maps: np.ndarray, path, image: np.ndarray | None = None, sets=None) -> Path:
    """Grid of part-token maps; unassigned patches black, attention blue (low) to red (high)."""
    n = len(maps) + (image is not None)
    fig, axes = plt.subplots(1, n, figsize=(1.3 * n, 2.6))
    axes = np.atleast_1d(axes)
    k = 0
    if image is not None:
        axes[0].imshow(np.clip(image.squeeze(), 0, 1), cmap="gray" if image.shape[-1] == 1 else None)
        axes[0].set_title("image")
        k = 1
    cmap = plt.get_cmap("jet").copy()
    cmap.set_under("black")
    labels = [f"PT{p}" for p in range(len(maps))]
    if sets:
        labels = [f"{g}-set #{j}" for g in sets for j in range(g)]
    for p, m in enumerate(maps):
        ax = axes[k + p]
        ax.imshow(m.astype(float), cmap=cmap, vmin=0.5, vmax=255, interpolation="nearest")
        ax.set_title(labels[p], fontsize=7)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    return _save(fig, path)


def plot_assignment_shares(shares: dict[str, list[float]], path, threshold: float = 0.6) -> Path:
    """Largest-cluster share per layer for each assignment mode."""
    fig, ax = plt.subplots(figsize=(4.5, 3))
    for name, vals in shares.items():
        ax.plot(np.arange(len(vals)), vals, marker="o", label=name)
    ax.axhline(threshold, color="grey", ls="--", lw=0.8)
    ax.set_xlabel("layer")
    ax.set_ylabel("largest cluster share")
    ax.set_ylim(0, 1.02)
    ax.legend(frameon=False)
    return _save(fig, path)
