"""Report figures. Everything renders off-screen to PNG next to the delimited outputs."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import STRUCTURES, STRUCTURE_LABELS  # noqa: E402

golden_mean = (np.sqrt(5) - 1.0) / 2.0
fig_width = 5.0
colors = ["#2b8cbe", "#e34a33", "#31a354", "#756bb1", "#636363"]

params = {
    "axes.prop_cycle": matplotlib.cycler(color=colors),
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 8,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": [fig_width, fig_width * golden_mean],
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "lines.linewidth": 1,
}

# overlay colours for classes 0..4
CLASS_COLORS = np.array([[0, 0, 0], [0.35, 0.35, 0.35], [0.9, 0.2, 0.2],
                         [0.2, 0.7, 0.3], [0.2, 0.4, 0.9]])


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_trace(losses, path, window: int = 50, title: str = "diffusion training"):
    losses = np.asarray(losses, dtype=float)
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        steps = np.arange(1, len(losses) + 1)
        ax.plot(steps, losses, color="0.75", lw=0.5, label="per step")
        if len(losses) >= window:
            smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
            ax.plot(steps[window - 1:], smooth, label=f"{window}-step mean")
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("hybrid loss")
        ax.set_title(title)
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_seg_history(history, path, title: str = "segmentation training"):
    with plt.rc_context(params):
        fig, ax1 = plt.subplots()
        epochs = [h.epoch for h in history]
        ax1.plot(epochs, [h.train_loss for h in history], label="train loss")
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("cross-entropy")
        ax2 = ax1.twinx()
        ax2.plot(epochs, [h.val_dice for h in history], color=colors[1], label="val mean Dice")
        ax2.set_ylabel("Dice")
        ax2.set_ylim(0, 1)
        ax1.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_dice_report(report, path):
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        data = [np.asarray(report.per_image[s]) * 100 for s in STRUCTURES]
        ax.boxplot(data, widths=0.5)
        rng = np.random.default_rng(0)
        for i, d in enumerate(data, start=1):
            ax.scatter(i + rng.uniform(-0.08, 0.08, len(d)), d, s=6, color=colors[i - 1], zorder=3)
        ax.set_xticks(range(1, len(STRUCTURES) + 1), [STRUCTURE_LABELS[s] for s in STRUCTURES])
        ax.set_ylabel("Dice (%)")
        ax.set_title(f"{report.dataset}: mean {100 * report.row_mean:.1f}%")
        fig.tight_layout()
        return _save(fig, path)


def plot_summary(reports, path):
    with plt.rc_context(params):
        fig, ax = plt.subplots(figsize=(fig_width * 1.3, fig_width * golden_mean))
        width = 0.8 / len(STRUCTURES)
        x = np.arange(len(reports))
        for k, s in enumerate(STRUCTURES):
            ax.bar(x + (k - 1) * width, [100 * r.mean[s] for r in reports], width,
                   yerr=[100 * r.std[s] for r in reports], capsize=2, label=STRUCTURE_LABELS[s])
        ax.set_xticks(x, [r.dataset for r in reports])
        ax.set_ylabel("Dice (%)")
        ax.set_ylim(0, 105)
        ax.legend(frameon=False, ncol=3, loc="lower right")
        fig.tight_layout()
        return _save(fig, path)


def overlay(lm: np.ndarray) -> np.ndarray:
    return CLASS_COLORS[np.asarray(lm, dtype=int)]


def plot_samples(label_maps, images, path, titles=None, max_items: int = 8):
    n = min(len(images), max_items)
    with plt.rc_context(params):
        fig, axes = plt.subplots(2, n, figsize=(1.3 * n, 2.8), squeeze=False)
        for i in range(n):
            axes[0, i].imshow(overlay(label_maps[i]), interpolation="nearest")
            axes[1, i].imshow(images[i], cmap="gray", vmin=0, vmax=1)
            if titles is not None:
                axes[0, i].set_title(titles[i], fontsize=6)
            for ax in axes[:, i]:
                ax.set_axis_off()
        fig.tight_layout()
        return _save(fig, path)
