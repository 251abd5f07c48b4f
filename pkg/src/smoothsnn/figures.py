"""Figure rendering for the report paths.

Every CLI subcommand that writes delimited output also renders the matching
matplotlib figure next to it.  Rendering goes through the Agg backend and a
byte buffer so the final file write stays atomic.
"""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .analysis import DistributionStats
from .fileio import atomic_write_bytes
from .training import MetricsRecord


def _save(fig, path) -> None:
    buf = io.BytesIO()
    fig.tight_layout()
    fig.savefig(buf, format="png", dpi=120)
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def plot_training_curves(records: list[MetricsRecord], path) -> None:
    epochs = [r.epoch for r in records]
    n_alpha = len(records[0].alphas) if records else 0
    ncols = 3 if n_alpha else 2
    fig, axes = plt.subplots(1, ncols, figsize=(4 * ncols, 3.2))
    axes[0].plot(epochs, [r.train_loss for r in records], label="train loss")
    axes[0].plot(epochs, [r.guidance_loss for r in records], label="guidance loss")
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("loss")
    axes[0].legend()
    axes[1].plot(epochs, [r.train_acc for r in records], label="train acc")
    axes[1].plot(epochs, [r.val_acc for r in records], label="val acc")
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("accuracy")
    axes[1].set_ylim(0, 1.02)
    axes[1].legend()
    if n_alpha:
        for i in range(n_alpha):
            axes[2].plot(epochs, [r.alphas[i] for r in records], label=f"layer {i + 1}")
        axes[2].set_xlabel("epoch")
        axes[2].set_ylabel("blend coefficient")
        axes[2].set_ylim(0, 1)
        axes[2].legend()
    _save(fig, path)


def plot_mp_distributions(stats: DistributionStats, path) -> None:
    T = stats.histograms.shape[0]
    centers = 0.5 * (stats.bin_edges[:-1] + stats.bin_edges[1:])
    fig, axes = plt.subplots(1, T, figsize=(2.4 * T, 2.6), sharey=True)
    axes = np.atleast_1d(axes)
    for t in range(T):
        axes[t].bar(centers, stats.histograms[t],
                    width=(stats.bin_edges[1] - stats.bin_edges[0]))
        axes[t].set_title(f"t={t + 1}\nmean={stats.means[t]:.3f} std={stats.stds[t]:.3f}",
                          fontsize=8)
        axes[t].set_xlabel("membrane potential")
    axes[0].set_ylabel("count")
    fig.suptitle(f"layer {stats.layer + 1} pre-fire membrane potential", fontsize=10)
    _save(fig, path)


def plot_adjacent_cosine(sims_by_layer: dict[int, list[float]], path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for layer, sims in sorted(sims_by_layer.items()):
        pairs = np.arange(1, len(sims) + 1)
        ax.plot(pairs, sims, marker="o", label=f"layer {layer + 1}")
    ax.set_xlabel("timestep pair (t, t+1)")
    ax.set_ylabel("histogram cosine similarity")
    ax.set_ylim(0, 1.05)
    ax.legend()
    _save(fig, path)


def plot_prefix_accuracy(accs_by_name: dict[str, list[float]], path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for name, accs in accs_by_name.items():
        ks = np.arange(1, len(accs) + 1)
        ax.plot(ks, accs, marker="o", label=name)
    ax.set_xlabel("inference timesteps k")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.02)
    ax.legend()
    _save(fig, path)


def plot_sensitivity(rows: list[dict], path) -> None:
    """Rows carry tau, alpha, delta_t, vanilla, smoothed."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    combos = sorted({(r["tau"], r["alpha"]) for r in rows})
    for tau, alpha in combos:
        sub = sorted((r for r in rows if r["tau"] == tau and r["alpha"] == alpha),
                     key=lambda r: r["delta_t"])
        dts = [r["delta_t"] for r in sub]
        ax.plot(dts, [r["vanilla"] for r in sub], linestyle="--",
                label=f"plain tau={tau:g}")
        ax.plot(dts, [r["smoothed"] for r in sub],
                label=f"smoothed tau={tau:g} alpha={alpha:g}")
    ax.set_yscale("log")
    ax.set_xlabel("timestep interval")
    ax.set_ylabel("gradient sensitivity")
    ax.legend(fontsize=7)
    _save(fig, path)
