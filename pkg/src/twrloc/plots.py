"""SVG rendering of training curves and SNR sweeps (matplotlib, Agg)."""

from __future__ import annotations

import math


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "twrloc"
    import matplotlib.pyplot as plt
    return plt


def _savefig(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})


def plot_history(history_rows: list[dict], path) -> None:
    """Loss and hit-accuracy curves for one training run."""
    plt = _pyplot()
    epochs = [r["epoch"] for r in history_rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(epochs, [r["train_loss"] for r in history_rows], label="train")
    if any(math.isfinite(r["val_loss"]) for r in history_rows):
        ax1.plot(epochs, [r["val_loss"] for r in history_rows], label="val")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("MSLE")
    ax1.set_yscale("log")
    ax1.legend()
    ax2.plot(epochs, [r["train_hit_acc"] for r in history_rows], label="train")
    if any(math.isfinite(r["val_hit_acc"]) for r in history_rows):
        ax2.plot(epochs, [r["val_hit_acc"] for r in history_rows], label="val")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("hit accuracy")
    ax2.set_ylim(-0.02, 1.02)
    ax2.legend()
    fig.tight_layout()
    _savefig(fig, path)
    plt.close(fig)


def plot_snr_sweep(rows: list[dict], path) -> None:
    """Validation hit-accuracy vs SNR; the no-noise run is a reference line."""
    plt = _pyplot()
    noisy = [r for r in rows if math.isfinite(r["snr_db"])]
    clean = [r for r in rows if not math.isfinite(r["snr_db"])]
    fig, ax = plt.subplots(figsize=(5.5, 4))
    xs = [r["snr_db"] for r in noisy]
    ys = [r["val_hit_acc_mean"] for r in noisy]
    errs = [r["val_hit_acc_std"] for r in noisy]
    ax.errorbar(xs, ys, yerr=errs, marker="o", capsize=3, label="with noise")
    if clean:
        ax.axhline(clean[0]["val_hit_acc_mean"], linestyle="--", color="gray",
                   label="no noise")
    ax.set_xlabel("SNR (dB)")
    ax.set_ylabel("validation hit accuracy")
    ax.set_ylim(-0.02, 1.02)
    ax.legend()
    fig.tight_layout()
    _savefig(fig, path)
    plt.close(fig)


def plot_report(rows: list[dict], path) -> None:
    """Grouped bars of validation hit-accuracy per wall model and mode."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(8, 4))
    labels = [f"{r['wall_model']}\n({r['mode']})" for r in rows]
    ax.bar(range(len(rows)), [r["val_hit_acc"] for r in rows])
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("validation hit accuracy")
    ax.set_ylim(0, 1.02)
    fig.tight_layout()
    _savefig(fig, path)
    plt.close(fig)
