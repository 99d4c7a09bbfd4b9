"""Figure rendering for the CLI report paths (headless matplotlib)."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .memory import MemoryReport

_MB = 1024.0 * 1024.0


def save_memory_curve(reports: Sequence[MemoryReport], path) -> None:
    """Measured peak bytes vs duration, one line per mode."""
    modes = []
    for r in reports:
        if r.mode not in modes:
            modes.append(r.mode)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for mode in modes:
        pts = [(r.duration_s, r.measured_bytes / _MB) for r in reports if r.mode == mode]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=mode)
    ax.set_xlabel("video duration [s]")
    ax.set_ylabel("peak tensor memory [MiB]")
    ax.set_title("Peak forward-pass memory vs video duration")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_training_curve(history, path) -> None:
    """Total loss and train mIoU per epoch on twin axes."""
    epochs = [h.epoch for h in history]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(epochs, [h.loss_total for h in history], color="tab:red", marker=".", label="total loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("total loss", color="tab:red")
    ax2 = ax.twinx()
    ax2.plot(epochs, [h.miou for h in history], color="tab:blue", marker=".", label="train mIoU")
    ax2.set_ylabel("train mIoU", color="tab:blue")
    ax2.set_ylim(0.0, 1.0)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_sampler_comparison(rows: Sequence[dict], path) -> None:
    """Bar chart of seed-mean mIoU per sampler mode (pre-sorted rows)."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    names = [r["mode"] for r in rows]
    vals = [r["mIoU"] for r in rows]
    ax.bar(names, vals, color="tab:blue")
    ax.set_ylabel("seed-mean eval mIoU")
    ax.set_title("Sampler comparison")
    ax.set_ylim(0.0, 1.0)
    for i, v in enumerate(vals):
        ax.text(i, v + 0.01, f"{v:.3f}", ha="center", fontsize=8)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
