"""Figure rendering for the report paths: training curves, eval comparisons,
benchmark latencies, and frame strips. All figures go to files (Agg backend);
the JSON/delimited outputs stay the source of truth."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_loss_curve(losses, path, title="training loss"):
    losses = np.asarray(losses, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot(losses, lw=0.6, alpha=0.4, label="per step")
    if len(losses) >= 20:
        w = max(len(losses) // 50, 5)
        kernel = np.ones(w) / w
        smooth = np.convolve(losses, kernel, mode="valid")
        ax.plot(np.arange(len(smooth)) + w // 2, smooth, lw=1.6, label=f"avg({w})")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_eval_figure(report, path):
    per = report.get("per_script", [])
    fig, ax = plt.subplots(figsize=(7, 3.2))
    xs = np.arange(len(per))
    ax.bar(xs - 0.2, [s["move_db"] for s in per], width=0.4, label="true script")
    ax.bar(xs + 0.2, [s["baseline_db"] for s in per], width=0.4, label="shuffled")
    ax.axhline(report["move_psnr_db"], color="C0", ls="--", lw=1)
    ax.axhline(report["baseline_db"], color="C1", ls="--", lw=1)
    ax.set_xlabel("script")
    ax.set_ylabel("Move-PSNR (dB)")
    ax.set_title(f"margin {report['margin_db']:+.2f} dB ({report['mode']})")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_bench_figure(results: dict, path):
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    modes = list(results)
    axes[0].bar(modes, [results[m]["fps"] for m in modes], color=["C0", "C2"][:len(modes)])
    axes[0].set_ylabel("frames / s")
    axes[0].set_title("throughput")
    axes[1].bar(np.arange(len(modes)) - 0.2, [results[m]["p50_ms"] for m in modes],
                width=0.4, label="p50")
    axes[1].bar(np.arange(len(modes)) + 0.2, [results[m]["p95_ms"] for m in modes],
                width=0.4, label="p95")
    axes[1].set_xticks(np.arange(len(modes)), modes)
    axes[1].set_ylabel("token latency (ms)")
    axes[1].legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_frame_strip(frames, path, title="", max_frames=16):
    frames = np.asarray(frames)[:max_frames]
    n = len(frames)
    fig, axes = plt.subplots(1, n, figsize=(n * 0.9, 1.3))
    if n == 1:
        axes = [axes]
    for ax, f in zip(axes, frames):
        ax.imshow(f, cmap="gray", vmin=0, vmax=255, interpolation="nearest")
        ax.set_xticks([])
        ax.set_yticks([])
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
