"""Matplotlib renderings that accompany each CSV the CLI writes."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .metrics import MetricReport


def save_loss_curve(losses: Sequence[tuple[int, float, float]], path) -> None:
    """Loss (log scale) and learning rate against iteration."""
    iters = [i for i, _, _ in losses]
    vals = [l for _, l, _ in losses]
    lrs = [lr for _, _, lr in losses]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(iters, vals, lw=1.0, color="tab:blue")
    ax.set_xlabel("iteration")
    ax.set_ylabel("L1 loss", color="tab:blue")
    ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    ax2 = ax.twinx()
    ax2.plot(iters, lrs, lw=1.0, color="tab:orange", drawstyle="steps-post")
    ax2.set_ylabel("learning rate", color="tab:orange")
    ax2.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_report_figure(report: MetricReport, path) -> None:
    """Per-image cPSNR and SSIM bars with the mean marked."""
    names = [r[0] for r in report.per_image]
    psnrs = [r[1] for r in report.per_image]
    ssims = [r[2] for r in report.per_image]
    n = len(names)
    fig, (ax1, ax2) = plt.subplots(
        1, 2, figsize=(9, max(2.2, 0.35 * n + 1.4)), sharey=True
    )
    ypos = range(n)
    ax1.barh(ypos, psnrs, color="tab:blue", alpha=0.8)
    ax1.axvline(report.mean_cpsnr, color="k", ls="--", lw=1, label=f"mean {report.mean_cpsnr:.2f} dB")
    ax1.set_yticks(list(ypos), labels=names, fontsize=7)
    ax1.invert_yaxis()
    ax1.set_xlabel("cPSNR (dB)")
    ax1.legend(fontsize=8)
    ax2.barh(ypos, ssims, color="tab:green", alpha=0.8)
    ax2.axvline(report.mean_ssim, color="k", ls="--", lw=1, label=f"mean {report.mean_ssim:.4f}")
    ax2.set_xlabel("SSIM")
    ax2.legend(fontsize=8)
    fig.suptitle(f"{report.method} on {report.dataset}", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ablation_figure(rows: Sequence[dict], path) -> None:
    """Model size per ablation case, annotated with parameter counts."""
    cases = [r["case"] for r in rows]
    sizes = [r["size_mb"] for r in rows]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(cases)), 3.6))
    bars = ax.bar(cases, sizes, color="tab:purple", alpha=0.8)
    for bar, r in zip(bars, rows):
        ax.annotate(f"{r['params']:,}", (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                    ha="center", va="bottom", fontsize=7)
    ax.set_ylabel("size (MB, float32)")
    ax.tick_params(axis="x", labelrotation=20)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
