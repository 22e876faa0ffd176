"""Figures written next to the text outputs of ``train`` and ``eval``."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "figure.figsize": (6.0, 3.7),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "savefig.bbox": "tight",
    # Stable bytes for identical inputs.
    "svg.hashsalt": "condsr",
}


def read_loss_log(path):
    steps, losses = [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            step, loss, _ = line.split("\t")
            steps.append(int(step))
            losses.append(float(loss))
    return steps, losses


def moving_average(values, window: int):
    out, acc = [], 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out


def plot_loss_curve(log_path, out_path, window: int = 100) -> Path | None:
    steps, losses = read_loss_log(log_path)
    if not steps:
        return None
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        ax.plot(steps, losses, lw=0.5, alpha=0.4, color="0.5", label="per step")
        ax.plot(steps, moving_average(losses, window), lw=1.5, color="C0",
                label=f"{window}-step mean")
        ax.set_xlabel("step")
        ax.set_ylabel("L1 loss")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        fig.savefig(out_path, metadata={"Software": None})
        plt.close(fig)
    return Path(out_path)


def plot_eval_report(report, out_path) -> Path | None:
    if not report.records:
        return None
    ids = [r.id for r in report.records]
    ps = [r.psnr_db if math.isfinite(r.psnr_db) else float("nan") for r in report.records]
    ss = [r.ssim for r in report.records]
    with plt.rc_context(RC):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(max(6.0, 0.35 * len(ids) + 3), 3.2))
        a1.bar(range(len(ids)), ps, color="C0")
        a1.set_ylabel("PSNR (dB)")
        a2.bar(range(len(ids)), ss, color="C1")
        a2.set_ylabel("SSIM")
        for ax in (a1, a2):
            ax.set_xticks(range(len(ids)))
            ax.set_xticklabels(ids, rotation=90, fontsize=6)
        fig.suptitle(f"protocol {report.protocol.describe()}", fontsize=9)
        fig.savefig(out_path, metadata={"Software": None})
        plt.close(fig)
    return Path(out_path)
