"""Report figures written next to the text/TSV output."""
from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import to_uint8  # noqa: E402

STAGE_COLORS = {1: "tab:blue", 2: "tab:orange"}


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def loss_curve(history, path, window: int = 20) -> Path:
    """Per-step loss for each stage, with a trailing moving average."""
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    for stage in sorted({r.stage for r in history}):
        recs = [r for r in history if r.stage == stage]
        steps = np.array([r.step for r in recs])
        loss = np.array([r.loss for r in recs])
        color = STAGE_COLORS.get(stage, None)
        ax.plot(steps, loss, color=color, alpha=0.3, lw=0.8)
        if len(loss) >= window:
            avg = np.convolve(loss, np.ones(window) / window, mode="valid")
            ax.plot(steps[window - 1:], avg, color=color, lw=1.6, label=f"stage {stage}")
        else:
            ax.plot(steps, loss, color=color, lw=1.6, label=f"stage {stage}")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    ax.legend(frameon=False)
    return _finish(fig, path)


def comparison_grid(rows, path, max_rows: int = 6) -> Path:
    """One row per sample: input, prediction, target.

    ``rows`` holds ``(sample_id, input, prediction, target, psnr)`` tuples.
    """
    rows = list(rows)[:max_rows]
    fig, axes = plt.subplots(len(rows), 3, figsize=(7.5, 2.6 * len(rows)), squeeze=False)
    for r, (sid, inp, pred, tgt, db) in enumerate(rows):
        label = "inf" if math.isinf(db) else f"{db:.2f} dB"
        for c, (img, title) in enumerate(((inp, "input"), (pred, f"output ({label})"), (tgt, "target"))):
            ax = axes[r, c]
            ax.imshow(to_uint8(img))
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0 or c == 1:
                ax.set_title(title, fontsize=9)
        axes[r, 0].set_ylabel(sid, fontsize=9)
    return _finish(fig, path)


def metrics_bars(report, path) -> Path:
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3.2))
    x = np.arange(report.count)
    finite = [p if not math.isinf(p) else np.nan for p in report.psnr]
    a1.bar(x, finite, color="tab:blue")
    a1.axhline(report.mean_psnr, color="k", lw=0.8, ls="--")
    a1.set_ylabel("PSNR (dB)")
    a2.bar(x, report.ssim, color="tab:green")
    a2.axhline(report.mean_ssim, color="k", lw=0.8, ls="--")
    a2.set_ylabel("SSIM")
    for ax in (a1, a2):
        ax.set_xticks(x)
        ax.set_xticklabels(report.sample_ids, rotation=90, fontsize=7)
    fig.tight_layout()
    return _finish(fig, path)
