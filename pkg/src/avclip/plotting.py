"""Figure helpers for the report-producing CLI commands.

Every function writes one figure to ``path`` and returns the path; nothing is shown.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {"font.size": 9, "axes.spines.top": False, "axes.spines.right": False, "savefig.dpi": 120}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def loss_curve(curve, path, evals=None):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3))
        steps = [c[0] for c in curve]
        ax.plot(steps, [c[1] for c in curve], lw=1, color="tab:blue")
        ax.set_xlabel("step")
        ax.set_ylabel("contrastive loss")
        if evals:
            ax2 = ax.twinx()
            ax2.plot([s for s, _ in evals], [r.r1 for _, r in evals], "o-", color="tab:orange", ms=3)
            ax2.set_ylabel("val R@1 (%)")
            ax2.set_ylim(0, 100)
        return _save(fig, path)


def ablation_bars(rows, path, key="label", title=None):
    """Mean R@1 per row with a min-max range bar."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(rows), 3))
        means = np.array([r["r1_mean"] for r in rows])
        lo = means - np.array([r["r1_min"] for r in rows])
        hi = np.array([r["r1_max"] for r in rows]) - means
        x = np.arange(len(rows))
        ax.bar(x, means, color="0.6", edgecolor="0.2", yerr=[lo, hi], capsize=3)
        ax.set_xticks(x, [str(r[key]) for r in rows], rotation=20)
        ax.set_ylabel("val R@1 (%)")
        ax.set_ylim(0, 100)
        if title:
            ax.set_title(title)
        return _save(fig, path)


def cost_tradeoff(rows, path):
    """GFLOPs against number of frames for the audiovisual and video-only models."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        frames = [r["frames"] for r in rows]
        ax.plot(frames, [r["video_only_gflops"] for r in rows], "s--", label="video only", color="0.4")
        ax.plot(frames, [r["av_gflops"] for r in rows], "o-", label="sparse frames + audio", color="tab:red")
        ax.set_xlabel("frames")
        ax.set_ylabel("inference GFLOPs")
        ax.legend(frameon=False)
        return _save(fig, path)


def saliency_grid(grids, path):
    """One panel per frame; values in [-1, 1]."""
    t = len(grids)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, t, figsize=(1.6 * t, 1.9), squeeze=False)
        for i, ax in enumerate(axes[0]):
            im = ax.imshow(grids[i], cmap="gray", vmin=-1, vmax=1)
            ax.set_title(f"t={i}")
            ax.set_xticks([])
            ax.set_yticks([])
        fig.colorbar(im, ax=list(axes[0]), shrink=0.8)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path)
        plt.close(fig)
        return path
