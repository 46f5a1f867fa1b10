"""Figures for the ``report`` command. Rendering uses the non-interactive Agg backend."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .structures import Frame, InstanceTrack  # noqa: E402
from .viseval import EvalResult  # noqa: E402


def _color(identity: int) -> np.ndarray:
    return np.array(plt.get_cmap("tab10")(identity % 10)[:3])


def overlay(frame: Frame, tracks: Sequence[InstanceTrack], alpha: float = 0.5) -> np.ndarray:
    """``[H, W, 3]`` image with every track's mask at this frame tinted by identity."""
    img = frame.pixels.transpose(1, 2, 0).copy()
    for tr in tracks:
        e = tr.entry_at(frame.index)
        if e is None:
            continue
        img[e.mask] = (1 - alpha) * img[e.mask] + alpha * _color(tr.identity)
    return np.clip(img, 0.0, 1.0)


def overlay_figure(frames: Sequence[Frame], tracks: Sequence[InstanceTrack], path: Path,
                   max_frames: int = 8) -> Path:
    shown = list(frames)[:max_frames]
    fig, axes = plt.subplots(1, len(shown), figsize=(2.2 * len(shown), 2.4), squeeze=False)
    for ax, fr in zip(axes[0], shown):
        ax.imshow(overlay(fr, tracks), interpolation="nearest")
        for tr in tracks:
            e = tr.entry_at(fr.index)
            if e is not None:
                x, y, w, h = e.box
                ax.add_patch(plt.Rectangle((x - 0.5, y - 0.5), w, h, fill=False, lw=1,
                                           ec=_color(tr.identity)))
                ax.text(x, y - 1, str(tr.identity), color=_color(tr.identity), fontsize=7)
        ax.set_title(f"t={fr.index}", fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def ap_curve_figure(result: EvalResult, path: Path) -> Path:
    """AP against IoU threshold, one line per category plus the mean."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    th = result.thresholds
    for c, row in zip(result.categories, result.ap_per_category_per_threshold):
        ax.plot(th, row, marker=".", lw=1, label=f"cat {c}")
    ax.plot(th, result.ap_per_category_per_threshold.mean(axis=0), "k-", lw=2, label="mean")
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("AP")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
