"""Report figures written next to the CSV outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 10,
    "axes.linewidth": 1.0,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "xtick.direction": "out",
    "ytick.direction": "out",
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def _figure(width=5.0, height=3.2):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, height))
    return fig, ax


def _save(fig, path) -> Path:
    path = Path(path)
    with plt.rc_context(STYLE):
        fig.savefig(path)
    plt.close(fig)
    return path


def plot_histogram(hist, path, title="Motion magnitude") -> Path:
    fig, ax = _figure()
    lefts = hist.edges[:-1]
    widths = np.diff(hist.edges)
    ax.bar(lefts, hist.counts, width=widths, align="edge", color="#4c72b0", edgecolor="white")
    ax.set_xlabel("motion magnitude (px)")
    ax.set_ylabel("triplets")
    ax.set_title(title)
    return _save(fig, path)


def plot_bracket_counts(counts: dict[str, int], path) -> Path:
    fig, ax = _figure()
    labels = list(counts)
    ax.bar(range(len(labels)), [counts[k] for k in labels], color="#55a868")
    ax.set_xticks(range(len(labels)), labels, rotation=30)
    ax.set_xlabel("motion bracket (px)")
    ax.set_ylabel("triplets")
    return _save(fig, path)


def plot_loss_curve(steps: Sequence[int], losses: Sequence[float], path, lrs=None) -> Path:
    fig, ax = _figure()
    ax.plot(steps, losses, color="#4c72b0", linewidth=1.0, label="loss")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    if lrs is not None:
        ax2 = ax.twinx()
        ax2.plot(steps, lrs, color="#c44e52", linewidth=0.8, linestyle="--", label="lr")
        ax2.set_ylabel("learning rate")
    return _save(fig, path)


def plot_eval(report, path) -> Path:
    """PSNR per sample against motion magnitude."""
    fig, ax = _figure()
    rows = [r for r in report.rows if r.psnr_db is not None]
    xs = [r.motion_px if r.motion_px is not None else np.nan for r in rows]
    ax.scatter(xs, [r.psnr_db for r in rows], s=12, color="#4c72b0")
    if report.mean_psnr is not None:
        ax.axhline(report.mean_psnr, color="#c44e52", linewidth=0.8, linestyle="--",
                   label=f"mean {report.mean_psnr:.2f} dB")
        ax.legend(loc="best", frameon=False)
    ax.set_xlabel("motion magnitude (px)")
    ax.set_ylabel("PSNR (dB)")
    return _save(fig, path)
