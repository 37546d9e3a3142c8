"""PSNR / SSIM and dataset-level evaluation reports."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import signal

from film.data import BracketSpec, TripletRecord

logger = logging.getLogger(__name__)

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(pred: np.ndarray, target: np.ndarray, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 dB for identical inputs."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    mse = np.mean((pred - target) ** 2)
    if mse == 0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * np.log10(max_value ** 2 / mse)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def _ssim_channel(x: np.ndarray, y: np.ndarray, win: np.ndarray, c1: float, c2: float) -> np.ndarray:
    filt = lambda a: signal.convolve2d(a, win, mode="valid")  # noqa: E731
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim(pred: np.ndarray, target: np.ndarray, data_range: float = 1.0) -> float:
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Computed per channel over the fully-covered ("valid") window positions
    and averaged over channels and positions.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if pred.ndim == 2:
        pred, target = pred[..., None], target[..., None]
    h, w = pred.shape[:2]
    if min(h, w) < SSIM_WINDOW:
        raise ValueError(f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    win = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    maps = [_ssim_channel(pred[..., c], target[..., c], win, c1, c2) for c in range(pred.shape[-1])]
    return float(np.mean(maps))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _mean(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def _fmt(v: Optional[float]) -> str:
    return "NA" if v is None else repr(float(v))


@dataclass
class EvalRow:
    id: str
    psnr_db: Optional[float]
    ssim: Optional[float]
    motion_px: Optional[float]


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    skipped: int = 0
    brackets: BracketSpec = field(default_factory=BracketSpec)

    @property
    def mean_psnr(self) -> Optional[float]:
        return _mean([r.psnr_db for r in self.rows])

    @property
    def mean_ssim(self) -> Optional[float]:
        return _mean([r.ssim for r in self.rows])

    def by_bracket(self) -> dict[str, dict]:
        """Per motion bracket: sample count and mean metrics (None when absent)."""
        out = {}
        for i, label in enumerate(self.brackets.labels()):
            rows = [r for r in self.rows
                    if r.motion_px is not None and self.brackets.bracket_of(r.motion_px) == i]
            out[label] = {"count": len(rows),
                          "psnr_db": _mean([r.psnr_db for r in rows]),
                          "ssim": _mean([r.ssim for r in rows])}
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "psnr_db", "ssim", "motion_px"])
            for r in self.rows:
                writer.writerow([r.id, _fmt(r.psnr_db), _fmt(r.ssim), _fmt(r.motion_px)])

    def write_summary(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["group", "count", "psnr_db", "ssim"])
            writer.writerow(["all", len(self.rows), _fmt(self.mean_psnr), _fmt(self.mean_ssim)])
            for label, agg in self.by_bracket().items():
                writer.writerow([label, agg["count"], _fmt(agg["psnr_db"]), _fmt(agg["ssim"])])
            writer.writerow(["skipped", self.skipped, "NA", "NA"])


def read_report_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for k in ("psnr_db", "ssim", "motion_px"):
            row[k] = None if row[k] == "NA" else float(row[k])
    return rows


def evaluate_dataset(model, triplets: Sequence[TripletRecord], levels: Optional[int] = None,
                     batch_size: int = 4) -> EvalReport:
    """Interpolate every triplet's midpoint and score it against the true middle frame.

    Triplets whose frames do not fit the model (shape or divisibility) are
    skipped with a warning and counted.
    """
    from film.model import interpolate_midpoint

    report = EvalReport()
    divisor = 2 ** ((levels or model.config.levels) - 1)
    usable = []
    for i, trip in enumerate(triplets):
        h, w = trip.shape[:2]
        if len(trip.shape) != 3 or trip.shape[2] != 3 or h % divisor or w % divisor:
            logger.warning("skipping triplet %s with shape %s", trip.source_id or i, trip.shape)
            report.skipped += 1
            continue
        usable.append(trip)
    for start in range(0, len(usable), batch_size):
        chunk = usable[start:start + batch_size]
        groups: dict[tuple, list[TripletRecord]] = {}
        for t in chunk:
            groups.setdefault(t.shape, []).append(t)
        preds = {}
        for shape, ts in groups.items():
            out = interpolate_midpoint(np.stack([t.frame0 for t in ts]), np.stack([t.frame1 for t in ts]),
                                       model, levels)
            for t, p in zip(ts, out):
                preds[id(t)] = p
        for t in chunk:
            p = preds[id(t)]
            s = ssim(p, t.frame_t) if min(t.shape[:2]) >= SSIM_WINDOW else None
            report.rows.append(EvalRow(t.source_id, psnr(p, t.frame_t), s, t.motion_px))
    return report


def frame_average_report(triplets: Sequence[TripletRecord]) -> EvalReport:
    """Baseline: predict the middle frame as the mean of the outer frames."""
    report = EvalReport()
    for t in triplets:
        p = 0.5 * (t.frame0 + t.frame1)
        s = ssim(p, t.frame_t) if min(t.shape[:2]) >= SSIM_WINDOW else None
        report.rows.append(EvalRow(t.source_id, psnr(p, t.frame_t), s, t.motion_px))
    return report


# ---------------------------------------------------------------------------
# motion histograms
# ---------------------------------------------------------------------------

@dataclass
class MotionHistogram:
    edges: list[float]
    counts: list[int]

    def rows(self) -> list[tuple[float, float, int]]:
        return [(self.edges[i], self.edges[i + 1], c) for i, c in enumerate(self.counts)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_start_px", "bin_end_px", "count"])
            for lo, hi, c in self.rows():
                writer.writerow([f"{lo:g}", f"{hi:g}", c])


def motion_histogram(motions: Sequence[Optional[float]], bin_width: float = 10.0) -> MotionHistogram:
    """Count per-triplet motion magnitudes into ``[k*w, (k+1)*w)`` bins starting at 0.

    Accepts magnitudes or objects with a ``motion_px`` attribute.
    """
    if bin_width <= 0:
        raise ValueError("bin width must be positive")
    values = []
    for m in motions:
        v = getattr(m, "motion_px", m)
        if v is None:
            raise ValueError("triplet without a motion magnitude")
        values.append(float(v))
    if not values:
        return MotionHistogram([], [])
    nbins = int(math.floor(max(values) / bin_width)) + 1
    counts = [0] * nbins
    for v in values:
        counts[int(math.floor(v / bin_width))] += 1
    return MotionHistogram([i * bin_width for i in range(nbins + 1)], counts)


def write_histogram(hist: MotionHistogram, out_dir, stem: str = "motion_histogram",
                    title: str = "Motion magnitude") -> list[Path]:
    """CSV always; a bar plot only when the histogram is non-empty."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [out_dir / f"{stem}.csv"]
    hist.write_csv(written[0])
    if hist.counts:
        from film.plotting import plot_histogram

        written.append(plot_histogram(hist, out_dir / f"{stem}.png", title=title))
    return written
