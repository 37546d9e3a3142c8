"""Triplet datasets: synthetic generation, motion estimation and bracket mining."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".bmp", ".tif", ".tiff", ".ppm", ".jpg", ".jpeg")


@dataclass
class TripletRecord:
    frame0: np.ndarray
    frame_t: np.ndarray
    frame1: np.ndarray
    motion_px: Optional[float] = None
    source_id: str = ""

    def __post_init__(self):
        if not (self.frame0.shape == self.frame_t.shape == self.frame1.shape):
            raise ValueError(
                f"{self.source_id or 'triplet'}: frame shapes differ "
                f"{self.frame0.shape}, {self.frame_t.shape}, {self.frame1.shape}"
            )
        if self.motion_px is not None and self.motion_px < 0:
            raise ValueError("motion_px must be non-negative")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.frame0.shape

    def reversed(self) -> "TripletRecord":
        return TripletRecord(self.frame1, self.frame_t, self.frame0, self.motion_px, self.source_id)


# ---------------------------------------------------------------------------
# image I/O
# ---------------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    """Read an 8-bit image as float32 RGB in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def _to_uint8(image: np.ndarray) -> np.ndarray:
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.round(arr * 255.0).astype(np.uint8)


def write_image(path, image: np.ndarray) -> None:
    Image.fromarray(_to_uint8(image), mode="RGB").save(path)


def quantize(image: np.ndarray) -> np.ndarray:
    """Round-trip through 8 bits, as writing and re-reading an image would."""
    return _to_uint8(image).astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# synthetic triplets
# ---------------------------------------------------------------------------

def _texture(shape: tuple[int, int], rng: np.random.Generator, sigma: float, lo: float, hi: float) -> np.ndarray:
    noise = rng.standard_normal((*shape, 3))
    smooth = ndimage.gaussian_filter(noise, sigma=(sigma, sigma, 0), mode="wrap")
    smooth -= smooth.min(axis=(0, 1))
    smooth /= np.maximum(smooth.max(axis=(0, 1)), 1e-12)
    return lo + (hi - lo) * smooth


def make_sprite(size: int, rng: np.random.Generator) -> np.ndarray:
    """RGBA sprite: a textured disc with an anti-aliased rim, one pixel of clear margin."""
    rgb = _texture((size, size), rng, sigma=1.2, lo=0.05, hi=0.95)
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    r = np.hypot(yy - c, xx - c)
    alpha = np.clip(c - 0.5 - r, 0.0, 1.0)
    return np.concatenate([rgb, alpha[..., None]], axis=-1)


def render_sprite(background: np.ndarray, sprite: np.ndarray, offset: Sequence[float]) -> np.ndarray:
    """Composite ``sprite`` with its top-left corner at sub-pixel ``offset`` = (x, y).

    The sprite is bilinearly resampled; outside its footprint alpha is zero.
    """
    h, w, _ = background.shape
    ox, oy = float(offset[0]), float(offset[1])
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = [yy - oy, xx - ox]
    layers = [ndimage.map_coordinates(sprite[..., k], coords, order=1, mode="constant", cval=0.0)
              for k in range(4)]
    alpha = layers[3][..., None]
    rgb = np.stack(layers[:3], axis=-1)
    return (alpha * rgb + (1.0 - alpha) * background).astype(np.float32)


def generate_synthetic_triplets(
    count: int,
    size: int | tuple[int, int] = 64,
    disparity: tuple[float, float] = (0.0, 8.0),
    rng: np.random.Generator | int = 0,
    sprite_size: Optional[int] = None,
    direction: Optional[float] = None,
) -> list[TripletRecord]:
    """Textured sprites translating over static textured backgrounds.

    Each triplet moves its sprite by a displacement of magnitude drawn
    uniformly from ``disparity`` between frame 0 and frame 1; the middle
    frame shows the sprite exactly half way. ``direction`` (radians) fixes
    the motion angle; otherwise it is uniform.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    h, w = (size, size) if isinstance(size, int) else size
    lo, hi = disparity
    if lo < 0 or hi < lo:
        raise ValueError(f"bad disparity range {disparity}")
    if hi > min(h, w) / 2:
        raise ValueError(f"disparity {hi} px too large for {h}x{w} images")
    s = sprite_size or max(8, min(h, w) // 3)
    records = []
    for i in range(count):
        background = _texture((h, w), rng, sigma=2.0, lo=0.1, hi=0.9)
        sprite = make_sprite(s, rng)
        mag = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
        angle = float(rng.uniform(0, 2 * np.pi)) if direction is None else float(direction)
        dx, dy = mag * math.cos(angle), mag * math.sin(angle)
        # keep the sprite inside the frame at both ends of its path
        margin_x, margin_y = abs(dx) / 2 + 1, abs(dy) / 2 + 1
        cx = rng.uniform(margin_x, max(margin_x, w - s - margin_x))
        cy = rng.uniform(margin_y, max(margin_y, h - s - margin_y))
        f0 = render_sprite(background, sprite, (cx - dx / 2, cy - dy / 2))
        ft = render_sprite(background, sprite, (cx, cy))
        f1 = render_sprite(background, sprite, (cx + dx / 2, cy + dy / 2))
        records.append(TripletRecord(f0, ft, f1, motion_px=float(math.hypot(dx, dy)), source_id=f"synth_{i:05d}"))
    return records


def generate_translation_triplets(
    count: int,
    size: int | tuple[int, int] = 64,
    disparity: tuple[float, float] = (0.0, 8.0),
    rng: np.random.Generator | int = 0,
    direction: Optional[float] = None,
) -> list[TripletRecord]:
    """Whole-frame translations of a textured scene (a camera pan).

    Frames 0, t and 1 are bilinear samples of one texture at offsets
    ``-d/2``, ``0`` and ``+d/2``, so every pixel moves by ``d`` between the
    outer frames and content enters at the borders.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    h, w = (size, size) if isinstance(size, int) else size
    lo, hi = disparity
    if lo < 0 or hi < lo:
        raise ValueError(f"bad disparity range {disparity}")
    if hi > min(h, w) / 2:
        raise ValueError(f"disparity {hi} px too large for {h}x{w} images")
    pad = int(math.ceil(hi / 2)) + 2
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    records = []
    for i in range(count):
        scene = _texture((h + 2 * pad, w + 2 * pad), rng, sigma=2.0, lo=0.1, hi=0.9)
        mag = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
        angle = float(rng.uniform(0, 2 * np.pi)) if direction is None else float(direction)
        dx, dy = mag * math.cos(angle), mag * math.sin(angle)
        frames = []
        for k in (-0.5, 0.0, 0.5):
            # frame k shows scene point p at p + k * d
            coords = [yy + pad - k * dy, xx + pad - k * dx]
            frames.append(np.stack([ndimage.map_coordinates(scene[..., c], coords, order=1)
                                    for c in range(3)], axis=-1).astype(np.float32))
        records.append(TripletRecord(*frames, motion_px=mag, source_id=f"pan_{i:05d}"))
    return records


def textured_image(shape: tuple[int, int], rng: np.random.Generator | int = 0, sigma: float = 1.5) -> np.ndarray:
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    return _texture(shape, rng, sigma=sigma, lo=0.0, hi=1.0).astype(np.float32)


def pan_sequence(n_frames: int, size: tuple[int, int], step: tuple[int, int],
                 rng: np.random.Generator | int = 0) -> list[np.ndarray]:
    """Frames of a camera panning across one texture by ``step`` = (dx, dy) px per frame.

    Content at pixel ``p`` of frame ``k`` appears at ``p - k * step`` in
    frame ``k + 1`` of the window, i.e. the scene moves by ``-step``.
    """
    h, w = size
    dx, dy = step
    big = textured_image((h + abs(dy) * n_frames + 1, w + abs(dx) * n_frames + 1), rng)
    x0 = 0 if dx >= 0 else abs(dx) * n_frames
    y0 = 0 if dy >= 0 else abs(dy) * n_frames
    return [big[y0 + k * dy:y0 + k * dy + h, x0 + k * dx:x0 + k * dx + w].copy() for k in range(n_frames)]


# ---------------------------------------------------------------------------
# motion estimation
# ---------------------------------------------------------------------------

class MotionEstimate(NamedTuple):
    pixels: float
    low_confidence: bool


def _gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image[..., :3] @ np.array([0.299, 0.587, 0.114])


def estimate_motion_magnitude(
    I0: np.ndarray,
    I1: np.ndarray,
    radius: int = 16,
    block: int = 8,
    percentile: float = 95.0,
    min_block_std: float = 0.01,
    match_tolerance: float = 0.5,
) -> MotionEstimate:
    """Robust maximum motion between two frames by exhaustive block matching.

    Frame 0 is tiled into ``block``-sized blocks; each textured block is
    matched against every integer displacement within ``radius`` in frame 1
    by sum of absolute differences, normalised by the number of pixels that
    land inside frame 1 (at least half the block must). Ties go to the
    smallest displacement.

    Blocks whose whole search window lies inside the frame are preferred,
    since content near the border may have left it. Blocks whose best match
    still differs by more than ``match_tolerance`` times their own mean
    absolute deviation straddle a motion boundary and are dropped too. The
    result is the given percentile of the remaining per-block displacement
    magnitudes. With no textured block the estimate is 0 and flagged.
    """
    g0, g1 = _gray(I0), _gray(I1)
    if g0.shape != g1.shape:
        raise ValueError(f"frame shapes differ: {g0.shape} vs {g1.shape}")
    if not 0 <= radius <= 127:
        raise ValueError(f"search radius must be in [0, 127], got {radius}")
    h, w = g0.shape
    if radius >= min(h, w) or block > min(h, w):
        raise ValueError(f"search radius {radius} / block {block} exceed {h}x{w} frame")
    nby, nbx = h // block, w // block
    hh, ww = nby * block, nbx * block
    blocks0 = g0[:hh, :ww].reshape(nby, block, nbx, block)
    textured = blocks0.std(axis=(1, 3)) >= min_block_std
    if not textured.any():
        return MotionEstimate(0.0, True)
    # blocks whose whole search window stays inside the frame always contain
    # their true match; prefer them when the frame is large enough
    ys = np.arange(nby)[:, None] * block
    xs = np.arange(nbx)[None, :] * block
    interior = (ys >= radius) & (ys + block + radius <= h) & (xs >= radius) & (xs + block + radius <= w)
    if (textured & interior).any():
        textured &= interior

    padded = np.pad(g1, radius, mode="constant", constant_values=np.nan)
    disps = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    disps.sort(key=lambda d: (d[0] ** 2 + d[1] ** 2, d))
    best = np.full((nby, nbx), np.inf)
    best_mag = np.zeros((nby, nbx))
    min_overlap = block * block / 2
    for dy, dx in disps:
        shifted = padded[radius + dy:radius + dy + hh, radius + dx:radius + dx + ww]
        diff = np.abs(g0[:hh, :ww] - shifted)
        inside = ~np.isnan(diff)
        sad = np.where(inside, diff, 0.0).reshape(nby, block, nbx, block).sum(axis=(1, 3))
        overlap = inside.reshape(nby, block, nbx, block).sum(axis=(1, 3))
        # blocks leaving the frame are scored on the part still inside it
        sad = np.where(overlap >= min_overlap, sad / np.maximum(overlap, 1), np.inf)
        better = sad < best
        best = np.where(better, sad, best)
        best_mag = np.where(better, math.hypot(dy, dx), best_mag)
    # a block that no displacement explains well straddles a motion boundary
    # or an occlusion; drop it unless nothing else is left
    spread = np.abs(blocks0 - blocks0.mean(axis=(1, 3), keepdims=True)).mean(axis=(1, 3))
    reliable = textured & (best <= match_tolerance * spread)
    if reliable.any():
        textured = reliable
    mags = best_mag[textured]
    return MotionEstimate(float(np.percentile(mags, percentile, method="nearest")), False)


# ---------------------------------------------------------------------------
# motion brackets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BracketSpec:
    edges: tuple[float, ...] = (0, 20, 40, 60, 80, 100, 120)
    blends: tuple[tuple[float, float], ...] = ((0, 40), (0, 60), (0, 80), (0, 100), (0, 120))

    def __post_init__(self):
        if len(self.edges) < 2 or any(b <= a for a, b in zip(self.edges, self.edges[1:])):
            raise ValueError("bracket edges must be strictly increasing")
        for lo, hi in self.blends:
            if lo not in self.edges or hi not in self.edges or hi <= lo:
                raise ValueError(f"blend {lo}-{hi} is not a union of whole brackets")

    @property
    def brackets(self) -> list[tuple[float, float]]:
        return list(zip(self.edges, self.edges[1:]))

    def labels(self) -> list[str]:
        return [bracket_label(b) for b in self.brackets]

    def bracket_of(self, motion_px: float) -> Optional[int]:
        """Index of the half-open bracket containing ``motion_px``, or None."""
        for i, (lo, hi) in enumerate(self.brackets):
            if lo <= motion_px < hi:
                return i
        return None

    def blend_members(self, blend: str | tuple[float, float]) -> list[int]:
        lo, hi = parse_range(blend) if isinstance(blend, str) else blend
        if lo not in self.edges or hi not in self.edges:
            raise ValueError(f"blend {lo}-{hi} does not align with bracket edges")
        return [i for i, (a, b) in enumerate(self.brackets) if a >= lo and b <= hi]


def _fmt(x: float) -> str:
    return f"{x:g}"


def bracket_label(bracket: tuple[float, float]) -> str:
    return f"{_fmt(bracket[0])}-{_fmt(bracket[1])}"


def parse_range(text: str) -> tuple[float, float]:
    lo, hi = text.split("-")
    return float(lo), float(hi)


def select_blend(records: Sequence[dict], spec: BracketSpec, blend: str) -> list[dict]:
    """Index rows whose bracket belongs to ``blend`` (e.g. ``"0-80"``)."""
    wanted = {spec.labels()[i] for i in spec.blend_members(blend)}
    return [r for r in records if r["bracket"] in wanted]


# ---------------------------------------------------------------------------
# on-disk datasets
# ---------------------------------------------------------------------------

INDEX_FIELDS = ("path", "motion_px", "bracket")
FRAME_NAMES = ("frame_0.png", "frame_t.png", "frame_1.png")


def write_meta(path, meta: dict) -> None:
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in meta.items()), encoding="utf-8")


def read_meta(path) -> dict[str, str]:
    meta = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    return meta


def write_record(directory, record: TripletRecord, extra: Optional[dict] = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, frame in zip(FRAME_NAMES, (record.frame0, record.frame_t, record.frame1)):
        write_image(directory / name, frame)
    meta = {"source": record.source_id,
            "motion_px": "NA" if record.motion_px is None else repr(float(record.motion_px))}
    meta.update(extra or {})
    write_meta(directory / "meta.txt", meta)


def read_record(directory) -> TripletRecord:
    directory = Path(directory)
    frames = [read_image(directory / n) for n in FRAME_NAMES]
    meta = read_meta(directory / "meta.txt") if (directory / "meta.txt").exists() else {}
    motion = meta.get("motion_px", "NA")
    return TripletRecord(*frames, motion_px=None if motion == "NA" else float(motion),
                         source_id=meta.get("source", directory.name))


def write_index(path, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=INDEX_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in INDEX_FIELDS})


def read_index(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["motion_px"] = None if row["motion_px"] in ("", "NA") else float(row["motion_px"])
    return rows


def write_dataset(directory, records: Sequence[TripletRecord], spec: BracketSpec = BracketSpec()) -> Path:
    """Write records as ``records/<id>/`` directories plus ``index.csv``."""
    directory = Path(directory)
    rows = []
    for rec in records:
        rel = Path("records") / rec.source_id
        b = spec.bracket_of(rec.motion_px) if rec.motion_px is not None else None
        label = spec.labels()[b] if b is not None else ""
        write_record(directory / rel, rec, {"bracket": label or "NA"})
        rows.append({"path": rel.as_posix(), "motion_px": rec.motion_px, "bracket": label})
    write_index(directory / "index.csv", rows)
    return directory / "index.csv"


def load_dataset(directory, blend: Optional[str] = None, spec: BracketSpec = BracketSpec()) -> list[TripletRecord]:
    directory = Path(directory)
    index = directory / "index.csv"
    if not index.exists():
        raise FileNotFoundError(f"dataset index not found: {index}")
    rows = read_index(index)
    if blend:
        rows = select_blend(rows, spec, blend)
    return [read_record(directory / row["path"]) for row in rows]


# ---------------------------------------------------------------------------
# bracket mining
# ---------------------------------------------------------------------------

@dataclass
class MiningResult:
    rows: list[dict] = field(default_factory=list)
    counts: dict[str, int] = field(default_factory=dict)
    out_of_range: int = 0
    low_confidence: int = 0
    unreadable: int = 0


def list_sequences(root) -> dict[str, list[Path]]:
    """Map sequence name to sorted frame paths.

    Each sub-directory of ``root`` holding images is a sequence; images
    directly inside ``root`` form one more sequence named after ``root``.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"frame directory not found: {root}")

    def frames(d: Path) -> list[Path]:
        return sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)

    seqs = {}
    top = frames(root)
    if top:
        seqs[root.name] = top
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        f = frames(d)
        if f:
            seqs[d.name] = f
    return seqs


def mine_brackets(
    sequences: dict[str, Sequence],
    out_dir,
    spec: BracketSpec = BracketSpec(),
    strides: Sequence[int] = (1, 2, 4),
    radius: int = 32,
    block: int = 16,
    skip_low_confidence: bool = True,
) -> MiningResult:
    """Sort candidate triplets ``(i, i+s, i+2s)`` into motion brackets.

    ``sequences`` maps a name to frames given as paths or arrays. Motion is
    estimated between the outer frames. Records land in
    ``out_dir/records/<bracket>/<name>_<i>_s<s>/``; ``index.csv`` and
    ``bracket_counts.csv`` are written once at the end. Triplets whose
    motion falls outside every bracket, or whose frames cannot be read, are
    counted and skipped.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = MiningResult(counts={label: 0 for label in spec.labels()})
    labels = spec.labels()
    for name, frames in sequences.items():
        if len(frames) < 3:
            logger.warning("sequence %s has fewer than 3 frames; skipped", name)
            continue
        cache: dict[int, Optional[np.ndarray]] = {}

        def load(i: int) -> Optional[np.ndarray]:
            if i not in cache:
                item = frames[i]
                if isinstance(item, np.ndarray):
                    cache[i] = item
                else:
                    try:
                        cache[i] = read_image(item)
                    except (OSError, ValueError) as exc:
                        logger.warning("unreadable frame %s: %s", item, exc)
                        cache[i] = None
            return cache[i]

        for s in strides:
            for i in range(0, len(frames) - 2 * s):
                trip = [load(i), load(i + s), load(i + 2 * s)]
                if any(f is None for f in trip):
                    result.unreadable += 1
                    continue
                if not (trip[0].shape == trip[1].shape == trip[2].shape):
                    result.unreadable += 1
                    continue
                est = estimate_motion_magnitude(trip[0], trip[2], radius=radius, block=block)
                if est.low_confidence:
                    result.low_confidence += 1
                    if skip_low_confidence:
                        continue
                b = spec.bracket_of(est.pixels)
                if b is None:
                    result.out_of_range += 1
                    continue
                rid = f"{name}_{i:05d}_s{s}"
                rel = Path("records") / labels[b] / rid
                rec = TripletRecord(*trip, motion_px=est.pixels, source_id=rid)
                write_record(out_dir / rel, rec, {"bracket": labels[b], "stride": s,
                                                  "low_confidence": est.low_confidence})
                result.rows.append({"path": rel.as_posix(), "motion_px": est.pixels, "bracket": labels[b]})
                result.counts[labels[b]] += 1
    write_index(out_dir / "index.csv", result.rows)
    with open(out_dir / "bracket_counts.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bracket", "count"])
        for label in labels:
            writer.writerow([label, result.counts[label]])
    return result
