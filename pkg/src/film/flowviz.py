"""Colour-coded flow images and raw flow dumps."""

from __future__ import annotations

from pathlib import Path

import numpy as np

FLOW_MAGIC = b"FLOW"


def _color_wheel() -> np.ndarray:
    """Hue wheel with segment lengths RY, YG, GC, CB, BM, MR = 15, 6, 4, 11, 13, 6."""
    segments = [(15, (1, 0, 0), (1, 1, 0)), (6, (1, 1, 0), (0, 1, 0)), (4, (0, 1, 0), (0, 1, 1)),
                (11, (0, 1, 1), (0, 0, 1)), (13, (0, 0, 1), (1, 0, 1)), (6, (1, 0, 1), (1, 0, 0))]
    rows = []
    for n, a, b in segments:
        t = np.arange(n)[:, None] / n
        rows.append((1 - t) * np.array(a) + t * np.array(b))
    return np.concatenate(rows)


def flow_to_color(flow: np.ndarray, max_magnitude: float | None = None) -> np.ndarray:
    """Map an ``(H, W, 2)`` flow to RGB in [0, 1]: hue is direction, saturation magnitude."""
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[-1] != 2:
        raise ValueError(f"expected (H, W, 2) flow, got {flow.shape}")
    u, v = flow[..., 0], flow[..., 1]
    mag = np.hypot(u, v)
    scale = max_magnitude if max_magnitude else max(float(mag.max()), 1e-9)
    rad = np.clip(mag / scale, 0, 1)
    wheel = _color_wheel()
    ncols = len(wheel)
    ang = np.arctan2(-v, -u) / np.pi  # in [-1, 1]
    fk = (ang + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = (fk - k0)[..., None]
    col = (1 - f) * wheel[k0] + f * wheel[k1]
    return (1 - rad[..., None] * (1 - col)).astype(np.float32)


def write_flow(path, flow: np.ndarray) -> None:
    """Raw dump: ``FLOW`` magic, int32 width and height, then planar float32 little-endian u and v."""
    flow = np.asarray(flow, dtype="<f4")
    h, w, _ = flow.shape
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(np.asarray([w, h], dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(flow.transpose(2, 0, 1)).tobytes())


def read_flow(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != FLOW_MAGIC:
        raise ValueError(f"{path}: not a flow dump")
    w, h = np.frombuffer(blob[4:12], dtype="<i4")
    data = np.frombuffer(blob[12:], dtype="<f4")
    if data.size != 2 * w * h:
        raise ValueError(f"{path}: truncated flow dump")
    return data.reshape(2, h, w).transpose(1, 2, 0).copy()
