"""Differentiable backward warping.

A flow field has two channels ``(u, v)`` in pixels at its own resolution.
Warping samples the source at ``(x + u, y + v)`` with bilinear weights;
coordinates outside the image are clamped to the border.
"""

from __future__ import annotations

import numpy as np

from film.autodiff import Tensor, make_node, note_branch


def _sample_setup(flow: np.ndarray, h: int, w: int):
    b = flow.shape[0]
    dt = flow.dtype
    ys = np.arange(h, dtype=dt)[None, :, None]
    xs = np.arange(w, dtype=dt)[None, None, :]
    px_raw = xs + flow[..., 0]
    py_raw = ys + flow[..., 1]
    px = np.clip(px_raw, 0, w - 1)
    py = np.clip(py_raw, 0, h - 1)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (px - x0).astype(dt)
    wy = (py - y0).astype(dt)
    base = (np.arange(b) * h * w)[:, None, None]
    idx = (base + y0 * w + x0, base + y0 * w + x1, base + y1 * w + x0, base + y1 * w + x1)
    inside_x = (px_raw >= 0) & (px_raw <= w - 1)
    inside_y = (py_raw >= 0) & (py_raw <= h - 1)
    return idx, wx, wy, inside_x, inside_y


def sample_bilinear(source: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Forward-only warp on raw arrays (used by data augmentation)."""
    b, h, w, c = source.shape
    (i00, i01, i10, i11), wx, wy, _, _ = _sample_setup(flow, h, w)
    flat = source.reshape(b * h * w, c)
    wx = wx[..., None]
    wy = wy[..., None]
    one = source.dtype.type(1)
    top = flat[i00] * (one - wx) + flat[i01] * wx
    bot = flat[i10] * (one - wx) + flat[i11] * wx
    return top * (one - wy) + bot * wy


def backward_warp(source: Tensor, flow: Tensor) -> Tensor:
    """Warp ``source`` by ``flow``; differentiable in both arguments.

    Zero flow returns the source unchanged, bit for bit.
    """
    if flow.data.ndim != 4 or flow.shape[-1] != 2:
        raise ValueError(f"flow must have 2 channels, got shape {flow.shape}")
    if source.shape[:3] != flow.shape[:3]:
        raise ValueError(f"source {source.shape} and flow {flow.shape} extents differ")
    b, h, w, c = source.shape
    src = source.data
    fl = flow.data.astype(src.dtype, copy=False)
    if not np.all(np.isfinite(fl)):
        raise FloatingPointError("non-finite flow passed to backward_warp")
    (i00, i01, i10, i11), wx, wy, inside_x, inside_y = _sample_setup(fl, h, w)
    note_branch(i00, inside_x, inside_y)
    flat = src.reshape(b * h * w, c)
    v00, v01, v10, v11 = flat[i00], flat[i01], flat[i10], flat[i11]
    one = src.dtype.type(1)
    wxe = wx[..., None]
    wye = wy[..., None]
    top = v00 * (one - wxe) + v01 * wxe
    bot = v10 * (one - wxe) + v11 * wxe
    out = top * (one - wye) + bot * wye

    def bw(g):
        gsrc = None
        if source.requires_grad:
            a = g * (one - wye)
            d = g * wye
            vals = np.stack([a * (one - wxe), a * wxe, d * (one - wxe), d * wxe])
            chan = np.arange(c)
            lin = (np.stack([i00, i01, i10, i11])[..., None] * c + chan).reshape(-1)
            gflat = np.bincount(lin, weights=vals.reshape(-1), minlength=b * h * w * c)
            gsrc = gflat.reshape(src.shape).astype(src.dtype)
        gflow = None
        if flow.requires_grad:
            dx = (v01 - v00) * (one - wye) + (v11 - v10) * wye
            dy = bot - top
            gu = np.sum(g * dx, axis=-1) * inside_x
            gv = np.sum(g * dy, axis=-1) * inside_y
            gflow = np.stack([gu, gv], axis=-1).astype(flow.dtype)
        return gsrc, gflow

    return make_node(out, (source, flow), bw)
