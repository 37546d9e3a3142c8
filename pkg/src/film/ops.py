"""Differentiable operations on NHWC tensors.

Only the operations the interpolation network needs are provided. Binary
elementwise operations require identical shapes; there is no broadcasting.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from film.autodiff import Tensor, make_node, note_branch

LEAKY_SLOPE = 0.2


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {where}")
    return arr


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "add")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "sub")
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scalar_mul(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    s = a.dtype.type(s)
    return make_node(a.data * s, (a,), lambda g: (g * s,))


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    a = _as_tensor(a)
    slope = a.dtype.type(slope)
    positive = a.data > 0
    note_branch(positive)
    scale = np.where(positive, a.dtype.type(1), slope)
    return make_node(a.data * scale, (a,), lambda g: (g * scale,))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    sign = np.sign(a.data)  # subgradient 0 at exactly 0
    note_branch(sign)
    return make_node(np.abs(a.data), (a,), lambda g: (g * sign,))


def square(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return make_node(ad * ad, (a,), lambda g: (g * 2 * ad,))


def sqrt(a: Tensor) -> Tensor:
    """Square root; the gradient at exactly 0 is taken as 0."""
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise ValueError("sqrt of negative value")
    out = np.sqrt(a.data)
    note_branch(out > 0)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / np.where(out > 0, out, 1), 0)
        return (g * d.astype(out.dtype),)

    return make_node(out, (a,), bw)


def sum(a: Tensor) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    shape, dtype = a.shape, a.dtype
    return make_node(np.sum(a.data, dtype=dtype), (a,), lambda g: (np.full(shape, g, dtype=dtype),))


def mean(a: Tensor) -> Tensor:
    """Mean over every element."""
    a = _as_tensor(a)
    n = a.size
    shape, dtype = a.shape, a.dtype
    out = np.sum(a.data, dtype=dtype) / dtype.type(n)
    return make_node(np.asarray(out, dtype=dtype), (a,), lambda g: (np.full(shape, g / n, dtype=dtype),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def stack_scalars(xs: Sequence[Tensor]) -> Tensor:
    """Stack rank-0 tensors into a vector."""
    xs = [_as_tensor(x) for x in xs]
    data = np.stack([x.data.reshape(()) for x in xs])
    return make_node(data, xs, lambda g: tuple(g[i] for i in range(len(xs))))


def weighted_sum(xs: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """``sum_i w_i * x_i`` for same-shape tensors."""
    if len(xs) != len(weights) or not xs:
        raise ValueError("weighted_sum needs matching non-empty lists")
    xs = [_as_tensor(x) for x in xs]
    for x in xs[1:]:
        _check_same_shape(xs[0], x, "weighted_sum")
    dtype = xs[0].dtype
    ws = [dtype.type(w) for w in weights]
    out = xs[0].data * ws[0]
    for x, w in zip(xs[1:], ws[1:]):
        out = out + x.data * w
    return make_node(out, xs, lambda g: tuple(g * w for w in ws))


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------

def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis, preserving input order."""
    xs = [_as_tensor(x) for x in xs]
    if not xs:
        raise ValueError("concat_channels needs at least one tensor")
    if len(xs) == 1:
        return xs[0]
    lead = xs[0].shape[:-1]
    for x in xs[1:]:
        if x.shape[:-1] != lead:
            raise ValueError(f"concat_channels: spatial mismatch {x.shape} vs {xs[0].shape}")
    bounds = np.cumsum([0] + [x.shape[-1] for x in xs])
    data = np.concatenate([x.data for x in xs], axis=-1)

    def bw(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return make_node(data, xs, bw)


def pad_edge(x: Tensor, pad: int) -> Tensor:
    """Replicate border pixels ``pad`` times on each spatial side."""
    x = _as_tensor(x)
    if pad == 0:
        return x
    data = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="edge")

    def bw(g):
        g = g.copy()
        g[:, pad, :, :] += g[:, :pad, :, :].sum(axis=1)
        g[:, -pad - 1, :, :] += g[:, -pad:, :, :].sum(axis=1)
        g = g[:, pad:-pad]
        g[:, :, pad, :] += g[:, :, :pad, :].sum(axis=2)
        g[:, :, -pad - 1, :] += g[:, :, -pad:, :].sum(axis=2)
        return (np.ascontiguousarray(g[:, :, pad:-pad]),)

    return make_node(data, (x,), bw)


# ---------------------------------------------------------------------------
# convolution and resampling
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix with columns ordered (kernel row, kernel col, channel)."""
    c = xp.shape[-1]
    v = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    return np.ascontiguousarray(v.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, kh * kw * c)


def _col2im(gcols: np.ndarray, shape, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, _, _, c = shape
    gx = np.zeros(shape, dtype=gcols.dtype)
    gcols = gcols.reshape(b, ho, wo, kh * kw, c)
    for i in range(kh):
        for j in range(kw):
            gx[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i * kw + j, :]
    return gx


def _conv_input_grad(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Gradient of a stride-1 valid correlation w.r.t. its (padded) input.

    Computed as a full correlation of the output gradient with the flipped,
    in/out-transposed kernel.
    """
    kh, kw, cin, cout = w.shape
    b, ho, wo, _ = g.shape
    gp = np.pad(g, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
    wf = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2)).reshape(kh * kw * cout, cin)
    hi, wi = ho + kh - 1, wo + kw - 1
    return (_im2col(gp, kh, kw, 1, hi, wi) @ wf).reshape(b, hi, wi, cin)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """2-D cross-correlation with weights shaped ``(kh, kw, c_in, c_out)``.

    ``same`` padding replicates edge pixels so that stride 1 preserves the
    spatial extents; ``valid`` does not pad.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError("conv2d expects rank-4 input and weights")
    kh, kw, cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise ValueError(f"conv2d: input has {x.shape[-1]} channels, weights expect {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {cout} outputs")
    if padding == "same":
        if kh != kw or kh % 2 == 0:
            raise ValueError("same padding needs a square odd kernel")
        x = pad_edge(x, kh // 2)
    elif padding != "valid":
        raise ValueError(f"unknown padding {padding!r}")

    b, hp, wp, _ = x.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("conv2d: kernel larger than input")
    xdata, wdata = x.data, weight.data
    if kh == 1 and kw == 1 and stride == 1:
        cols = xdata.reshape(-1, cin)
    else:
        cols = _im2col(xdata, kh, kw, stride, ho, wo)
    w2 = wdata.reshape(kh * kw * cin, cout)
    out = cols @ w2
    if bias is not None:
        out += bias.data
    out = out.reshape(b, ho, wo, cout)

    parents = (x, weight) if bias is None else (x, weight, bias)
    xshape = x.shape

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(wdata.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            if kh == 1 and kw == 1 and stride == 1:
                gx = (g2 @ w2.T).reshape(xshape)
            elif stride == 1 and cout <= cin:
                gx = _conv_input_grad(g, wdata)
            else:
                gx = _col2im(g2 @ w2.T, xshape, kh, kw, stride, ho, wo)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_node(out, parents, bw)


def avg_pool_2x2(x: Tensor) -> Tensor:
    """Mean over non-overlapping 2x2 blocks."""
    x = _as_tensor(x)
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool_2x2 needs even spatial extents, got {h}x{w}")
    d = x.data.reshape(b, h // 2, 2, w // 2, 2, c)
    out = (d[:, :, 0, :, 0] + d[:, :, 0, :, 1] + d[:, :, 1, :, 0] + d[:, :, 1, :, 1]) * x.dtype.type(0.25)

    def bw(g):
        q = g * g.dtype.type(0.25)
        return (np.repeat(np.repeat(q, 2, axis=1), 2, axis=2),)

    return make_node(out, (x,), bw)


def _up_axis(a: np.ndarray, axis: int) -> np.ndarray:
    n = a.shape[axis]
    prev = np.take(a, np.r_[0, np.arange(n - 1)], axis=axis)
    nxt = np.take(a, np.r_[np.arange(1, n), n - 1], axis=axis)
    t = a.dtype.type
    even = t(0.75) * a + t(0.25) * prev
    odd = t(0.75) * a + t(0.25) * nxt
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(a.shape)
    shape[axis] = 2 * n
    return out.reshape(shape)


def _up_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    shape = list(g.shape)
    n = shape[axis] // 2
    shape[axis:axis + 1] = [n, 2]
    g = g.reshape(shape)
    ge = np.take(g, 0, axis=axis + 1)
    go = np.take(g, 1, axis=axis + 1)
    t = g.dtype.type
    gx = t(0.75) * (ge + go)
    q_e = t(0.25) * ge
    q_o = t(0.25) * go
    gx = np.moveaxis(gx, axis, 0).copy()
    q_e = np.moveaxis(q_e, axis, 0)
    q_o = np.moveaxis(q_o, axis, 0)
    # even output k reads x[max(k-1, 0)], odd output k reads x[min(k+1, n-1)]
    gx[:-1] += q_e[1:]
    gx[0] += q_e[0]
    gx[1:] += q_o[:-1]
    gx[-1] += q_o[-1]
    return np.moveaxis(gx, 0, axis)


def bilinear_upsample_2x(x: Tensor) -> Tensor:
    """Double height and width with half-pixel-centred bilinear weights.

    Output pixel ``j`` samples source coordinate ``j / 2 - 0.25``; samples
    beyond the border clamp to the edge pixel.
    """
    x = _as_tensor(x)
    out = _up_axis(_up_axis(x.data, 1), 2)

    def bw(g):
        return (np.ascontiguousarray(_up_axis_adjoint(_up_axis_adjoint(g, 2), 1)),)

    return make_node(out, (x,), bw)


def clamp01(x: Tensor) -> Tensor:
    """Clip to [0, 1]; gradient is passed only where no clipping happened."""
    x = _as_tensor(x)
    inside = (x.data >= 0) & (x.data <= 1)
    note_branch(x.data < 0, x.data > 1)
    return make_node(np.clip(x.data, 0, 1), (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# feature statistics
# ---------------------------------------------------------------------------

def gram_matrix(features: Tensor) -> Tensor:
    """Per-sample ``F^T F / (H * W)`` for features flattened to ``(H*W, C)``.

    Returns a ``(batch, C, C)`` tensor.
    """
    features = _as_tensor(features)
    b, h, w, c = features.shape
    n = h * w
    if n == 0 or c == 0:
        raise ValueError("gram_matrix of an empty feature map")
    f = features.data.reshape(b, n, c)
    scale = features.dtype.type(1.0 / n)
    out = np.matmul(f.transpose(0, 2, 1), f) * scale

    def bw(g):
        sym = g + g.transpose(0, 2, 1)
        return ((np.matmul(f, sym) * scale).reshape(b, h, w, c),)

    return make_node(out, (features,), bw)


def frobenius_norm_per_sample(x: Tensor) -> Tensor:
    """sqrt of the sum of squares over every axis but the first.

    The gradient at a zero-norm sample is taken as 0.
    """
    x = _as_tensor(x)
    b = x.shape[0]
    flat = x.data.reshape(b, -1)
    norms = np.sqrt(np.sum(flat * flat, axis=1))
    note_branch(norms > 0)

    def bw(g):
        safe = np.where(norms > 0, norms, 1)
        d = np.where(norms > 0, g / safe, 0).astype(x.dtype)
        return ((flat * d[:, None]).reshape(x.shape),)

    return make_node(norms, (x,), bw)


def check_finite(x: Tensor, where: str) -> Tensor:
    _check_finite(x.data, where)
    return x
