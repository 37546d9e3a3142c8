"""The full interpolation network and inference helpers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from film import ops
from film.autodiff import Tensor, no_grad
from film.features import PyramidConfig, check_divisible, feature_pyramid
from film.flow import estimate_flow_pyramid, warp_pyramids_to_t
from film.params import ParameterStore


def decoder_width(level: int, config: PyramidConfig) -> int:
    return min(config.feature_channels(level), 4 * config.base_width)


def fused_channels(level: int, config: PyramidConfig) -> int:
    return 2 * (config.feature_channels(level) + 3) + 4


def decoder_group(level: int, config: PyramidConfig) -> str:
    if config.share_weights and level >= config.max_depth:
        return "decoder/shared"
    return f"decoder/l{level}"


def fuse_inputs(warped0, warped1, flows_to0, flows_to1) -> list[Tensor]:
    """Per-level decoder input: warped features of both frames plus both flows."""
    return [
        ops.concat_channels([warped1[l], warped0[l], flows_to0[l], flows_to1[l]])
        for l in range(len(warped0))
    ]


def fuse_decode(fused: list[Tensor], config: PyramidConfig, params: ParameterStore) -> Tensor:
    """Decode the fused pyramid (finest level first) into an RGB image.

    Decoding runs coarse to fine. The coarsest level starts from an all-zero
    state so that every level at or beyond ``max_depth`` has the same input
    layout and can share weights. The output is not clamped.
    """
    levels = len(fused)
    state: Optional[Tensor] = None
    for l in range(levels, 0, -1):
        x = fused[l - 1]
        if x.shape[-1] != fused_channels(l, config):
            raise ValueError(f"level {l}: fused input has {x.shape[-1]} channels, "
                             f"expected {fused_channels(l, config)}")
        width = decoder_width(l, config)
        state_width = decoder_width(l + 1, config)
        if state is None:
            b, h, w, _ = x.shape
            state = Tensor(np.zeros((b, h, w, state_width), dtype=x.dtype))
        else:
            state = ops.bilinear_upsample_2x(state)
        x = ops.concat_channels([state, x])
        group = decoder_group(l, config)
        cin = x.shape[-1]
        for k in range(2):
            name = f"decoder/l{l}/conv{k}"
            w = params.get(name + "/w", (3, 3, cin, width), f"{group}/conv{k}/w")
            b = params.get(name + "/b", (width,), f"{group}/conv{k}/b", init="zeros")
            x = ops.leaky_relu(ops.conv2d(x, w, b))
            cin = width
        state = x
    w = params.get("decoder/out/w", (1, 1, cin, 3), "decoder/out/w")
    b = params.get("decoder/out/b", (3,), "decoder/out/b", init="zeros")
    return ops.conv2d(state, w, b)


@dataclass
class ForwardResult:
    image: Tensor
    flows_to0: list[Tensor]
    flows_to1: list[Tensor]


class FilmModel:
    """Feature extractor, flow estimator and fusion decoder over one parameter store."""

    def __init__(self, config: PyramidConfig, params: Optional[ParameterStore] = None,
                 seed: int = 0, dtype=np.float32):
        self.config = config
        self.params = params if params is not None else ParameterStore(seed, dtype)
        if params is None:
            self.build()

    def build(self) -> None:
        """Create every parameter by tracing a tiny dummy input."""
        d = self.config.divisor
        x = Tensor(np.zeros((1, d, d, 3), dtype=self.params.dtype))
        with no_grad():
            self.forward(x, x)

    def forward(self, I0: Tensor, I1: Tensor, levels: Optional[int] = None) -> ForwardResult:
        """Differentiable forward pass; ``levels`` may deepen the pyramid.

        Extra levels reuse the shared weights, so they are only available
        for weight-sharing models.
        """
        if I0.shape != I1.shape:
            raise ValueError(f"input shapes differ: {I0.shape} vs {I1.shape}")
        if I0.shape[-1] != 3:
            raise ValueError("inputs must have 3 channels")
        config = self.config if levels is None else self.config.with_levels(levels)
        check_divisible(I0, config)
        pyr0, F0 = feature_pyramid(I0, config, self.params)
        pyr1, F1 = feature_pyramid(I1, config, self.params)
        to0, to1 = estimate_flow_pyramid(F0, F1, config, self.params)
        warped0, warped1 = warp_pyramids_to_t(F0, F1, pyr0, pyr1, to0, to1)
        image = fuse_decode(fuse_inputs(warped0, warped1, to0, to1), config, self.params)
        return ForwardResult(image, to0, to1)

    def __call__(self, I0: Tensor, I1: Tensor, levels: Optional[int] = None) -> Tensor:
        return self.forward(I0, I1, levels).image

    def parameter_count(self) -> int:
        return self.params.size()


def _as_batch(image) -> tuple[np.ndarray, bool]:
    arr = np.asarray(image.data if isinstance(image, Tensor) else image)
    if arr.ndim == 3:
        return arr[None], True
    return arr, False


def interpolate_midpoint(I0, I1, model: FilmModel, levels: Optional[int] = None) -> np.ndarray:
    """Synthesize the frame halfway between ``I0`` and ``I1``.

    Accepts ``(H, W, 3)`` or ``(B, H, W, 3)`` arrays with values in [0, 1];
    returns the same layout, clamped to [0, 1].
    """
    a, squeeze = _as_batch(I0)
    b, _ = _as_batch(I1)
    if a.shape != b.shape:
        raise ValueError(f"input shapes differ: {a.shape} vs {b.shape}")
    dtype = model.params.dtype
    frozen = model.params.frozen
    model.params.frozen = True
    try:
        with no_grad():
            out = model(Tensor(a.astype(dtype)), Tensor(b.astype(dtype)), levels)
    finally:
        model.params.frozen = frozen
    ops.check_finite(out, "interpolate_midpoint")
    img = np.clip(out.data, 0, 1)
    return img[0] if squeeze else img


def interpolate_recursive(I0, I1, model: FilmModel, depth: int,
                          levels: Optional[int] = None) -> list[np.ndarray]:
    """Return ``2**depth - 1`` in-between frames in temporal order.

    Each recursion level first synthesizes the midpoint of its interval and
    then recurses into the two halves.
    """
    if depth < 1:
        raise ValueError(f"recursion depth must be >= 1, got {depth}")
    mid = interpolate_midpoint(I0, I1, model, levels)
    if depth == 1:
        return [mid]
    left = interpolate_recursive(I0, mid, model, depth - 1, levels)
    right = interpolate_recursive(mid, I1, model, depth - 1, levels)
    return left + [mid] + right
