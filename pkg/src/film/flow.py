"""Coarse-to-fine bidirectional flow from the midpoint to each input."""

from __future__ import annotations

import numpy as np

from film import ops
from film.autodiff import Tensor
from film.features import PyramidConfig
from film.params import ParameterStore
from film.warp import backward_warp


def predictor_group(level: int, config: PyramidConfig) -> str:
    """Storage group of the residual predictor used at 1-based ``level``.

    Levels at or beyond ``max_depth`` see feature maps of identical width and
    share one predictor; shallower levels each get their own.
    """
    if config.share_weights and level >= config.max_depth:
        return "flow/shared"
    return f"flow/l{level}"


def predictor_widths(level: int, config: PyramidConfig) -> list[int]:
    c = config.feature_channels(level)
    return [2 * c, c, max(c // 2, 2), max(c // 4, 2), 2]


def _small_normal(shape, rng):
    # keeps initial residual flows near zero
    return rng.standard_normal(shape) * 1e-3


def residual_flow(f_self: Tensor, f_warped: Tensor, level: int, config: PyramidConfig,
                  params: ParameterStore) -> Tensor:
    x = ops.concat_channels([f_self, f_warped])
    widths = predictor_widths(level, config)
    group = predictor_group(level, config)
    n = len(widths) - 1
    for k in range(n):
        name = f"flow/l{level}/conv{k}"
        last = k == n - 1
        init = _small_normal if last else "he"
        w = params.get(name + "/w", (3, 3, widths[k], widths[k + 1]), f"{group}/conv{k}/w", init=init)
        b = params.get(name + "/b", (widths[k + 1],), f"{group}/conv{k}/b", init="zeros")
        x = ops.conv2d(x, w, b)
        if not last:
            x = ops.leaky_relu(x)
    return x


def upsample_flow(flow: Tensor) -> Tensor:
    """Bilinear 2x upsampling with displacements rescaled to the finer grid."""
    return ops.scalar_mul(ops.bilinear_upsample_2x(flow), 2.0)


def zero_flow(like: Tensor) -> Tensor:
    b, h, w, _ = like.shape
    return Tensor(np.zeros((b, h, w, 2), dtype=like.dtype))


def estimate_direction(f_self: list[Tensor], f_other: list[Tensor], config: PyramidConfig,
                       params: ParameterStore) -> list[Tensor]:
    """Flows from the midpoint towards the image ``f_other`` came from.

    Returns one flow per level, finest first.
    """
    if len(f_self) != len(f_other):
        raise ValueError("feature pyramids have different level counts")
    levels = len(f_self)
    flows: list[Tensor] = [None] * levels  # type: ignore[list-item]
    prior = None
    for l in range(levels, 0, -1):
        fs, fo = f_self[l - 1], f_other[l - 1]
        if fs.shape != fo.shape:
            raise ValueError(f"level {l}: feature shapes {fs.shape} vs {fo.shape}")
        if prior is None:
            up = zero_flow(fs)
        else:
            up = upsample_flow(prior)
            if up.shape[1:3] != fs.shape[1:3]:
                raise ValueError(f"level {l}: flow extents do not match features")
        warped = backward_warp(fo, up)
        flows[l - 1] = ops.add(up, residual_flow(fs, warped, l, config, params))
        prior = flows[l - 1]
    return flows


def estimate_flow_pyramid(F0: list[Tensor], F1: list[Tensor], config: PyramidConfig,
                          params: ParameterStore) -> tuple[list[Tensor], list[Tensor]]:
    """Return ``(flows_t_to_0, flows_t_to_1)``, each finest level first."""
    to1 = estimate_direction(F0, F1, config, params)
    to0 = estimate_direction(F1, F0, config, params)
    return to0, to1


def warp_pyramids_to_t(F0, F1, I0_pyr, I1_pyr, flows_to0, flows_to1):
    """Warp ``(features, image)`` of each input to the midpoint, per level."""
    out0, out1 = [], []
    for l in range(len(F0)):
        src0 = ops.concat_channels([F0[l], I0_pyr[l]])
        src1 = ops.concat_channels([F1[l], I1_pyr[l]])
        out0.append(backward_warp(src0, flows_to0[l]))
        out1.append(backward_warp(src1, flows_to1[l]))
    return out0, out1
