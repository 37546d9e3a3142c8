"""Image pyramids and scale-agnostic feature pyramids.

The depth-``d`` convolution stack is applied at every pyramid level with the
same weights, so features that describe the same content at different scales
come out of the same filters. Levels are 1-based in names and docstrings and
0-based in the returned lists.
"""

from __future__ import annotations

from dataclasses import dataclass

from film import ops
from film.autodiff import Tensor
from film.params import ParameterStore


@dataclass(frozen=True)
class PyramidConfig:
    levels: int = 7
    max_depth: int = 3
    base_width: int = 8
    convs_per_depth: int = 2
    share_weights: bool = True

    def __post_init__(self):
        if self.levels < 3:
            raise ValueError(f"levels must be >= 3, got {self.levels}")
        if not 1 <= self.max_depth <= self.levels:
            raise ValueError(f"max_depth must lie in [1, levels], got {self.max_depth}")
        if self.base_width < 1 or self.convs_per_depth < 1:
            raise ValueError("base_width and convs_per_depth must be positive")

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def depth_width(self, d: int) -> int:
        return self.base_width * 2 ** (d - 1)

    def feature_channels(self, level: int) -> int:
        """Channel count of the aggregated feature map at 1-based ``level``."""
        return sum(self.depth_width(d) for d in range(1, min(level, self.max_depth) + 1))

    def with_levels(self, levels: int) -> "PyramidConfig":
        return PyramidConfig(levels, self.max_depth, self.base_width, self.convs_per_depth, self.share_weights)


def check_divisible(image: Tensor, config: PyramidConfig) -> None:
    h, w = image.shape[1:3]
    if h % config.divisor or w % config.divisor:
        raise ValueError(
            f"image extents {h}x{w} are not divisible by {config.divisor} "
            f"(required for {config.levels} pyramid levels)"
        )


def build_image_pyramid(image: Tensor, config: PyramidConfig) -> list[Tensor]:
    check_divisible(image, config)
    pyramid = [image]
    for _ in range(config.levels - 1):
        pyramid.append(ops.avg_pool_2x2(pyramid[-1]))
    return pyramid


def _depth_stack(x: Tensor, level: int, d: int, config: PyramidConfig, params: ParameterStore) -> Tensor:
    cin = x.shape[-1]
    cout = config.depth_width(d)
    for k in range(config.convs_per_depth):
        name = f"extractor/l{level}/d{d}/conv{k}"
        shared = f"extractor/d{d}/conv{k}" if config.share_weights else name
        w = params.get(name + "/w", (3, 3, cin, cout), shared + "/w")
        b = params.get(name + "/b", (cout,), shared + "/b", init="zeros")
        x = ops.leaky_relu(ops.conv2d(x, w, b))
        cin = cout
    return x


def extract_depth_features(
    pyramid: list[Tensor], config: PyramidConfig, params: ParameterStore
) -> dict[tuple[int, int], Tensor]:
    """Compute ``f[(l, d)]`` for every pair some aggregated level needs.

    ``f[(l, d)]`` starts from image level ``l`` and passes through depth stacks
    1..d with 2x2 average pooling between them, so it has the spatial extents
    of level ``l + d - 1``.
    """
    levels = len(pyramid)
    grid: dict[tuple[int, int], Tensor] = {}
    for l in range(1, levels + 1):
        depth = min(config.max_depth, levels - l + 1)
        x = pyramid[l - 1]
        for d in range(1, depth + 1):
            if d > 1:
                x = ops.avg_pool_2x2(x)
            x = _depth_stack(x, l, d, config, params)
            grid[(l, d)] = x
    return grid


def aggregate_scale_agnostic(
    features: dict[tuple[int, int], Tensor], config: PyramidConfig, levels: int | None = None
) -> list[Tensor]:
    """Concatenate same-sized maps of different depths, deepest first."""
    levels = levels or config.levels
    out = []
    for l in range(1, levels + 1):
        parts = []
        for d in range(min(l, config.max_depth), 0, -1):
            key = (l + 1 - d, d)
            if key not in features:
                raise KeyError(f"missing feature map f{key}")
            parts.append(features[key])
        size = parts[0].shape[1:3]
        if any(p.shape[1:3] != size for p in parts):
            raise ValueError(f"level {l}: aggregated maps differ in spatial size")
        out.append(ops.concat_channels(parts))
    return out


def feature_pyramid(image: Tensor, config: PyramidConfig, params: ParameterStore):
    """Image pyramid and scale-agnostic feature pyramid for one image."""
    pyramid = build_image_pyramid(image, config)
    grid = extract_depth_features(pyramid, config, params)
    return pyramid, aggregate_scale_agnostic(grid, config, len(pyramid))
