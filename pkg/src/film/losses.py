"""Image synthesis losses: L1, feature (perceptual) and Gram-matrix (style).

The feature critic is a frozen convolution stack. By default its weights are
drawn from a fixed seed; other weights (e.g. converted pretrained features)
can be loaded from a checkpoint file.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from film import ops
from film.autodiff import Tensor
from film.params import he_normal

CRITIC_SEED = 20220718
CRITIC_WIDTHS = (16, 32, 64)


class FeatureCritic:
    """Fixed feature stages with 2x2 average pooling between them.

    Stage ``i`` is a 3x3 convolution plus leaky rectifier; stage 1 runs at
    the input resolution. The weight tensors never require gradients, but
    gradients do flow through them to the image.
    """

    def __init__(self, weights: Sequence[tuple[np.ndarray, np.ndarray]],
                 alphas: Optional[Sequence[float]] = None, provenance: str = "builtin-deterministic"):
        if not weights:
            raise ValueError("critic needs at least one stage")
        if weights[0][0].shape[2] != 3:
            raise ValueError("first critic stage must take 3 channels")
        self.weights = [(Tensor(np.asarray(w)), Tensor(np.asarray(b))) for w, b in weights]
        self.alphas = list(alphas) if alphas is not None else [1.0] * len(weights)
        if len(self.alphas) != len(self.weights):
            raise ValueError("one importance weight per stage is required")
        self.provenance = provenance
        self._cast: dict = {}

    @classmethod
    def builtin(cls, widths: Sequence[int] = CRITIC_WIDTHS, seed: int = CRITIC_SEED,
                alphas: Optional[Sequence[float]] = None) -> "FeatureCritic":
        rng = np.random.default_rng(seed)
        weights = []
        cin = 3
        for cout in widths:
            w = he_normal((3, 3, cin, cout), rng).astype(np.float32)
            b = (rng.standard_normal(cout) * 0.05).astype(np.float32)
            weights.append((w, b))
            cin = cout
        return cls(weights, alphas)

    @property
    def num_stages(self) -> int:
        return len(self.weights)

    def _weights_for(self, dtype):
        dtype = np.dtype(dtype)
        if dtype == self.weights[0][0].dtype:
            return self.weights
        if dtype not in self._cast:
            self._cast[dtype] = [(Tensor(w.data.astype(dtype)), Tensor(b.data.astype(dtype)))
                                 for w, b in self.weights]
        return self._cast[dtype]

    def features(self, image: Tensor) -> list[Tensor]:
        if image.shape[-1] != 3:
            raise ValueError(f"critic expects 3-channel images, got {image.shape[-1]}")
        out = []
        x = image
        for i, (w, b) in enumerate(self._weights_for(image.dtype)):
            if i:
                x = ops.avg_pool_2x2(x)
            x = ops.leaky_relu(ops.conv2d(x, w, b))
            out.append(x)
        return out

    def state(self) -> dict[str, np.ndarray]:
        """Arrays to persist in a checkpoint container."""
        entries = {"critic/alphas": np.asarray(self.alphas, dtype=np.float64)}
        for i, (w, b) in enumerate(self.weights):
            entries[f"critic/stage{i}/w"] = w.data
            entries[f"critic/stage{i}/b"] = b.data
        return entries

    @classmethod
    def from_state(cls, entries: dict[str, np.ndarray]) -> "FeatureCritic":
        n = sum(1 for k in entries if k.startswith("critic/stage") and k.endswith("/w"))
        if n == 0:
            raise ValueError("no critic stages in container")
        weights = [(entries[f"critic/stage{i}/w"], entries[f"critic/stage{i}/b"]) for i in range(n)]
        alphas = entries.get("critic/alphas")
        return cls(weights, None if alphas is None else alphas.tolist(), provenance="loaded-from-file")


def critic_features(image: Tensor, critic: FeatureCritic) -> list[Tensor]:
    return critic.features(image)


def loss_l1(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference over all elements."""
    return ops.mean(ops.abs(ops.sub(pred, target)))


def _stage_losses(pred, target, critic, per_stage):
    fp = critic.features(pred)
    ft = critic.features(target)
    terms = [per_stage(a, b) for a, b in zip(fp, ft)]
    weights = [a / critic.num_stages for a in critic.alphas]
    return ops.weighted_sum(terms, weights)


def loss_perceptual(pred: Tensor, target: Tensor, critic: FeatureCritic) -> Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return _stage_losses(pred, target, critic, loss_l1)


def gram_matrix(features: Tensor) -> Tensor:
    return ops.gram_matrix(features)


def _gram_distance(a: Tensor, b: Tensor) -> Tensor:
    diff = ops.sub(ops.gram_matrix(a), ops.gram_matrix(b))
    return ops.mean(ops.frobenius_norm_per_sample(diff))


def loss_gram(pred: Tensor, target: Tensor, critic: FeatureCritic) -> Tensor:
    """Average over stages of the Frobenius distance between Gram matrices."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return _stage_losses(pred, target, critic, _gram_distance)


@dataclass
class LossWeightSchedule:
    """Piecewise-constant ``(w_l1, w_vgg, w_gram)`` keyed by training step.

    ``phases`` holds ``(start_step, weights)`` pairs sorted by start step.
    """

    phases: list[tuple[int, tuple[float, float, float]]] = field(default_factory=list)

    @classmethod
    def style(cls, total_steps: int, switch_fraction: float = 0.5) -> "LossWeightSchedule":
        switch = int(round(total_steps * switch_fraction))
        return cls([(0, (1.0, 1.0, 0.0)), (switch, (1.0, 0.25, 40.0))])

    @classmethod
    def constant(cls, weights: tuple[float, float, float]) -> "LossWeightSchedule":
        return cls([(0, tuple(weights))])

    @classmethod
    def l1_only(cls) -> "LossWeightSchedule":
        return cls.constant((1.0, 0.0, 0.0))

    @property
    def switch_points(self) -> list[int]:
        return [start for start, _ in self.phases[1:]]

    def weights(self, step: int) -> tuple[float, float, float]:
        if not self.phases:
            raise ValueError("empty loss schedule")
        current = self.phases[0][1]
        for start, w in self.phases:
            if step >= start:
                current = w
        return current


def loss_combined(pred: Tensor, target: Tensor, critic: Optional[FeatureCritic],
                  schedule: LossWeightSchedule, step: int) -> Tensor:
    """Weighted sum of the three losses; zero-weight terms are not evaluated."""
    w_l1, w_vgg, w_gram = schedule.weights(step)
    terms, weights = [], []
    if w_l1:
        terms.append(loss_l1(pred, target))
        weights.append(w_l1)
    if w_vgg:
        terms.append(loss_perceptual(pred, target, critic))
        weights.append(w_vgg)
    if w_gram:
        terms.append(loss_gram(pred, target, critic))
        weights.append(w_gram)
    if not terms:
        return ops.scalar_mul(loss_l1(pred, target), 0.0)
    return ops.weighted_sum(terms, weights)
