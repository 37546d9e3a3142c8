"""Training loop: Adam, exponential learning-rate decay, augmentation, checkpoints."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from film import ops
from film.autodiff import Tensor, backward
from film.checkpoint import entry_text, load_container, save_container, text_entry
from film.data import TripletRecord
from film.features import PyramidConfig
from film.losses import FeatureCritic, LossWeightSchedule, loss_combined
from film.model import FilmModel
from film.params import ParameterStore
from film.warp import sample_bilinear

logger = logging.getLogger(__name__)

LOSS_VARIANTS = ("l1", "vgg", "style")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    crop_size: int = 256
    total_steps: int = 3_000_000
    decay_steps: int = 750_000
    step_scale: float = 1.0
    base_lr: float = 1e-4
    decay_rate: float = 0.464
    staircase: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    seed: int = 0
    loss: str = "style"
    switch_fraction: float = 0.5
    aug_rotate: bool = True
    max_rotation: float = 45.0
    aug_rot90: bool = True
    aug_flip: bool = True
    aug_reverse: bool = True
    checkpoint_every: int = 0
    log_every: int = 50

    def __post_init__(self):
        for name in ("batch_size", "crop_size", "total_steps", "decay_steps", "step_scale",
                     "base_lr", "decay_rate", "epsilon"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.loss not in LOSS_VARIANTS:
            raise ValueError(f"loss must be one of {LOSS_VARIANTS}, got {self.loss!r}")
        if not 0 <= self.switch_fraction <= 1:
            raise ValueError("switch_fraction must lie in [0, 1]")

    @property
    def steps(self) -> int:
        """Total training steps after desk-scale rescaling."""
        return max(1, int(round(self.total_steps * self.step_scale)))

    @property
    def decay_every(self) -> int:
        return max(1, int(round(self.decay_steps * self.step_scale)))

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def check_crop(model_config: PyramidConfig, config: TrainConfig) -> None:
    if config.crop_size % model_config.divisor:
        raise ValueError(f"crop_size {config.crop_size} is not divisible by {model_config.divisor} "
                         f"(required for {model_config.levels} levels)")


def lr_schedule(step: int, config: TrainConfig) -> float:
    """``base_lr * decay_rate ** (step / decay_steps)``, optionally floored to a staircase."""
    if step < 0:
        raise ValueError("step must be non-negative")
    exponent = step / config.decay_every
    if config.staircase:
        exponent = math.floor(exponent)
    return config.base_lr * config.decay_rate ** exponent


def loss_schedule(config: TrainConfig) -> LossWeightSchedule:
    if config.loss == "l1":
        return LossWeightSchedule.l1_only()
    if config.loss == "vgg":
        return LossWeightSchedule.constant((1.0, 1.0, 0.0))
    return LossWeightSchedule.style(config.steps, config.switch_fraction)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First and second moments per storage, keyed by sharing key."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_update(params: ParameterStore, state: AdamState, lr: float, config: TrainConfig) -> int:
    """Apply one Adam step to every storage that has a gradient.

    Returns the number of storages updated. No weight decay.
    """
    state.t += 1
    b1, b2, eps = config.beta1, config.beta2, config.epsilon
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    updated = 0
    for key, tensor in params.storages().items():
        g = tensor.grad
        if g is None:
            continue
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(tensor.data)
            state.v[key] = np.zeros_like(tensor.data)
        v = state.v[key]
        dt = tensor.dtype.type
        m *= dt(b1)
        m += dt(1 - b1) * g
        v *= dt(b2)
        v += dt(1 - b2) * g * g
        step = dt(lr / c1) * m / (np.sqrt(v / dt(c2)) + dt(eps))
        tensor.data -= step.astype(tensor.dtype)
        updated += 1
    return updated


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _rotate(frames: list[np.ndarray], angle_deg: float) -> list[np.ndarray]:
    h, w, _ = frames[0].shape
    th = math.radians(angle_deg)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map: output pixel samples the source rotated back by angle
    sx = math.cos(th) * (xx - cx) + math.sin(th) * (yy - cy) + cx
    sy = -math.sin(th) * (xx - cx) + math.cos(th) * (yy - cy) + cy
    flow = np.stack([sx - xx, sy - yy], axis=-1)[None]
    out = []
    for f in frames:
        out.append(sample_bilinear(f[None].astype(np.float64), flow)[0].astype(f.dtype))
    return out


def _inscribed_side(side: int, angle_deg: float) -> int:
    th = math.radians(abs(angle_deg))
    return int(math.floor(side / (math.cos(th) + math.sin(th)) + 1e-9))


def _max_angle(side: int, crop: int, limit: float) -> float:
    """Largest rotation (degrees, <= limit) whose valid interior still fits ``crop``."""
    ratio = side / (crop * math.sqrt(2))
    if ratio >= 1:
        return limit
    return min(limit, max(0.0, math.degrees(math.asin(ratio)) - 45.0))


def _center_crop(frames, size):
    h, w, _ = frames[0].shape
    y, x = (h - size) // 2, (w - size) // 2
    return [f[y:y + size, x:x + size] for f in frames]


def augment_triplet(triplet: TripletRecord, rng: np.random.Generator, config: TrainConfig) -> TripletRecord:
    """Random reversal, flip, 90-degree and free rotation, then a random crop.

    The same spatial transform is applied to all three frames.
    """
    crop = config.crop_size
    h, w, _ = triplet.shape
    if crop > min(h, w):
        raise ValueError(f"crop {crop} larger than image {h}x{w}")
    frames = [triplet.frame0, triplet.frame_t, triplet.frame1]
    # draw every decision up front so the stream is independent of the toggles
    reverse, flip, quarter = rng.random() < 0.5, rng.random() < 0.5, int(rng.integers(0, 4))
    angle = float(rng.uniform(-config.max_rotation, config.max_rotation))
    oy, ox = rng.random(), rng.random()
    if config.aug_reverse and reverse:
        frames = frames[::-1]
    if config.aug_flip and flip:
        frames = [f[:, ::-1] for f in frames]
    if config.aug_rot90 and quarter:
        frames = [np.rot90(f, quarter) for f in frames]
    if config.aug_rotate and config.max_rotation > 0:
        side = min(frames[0].shape[:2])
        limit = _max_angle(side, crop, config.max_rotation)
        angle = max(-limit, min(limit, angle))
        if angle:
            frames = _rotate([np.ascontiguousarray(f) for f in frames], angle)
            frames = _center_crop(frames, max(crop, _inscribed_side(side, angle)))
    fh, fw, _ = frames[0].shape
    y = int(oy * (fh - crop + 1))
    x = int(ox * (fw - crop + 1))
    frames = [np.ascontiguousarray(f[y:y + crop, x:x + crop]) for f in frames]
    return TripletRecord(*frames, motion_px=triplet.motion_px, source_id=triplet.source_id)


def batch_rng(seed: int, step: int, slot: Optional[int] = None) -> np.random.Generator:
    """Counter-based stream: depends only on (seed, step, slot)."""
    key = [seed, step] if slot is None else [seed, step, slot + 1]
    return np.random.default_rng(key)


def make_batch(dataset: Sequence[TripletRecord], step: int, config: TrainConfig, dtype=np.float32):
    """Deterministic batch for ``step``: arrays ``(I0, It, I1)`` of shape (B, crop, crop, 3)."""
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    b = config.batch_size
    idx = batch_rng(config.seed, step).choice(n, size=b, replace=b > n)
    recs = [augment_triplet(dataset[i], batch_rng(config.seed, step, k), config) for k, i in enumerate(idx)]
    stack = lambda attr: np.stack([getattr(r, attr) for r in recs]).astype(dtype)  # noqa: E731
    return stack("frame0"), stack("frame_t"), stack("frame1")


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class NumericalError(FloatingPointError):
    """Raised when the loss or gradients stop being finite."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainState:
    model: FilmModel
    train_config: TrainConfig
    critic: Optional[FeatureCritic] = None
    optimizer: AdamState = field(default_factory=AdamState)
    step: int = 0
    history: list[tuple[int, float, float]] = field(default_factory=list)

    @classmethod
    def create(cls, model_config: PyramidConfig, train_config: TrainConfig,
               critic: Optional[FeatureCritic] = None) -> "TrainState":
        check_crop(model_config, train_config)
        model = FilmModel(model_config, seed=train_config.seed)
        if critic is None and train_config.loss != "l1":
            critic = FeatureCritic.builtin()
        return cls(model, train_config, critic)


def train_step(state: TrainState, batch, schedule: Optional[LossWeightSchedule] = None) -> float:
    """One optimisation step on ``batch = (I0, It, I1)``; returns the loss value."""
    config = state.train_config
    schedule = schedule or loss_schedule(config)
    params = state.model.params
    I0, It, I1 = (Tensor(np.asarray(a, dtype=params.dtype)) for a in batch)
    try:
        pred = state.model(I0, I1)
        loss = loss_combined(pred, It, state.critic, schedule, state.step)
    except FloatingPointError as exc:
        raise NumericalError(f"{exc} at step {state.step}",
                             {"step": state.step, "lr": lr_schedule(state.step, config)}) from exc
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss {value} at step {state.step}",
                             {"step": state.step, "loss": value, "lr": lr_schedule(state.step, config)})
    params.zero_grad()
    backward(loss)
    for key, t in params.storages().items():
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise NumericalError(f"non-finite gradient for {key} at step {state.step}",
                                 {"step": state.step, "loss": value, "parameter": key})
    lr = lr_schedule(state.step, config)
    adam_update(params, state.optimizer, lr, config)
    params.zero_grad()
    state.history.append((state.step, value, lr))
    state.step += 1
    return value


def fit(
    state: TrainState,
    dataset: Sequence[TripletRecord],
    steps: Optional[int] = None,
    checkpoint_dir=None,
    on_step: Optional[Callable[[TrainState, float], None]] = None,
) -> TrainState:
    """Train until ``steps`` (default: the configured total) has been reached.

    Resuming from a restored state continues with exactly the batches and
    augmentations an uninterrupted run would have seen.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    config = state.train_config
    schedule = loss_schedule(config)
    end = config.steps if steps is None else steps
    while state.step < end:
        batch = make_batch(dataset, state.step, config, state.model.params.dtype)
        value = train_step(state, batch, schedule)
        if config.log_every and state.step % config.log_every == 0:
            logger.info("step %d loss %.5f lr %.3g", state.step, value, state.history[-1][2])
        if on_step is not None:
            on_step(state, value)
        if checkpoint_dir and config.checkpoint_every and state.step % config.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"ckpt_{state.step:04d}", state)
    return state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def checkpoint_entries(state: TrainState) -> dict[str, np.ndarray]:
    from film.config import format_config

    entries: dict[str, np.ndarray] = {
        "meta/config": text_entry(format_config(state.model.config, state.train_config)),
        "meta/step": np.asarray(state.step, dtype=np.int64),
        "meta/seed": np.asarray(state.train_config.seed, dtype=np.int64),
        "meta/param_seed": np.asarray(state.model.params.seed, dtype=np.int64),
        "adam/t": np.asarray(state.optimizer.t, dtype=np.int64),
    }
    for key, t in state.model.params.storages().items():
        entries[f"param/{key}"] = t.data
    for key in state.optimizer.m:
        entries[f"adam/m/{key}"] = state.optimizer.m[key]
        entries[f"adam/v/{key}"] = state.optimizer.v[key]
    if state.critic is not None:
        entries.update(state.critic.state())
    return entries


def save_checkpoint(path, state: TrainState) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_container(path, checkpoint_entries(state))
    return path


def load_checkpoint(path) -> TrainState:
    """Restore model, optimizer, critic and step from a checkpoint file."""
    from film.config import parse_config

    entries = load_container(path)
    if "meta/config" not in entries:
        raise ValueError(f"{path}: not a training checkpoint (no meta/config entry)")
    model_config, train_config = parse_config(entry_text(entries["meta/config"]))
    params = ParameterStore(int(entries.get("meta/param_seed", entries["meta/seed"])))
    for name, arr in entries.items():
        if name.startswith("param/"):
            params.load_storage(name[len("param/"):], arr)
    model = FilmModel(model_config, params)
    # bind use-site names to the loaded storages; nothing new may be created
    params.frozen = True
    model.build()
    params.frozen = False
    opt = AdamState(t=int(entries["adam/t"]))
    for name, arr in entries.items():
        if name.startswith("adam/m/"):
            key = name[len("adam/m/"):]
            opt.m[key] = arr.copy()
            opt.v[key] = entries[f"adam/v/{key}"].copy()
    critic = FeatureCritic.from_state(entries) if any(k.startswith("critic/") for k in entries) else None
    return TrainState(model, train_config, critic, opt, int(entries["meta/step"]))


def load_model(path) -> FilmModel:
    return load_checkpoint(path).model
