import math

import numpy as np
import pytest

from film.checkpoint import CorruptCheckpointError
from film.config import ConfigError, format_config, parse_config
from film.data import TripletRecord, generate_synthetic_triplets
from film.features import PyramidConfig
from film.model import interpolate_midpoint
from film.params import ParameterStore
from film.train import (
    AdamState,
    NumericalError,
    TrainConfig,
    TrainState,
    adam_update,
    augment_triplet,
    fit,
    load_checkpoint,
    loss_schedule,
    lr_schedule,
    make_batch,
    save_checkpoint,
    train_step,
)

MODEL = PyramidConfig(levels=3, base_width=4)


def desk(**kw) -> TrainConfig:
    base = dict(batch_size=2, crop_size=16, total_steps=10, decay_steps=10, base_lr=1e-3,
                aug_rotate=False, loss="l1", seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def dataset():
    return generate_synthetic_triplets(4, 16, (0, 4), rng=0)


# learning rate ------------------------------------------------------------------

def test_lr_examples():
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == 1e-4
    assert lr_schedule(750_000, cfg) == pytest.approx(4.64e-5, rel=1e-12)
    assert lr_schedule(375_000, cfg) == pytest.approx(1e-4 * math.sqrt(0.464), rel=1e-12)
    with pytest.raises(ValueError):
        lr_schedule(-1, cfg)


def test_lr_monotone_and_staircase():
    cfg = TrainConfig()
    values = [lr_schedule(s, cfg) for s in range(0, 3_000_001, 50_000)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    stair = cfg.replace(staircase=True)
    assert lr_schedule(749_999, stair) == 1e-4
    assert lr_schedule(750_000, stair) == pytest.approx(4.64e-5)


def test_step_scale_rescales_every_horizon():
    cfg = TrainConfig(step_scale=1e-4)
    assert cfg.steps == 300 and cfg.decay_every == 75
    assert lr_schedule(75, cfg) == pytest.approx(4.64e-5)
    assert loss_schedule(cfg).switch_points == [150]


# optimizer ----------------------------------------------------------------------

def scalar_adam(grad_fn, x, lr, steps, b1=0.9, b2=0.999, eps=1e-7):
    """Textbook Adam on a single float."""
    m = v = 0.0
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        x = x - lr * m_hat / (math.sqrt(v_hat) + eps)
    return x


@pytest.mark.parametrize("target,start,lr", [(3.0, 0.0, 0.1), (-1.0, 2.5, 0.01), (0.0, 1e-3, 1e-4)])
def test_adam_matches_scalar_reference(target, start, lr):
    store = ParameterStore(dtype=np.float64)
    p = store.get("x", (1,), init="zeros")
    p.data[...] = start
    state, cfg = AdamState(), TrainConfig()
    for _ in range(50):
        p.grad = 2 * (p.data - target)
        adam_update(store, state, lr, cfg)
    want = scalar_adam(lambda x: 2 * (x - target), start, lr, 50)
    assert abs(p.data[0] - want) <= 1e-7


def test_adam_skips_storages_without_gradient():
    store = ParameterStore(dtype=np.float64)
    a = store.get("a", (2,))
    store.get("b", (2,))
    a.grad = np.ones(2)
    assert adam_update(store, AdamState(), 1e-3, TrainConfig()) == 1


# augmentation -------------------------------------------------------------------

def triplet(size=16, seed=0):
    r = np.random.default_rng(seed)
    return TripletRecord(*(r.random((size, size, 3)).astype(np.float32) for _ in range(3)))


def test_reversal_swaps_outer_frames():
    t = triplet()
    cfg = desk(aug_flip=False, aug_rot90=False)
    seen = set()
    for seed in range(20):
        out = augment_triplet(t, np.random.default_rng(seed), cfg)
        np.testing.assert_array_equal(out.frame_t, t.frame_t)
        if np.array_equal(out.frame0, t.frame1):
            np.testing.assert_array_equal(out.frame1, t.frame0)
            seen.add("reversed")
        else:
            np.testing.assert_array_equal(out.frame0, t.frame0)
            seen.add("kept")
    assert seen == {"reversed", "kept"}


def test_flip_is_an_involution():
    t = triplet()
    cfg = desk(aug_reverse=False, aug_rot90=False)
    for seed in range(10):
        once = augment_triplet(t, np.random.default_rng(seed), cfg)
        twice = augment_triplet(once, np.random.default_rng(seed), cfg)
        for a, b in zip((twice.frame0, twice.frame_t, twice.frame1), (t.frame0, t.frame_t, t.frame1)):
            np.testing.assert_array_equal(a, b)


def test_quarter_rotation_preserves_shape_and_pixel_multiset():
    t = triplet(64)
    cfg = desk(crop_size=64, aug_reverse=False, aug_flip=False)
    for seed in range(8):
        out = augment_triplet(t, np.random.default_rng(seed), cfg)
        for a, b in zip((out.frame0, out.frame_t, out.frame1), (t.frame0, t.frame_t, t.frame1)):
            assert a.shape == b.shape
            np.testing.assert_array_equal(np.sort(a.reshape(-1, 3), axis=0), np.sort(b.reshape(-1, 3), axis=0))


def test_same_transform_for_all_frames():
    base = triplet(32).frame0
    t = TripletRecord(base, base.copy(), base.copy())
    cfg = desk(aug_rotate=True)
    for seed in range(5):
        out = augment_triplet(t, np.random.default_rng(seed), cfg)
        assert np.array_equal(out.frame0, out.frame_t) and np.array_equal(out.frame0, out.frame1)


def test_augmented_values_stay_in_unit_range():
    t = triplet(64)
    cfg = desk(crop_size=32, aug_rotate=True)
    for seed in range(10):
        out = augment_triplet(t, np.random.default_rng(seed), cfg)
        for f in (out.frame0, out.frame_t, out.frame1):
            assert f.shape == (32, 32, 3)
            assert f.min() >= 0.0 and f.max() <= 1.0


def test_crop_larger_than_image_rejected():
    with pytest.raises(ValueError):
        augment_triplet(triplet(16), np.random.default_rng(0), desk(crop_size=32))


def test_batches_depend_only_on_seed_and_step(dataset):
    cfg = desk()
    a = make_batch(dataset, 7, cfg)
    make_batch(dataset, 3, cfg)
    b = make_batch(dataset, 7, cfg)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
    assert a[0].shape == (2, 16, 16, 3)


# training step ------------------------------------------------------------------

def test_single_step_decreases_loss_on_repeated_batch(dataset):
    decreased = 0
    for seed in range(20):
        cfg = desk(seed=seed, base_lr=1e-5)
        state = TrainState.create(MODEL, cfg)
        batch = make_batch(dataset, 0, cfg)
        before = train_step(state, batch)
        state.step = 0
        after = train_step(state, batch)
        decreased += after < before
    assert decreased >= 19


def test_every_shared_storage_is_updated(dataset):
    state = TrainState.create(MODEL, desk(loss="style"))
    train_step(state, make_batch(dataset, 0, state.train_config))
    params = state.model.params
    assert set(state.optimizer.m) == set(params.storages())
    assert len(state.optimizer.m) == params.census() < len(params)
    assert not any(k.startswith("critic") for k in state.optimizer.m)
    assert all(w.grad is None for w, _ in state.critic.weights)
    assert all(t.grad is None for t in params.storages().values())


def test_nan_loss_aborts_with_diagnostics(dataset):
    state = TrainState.create(MODEL, desk())
    state.model.params["decoder/out/b"].tensor.data[0] = np.nan
    with pytest.raises(NumericalError) as info:
        train_step(state, make_batch(dataset, 0, state.train_config))
    assert info.value.diagnostics["step"] == 0


def test_crop_must_suit_pyramid():
    with pytest.raises(ValueError, match="divisible"):
        TrainState.create(PyramidConfig(levels=4), desk(crop_size=20))


# checkpoints --------------------------------------------------------------------

def test_identical_seeds_give_identical_checkpoints(dataset, tmp_path):
    paths = []
    for run in range(2):
        state = fit(TrainState.create(MODEL, desk(loss="style")), dataset)
        paths.append(save_checkpoint(tmp_path / f"run{run}", state))
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_resume_is_bit_identical(dataset, tmp_path):
    cfg = desk(loss="style")
    full = fit(TrainState.create(MODEL, cfg), dataset)
    partial = fit(TrainState.create(MODEL, cfg), dataset, steps=6)
    save_checkpoint(tmp_path / "mid", partial)
    resumed = fit(load_checkpoint(tmp_path / "mid"), dataset)
    a = save_checkpoint(tmp_path / "full", full).read_bytes()
    b = save_checkpoint(tmp_path / "resumed", resumed).read_bytes()
    assert a == b
    assert [h[1] for h in full.history[6:]] == [h[1] for h in resumed.history]


def test_save_load_save_roundtrip(dataset, tmp_path):
    state = fit(TrainState.create(MODEL, desk()), dataset, steps=2)
    first = save_checkpoint(tmp_path / "a", state)
    loaded = load_checkpoint(first)
    second = save_checkpoint(tmp_path / "b", loaded)
    assert first.read_bytes() == second.read_bytes()
    frames = dataset[0].frame0, dataset[0].frame1
    np.testing.assert_array_equal(interpolate_midpoint(*frames, state.model),
                                  interpolate_midpoint(*frames, loaded.model))


def test_corrupt_checkpoint_rejected(dataset, tmp_path):
    path = save_checkpoint(tmp_path / "ok", TrainState.create(MODEL, desk()))
    blob = path.read_bytes()
    for bad in (b"FILX" + blob[4:], blob[:-7], blob[:4] + b"\x09" + blob[5:]):
        (tmp_path / "bad").write_bytes(bad)
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(tmp_path / "bad")


def test_schedule_switches_exactly_at_half():
    sched = loss_schedule(desk(loss="style", total_steps=10))
    assert [sched.weights(s) for s in (0, 4)] == [(1.0, 1.0, 0.0)] * 2
    assert [sched.weights(s) for s in (5, 9)] == [(1.0, 0.25, 40.0)] * 2


def test_periodic_checkpoints_written(dataset, tmp_path):
    fit(TrainState.create(MODEL, desk(checkpoint_every=4)), dataset, checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["ckpt_0004", "ckpt_0008"]


# config files -------------------------------------------------------------------

def test_config_roundtrip_and_rejections():
    model, train = parse_config(format_config(MODEL, desk()))
    assert model == MODEL and train == desk()
    assert parse_config("levels = 4\ntotal_steps = 3e6\n# note\n")[1].total_steps == 3_000_000
    for bad in ("bogus = 1", "levels 4", "aug_flip = maybe", "base_lr = -1", "levels = 5\ncrop_size = 24"):
        with pytest.raises(ConfigError):
            parse_config(bad)
