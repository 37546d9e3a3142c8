import numpy as np
import pytest

from film.autodiff import Tensor
from film.features import PyramidConfig
from film.model import (
    FilmModel,
    decoder_width,
    fuse_decode,
    fused_channels,
    interpolate_midpoint,
    interpolate_recursive,
)
from film.params import ParameterStore


def frames(h=32, w=32, seed=0):
    r = np.random.default_rng(seed)
    a = r.random((h, w, 3)).astype(np.float32)
    return a, np.roll(a, 1, axis=1)


def leaky(x):
    return np.where(x > 0, x, 0.2 * x)


def test_forward_shapes(tiny_model):
    a, b = frames()
    res = tiny_model.forward(Tensor(a[None]), Tensor(b[None]))
    assert res.image.shape == (1, 32, 32, 3)
    assert len(res.flows_to0) == len(res.flows_to1) == 3
    assert np.isfinite(res.image.data).all()


def test_batch_matches_single_samples(tiny_model):
    a, b = frames()
    c, d = frames(seed=1)
    both = tiny_model(Tensor(np.stack([a, c])), Tensor(np.stack([b, d]))).data
    one = tiny_model(Tensor(c[None]), Tensor(d[None])).data
    np.testing.assert_allclose(both[1:], one, atol=1e-5)


def test_decoder_on_zero_inputs_matches_constant_oracle():
    config = PyramidConfig(levels=3, base_width=4)
    params = ParameterStore(seed=5)
    fused = [Tensor(np.zeros((1, 16 >> l, 16 >> l, fused_channels(l + 1, config)), np.float32)) for l in range(3)]
    fuse_decode(fused, config, params)
    r = np.random.default_rng(0)
    for t in params.storages().values():
        if t.data.ndim == 1:
            t.data[...] = r.normal(0, 0.5, t.shape)
    out = fuse_decode(fused, config, params).data
    # a constant map stays constant under edge-padded convs and upsampling,
    # so each conv reduces to a matrix product with its summed taps
    state = np.zeros(decoder_width(4, config))
    for l in (3, 2, 1):
        v = np.concatenate([state, np.zeros(fused_channels(l, config))])
        for k in range(2):
            w, b = params[f"decoder/l{l}/conv{k}/w"].tensor.data, params[f"decoder/l{l}/conv{k}/b"].tensor.data
            v = leaky(w.sum(axis=(0, 1)).T @ v + b)
        state = v
    want = params["decoder/out/w"].tensor.data[0, 0].T @ state + params["decoder/out/b"].tensor.data
    np.testing.assert_allclose(out, np.broadcast_to(want, out.shape), rtol=1e-5, atol=1e-6)


def test_decoder_rejects_wrong_channel_count():
    config = PyramidConfig(levels=3, base_width=4)
    fused = [Tensor(np.zeros((1, 8 >> l, 8 >> l, 5), np.float32)) for l in range(3)]
    with pytest.raises(ValueError, match="channels"):
        fuse_decode(fused, config, ParameterStore())


def test_midpoint_is_clamped_and_keeps_layout():
    model = FilmModel(PyramidConfig(levels=3, base_width=4))
    model.params["decoder/out/b"].tensor.data[...] = 5.0
    a, b = frames()
    out = interpolate_midpoint(a, b, model)
    assert out.shape == a.shape
    np.testing.assert_array_equal(out, 1.0)
    assert interpolate_midpoint(a[None], b[None], model).shape == (1, 32, 32, 3)


def test_midpoint_does_not_create_parameters(tiny_model):
    before = tiny_model.params.census()
    a, b = frames()
    interpolate_midpoint(a, b, tiny_model)
    assert tiny_model.params.census() == before
    assert not tiny_model.params.frozen


@pytest.mark.parametrize("depth", [1, 2, 3])
def test_recursive_frame_count(tiny_model, depth):
    a, b = frames(16, 16)
    out = interpolate_recursive(a, b, tiny_model, depth)
    assert len(out) == 2 ** depth - 1
    assert all(f.shape == a.shape for f in out)


def test_recursive_middle_frame_is_direct_midpoint(tiny_model):
    a, b = frames(16, 16)
    out = interpolate_recursive(a, b, tiny_model, 2)
    np.testing.assert_array_equal(out[1], interpolate_midpoint(a, b, tiny_model))
    with pytest.raises(ValueError):
        interpolate_recursive(a, b, tiny_model, 0)


def test_extra_level_reuses_shared_weights(tiny_model):
    a, b = frames(32, 32)
    before = tiny_model.params.census()
    out = interpolate_midpoint(a, b, tiny_model, levels=4)
    assert out.shape == a.shape and np.isfinite(out).all()
    assert tiny_model.params.census() == before


def test_unshared_model_cannot_add_levels():
    model = FilmModel(PyramidConfig(levels=3, base_width=4, share_weights=False))
    a, b = frames(32, 32)
    with pytest.raises(KeyError):
        interpolate_midpoint(a, b, model, levels=4)


def test_parameter_count_independent_of_depth_beyond_shared_levels():
    counts = {L: FilmModel(PyramidConfig(levels=L, base_width=4)).parameter_count() for L in (3, 5, 7)}
    assert len(set(counts.values())) == 1


def test_input_validation(tiny_model):
    a, b = frames()
    with pytest.raises(ValueError):
        tiny_model(Tensor(a[None]), Tensor(b[None, :16]))
    with pytest.raises(ValueError):
        tiny_model(Tensor(a[None, :30, :30]), Tensor(b[None, :30, :30]))
