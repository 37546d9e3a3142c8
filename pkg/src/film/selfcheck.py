"""Built-in verification suites run by ``film selfcheck``.

Each suite returns a list of ``CheckResult``; a clean build passes all of them.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from film import ops
from film.autodiff import Tensor
from film.features import PyramidConfig
from film.gradcheck import grad_check
from film.losses import FeatureCritic, LossWeightSchedule, gram_matrix, loss_gram, loss_l1, loss_perceptual
from film.model import FilmModel
from film.params import ParameterStore
from film.warp import backward_warp

GRAD_TOLERANCE = 1e-4


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str = ""


def _rng(seed=0):
    return np.random.default_rng(seed)


def _smooth_probe(shape, seed):
    """Fixed random weights turning any output into a smooth scalar."""
    return Tensor(_rng(seed).standard_normal(shape))


def _project(out: Tensor, seed: int = 99) -> Tensor:
    return ops.sum(ops.mul(out, _smooth_probe(out.shape, seed)))


def op_gradient_cases() -> list[tuple[str, Callable, list, float]]:
    """``(name, f, inputs, step)`` for every differentiable operation."""
    r = _rng(1)
    x = r.standard_normal((2, 4, 4, 3))
    y = r.standard_normal((2, 4, 4, 3))
    pos = r.uniform(0.5, 2.0, (2, 4, 4, 3))
    w = r.standard_normal((3, 3, 3, 5)) * 0.3
    w1 = r.standard_normal((1, 1, 3, 2)) * 0.3
    b = r.standard_normal(5) * 0.1
    src = r.uniform(0, 1, (1, 6, 7, 2))
    flow = r.uniform(-2.3, 2.3, (1, 6, 7, 2))
    feats = r.standard_normal((2, 3, 4, 5))
    scalars = r.standard_normal(3)
    img = r.uniform(0, 1, (1, 8, 8, 3))
    target = r.uniform(0, 1, (1, 8, 8, 3))
    critic = FeatureCritic.builtin(widths=(4, 4, 4))
    cases = [
        ("add", lambda a, c: _project(ops.add(a, c)), [x, y], 1e-3),
        ("sub", lambda a, c: _project(ops.sub(a, c)), [x, y], 1e-3),
        ("mul", lambda a, c: _project(ops.mul(a, c)), [x, y], 1e-3),
        ("scalar_mul", lambda a: _project(ops.scalar_mul(a, -1.7)), [x], 1e-3),
        ("leaky_relu", lambda a: _project(ops.leaky_relu(a)), [x], 1e-6),
        ("abs", lambda a: _project(ops.abs(a)), [pos], 1e-3),
        ("square", lambda a: _project(ops.square(a)), [x], 1e-3),
        ("sqrt", lambda a: _project(ops.sqrt(a)), [pos], 1e-4),
        ("mean", lambda a: ops.mean(ops.square(a)), [x], 1e-3),
        ("reshape", lambda a: _project(ops.reshape(a, (2, 48))), [x], 1e-3),
        ("stack_scalars", lambda v: _project(ops.stack_scalars([ops.sum(ops.mul(v, Tensor(e))) for e in np.eye(3)])),
         [scalars], 1e-3),
        ("weighted_sum", lambda a, c: _project(ops.weighted_sum([a, c], [0.3, -1.2])), [x, y], 1e-3),
        ("clamp01", lambda a: _project(ops.clamp01(a)), [x * 0.8 + 0.5], 1e-6),
        ("concat_channels", lambda a, c: _project(ops.concat_channels([a, c])), [x, y], 1e-3),
        ("pad_edge", lambda a: _project(ops.pad_edge(a, 2)), [x], 1e-3),
        ("conv2d_same", lambda a, k, c: _project(ops.conv2d(a, k, c)), [x, w, b], 1e-3),
        ("conv2d_valid", lambda a, k: _project(ops.conv2d(a, k, padding="valid")), [x, w], 1e-3),
        ("conv2d_stride2", lambda a, k, c: _project(ops.conv2d(a, k, c, stride=2)), [x, w, b], 1e-3),
        ("conv2d_1x1", lambda a, k: _project(ops.conv2d(a, k)), [x, w1], 1e-3),
        ("avg_pool_2x2", lambda a: _project(ops.avg_pool_2x2(a)), [x], 1e-3),
        ("bilinear_upsample_2x", lambda a: _project(ops.bilinear_upsample_2x(a)), [x], 1e-3),
        ("backward_warp", lambda s, f: _project(backward_warp(s, f)), [src, flow], 1e-6),
        ("gram_matrix", lambda f: _project(gram_matrix(f)), [feats], 1e-3),
        ("frobenius_norm", lambda f: ops.sum(ops.frobenius_norm_per_sample(f)), [feats], 1e-4),
        ("loss_l1", lambda a: loss_l1(a, Tensor(target)), [img], 1e-6),
        ("loss_perceptual", lambda a: loss_perceptual(a, Tensor(target), critic), [img], 1e-6),
        ("loss_gram", lambda a: loss_gram(a, Tensor(target), critic), [img], 1e-4),
    ]
    return cases


def _move_off_kinks(params: ParameterStore, r: np.random.Generator) -> None:
    """Randomize biases and the flow heads so flows are O(1) pixels.

    Freshly initialized flow heads emit near-zero flows, which puts every
    bilinear sample within a hair of a pixel centre where the warp is not
    differentiable. Finite differences are meaningless there.
    """
    for key, t in params.storages().items():
        if key.endswith("/b"):
            t.data[...] = r.normal(0.0, 0.1, t.shape)
        elif key.startswith("flow/") and key.endswith("conv3/w"):
            fan_in = t.shape[0] * t.shape[1] * t.shape[2]
            t.data[...] = r.normal(0.0, np.sqrt(2.0 / fan_in), t.shape)


def full_model_gradient(samples: int = 20, seed: int = 0, step: float = 1e-3):
    """Check the composed model (16x16 input, base width 4, 3 levels) in float64.

    Every parameter tensor contributes ``samples`` randomly chosen entries,
    and so does each input image.
    """
    config = PyramidConfig(levels=3, base_width=4)
    model32 = FilmModel(config, seed=seed)
    params = model32.params.astype(np.float64)
    model = FilmModel(config, params)
    r = _rng(seed + 7)
    _move_off_kinks(params, r)
    I0 = r.uniform(0, 1, (1, 16, 16, 3))
    I1 = np.roll(I0, 1, axis=2) * 0.9 + 0.05
    storages = list(params.storages().values())

    def f(*leaves):
        return _project(model(leaves[-2], leaves[-1]), seed=123)

    return grad_check(f, storages + [I0, I1], step=step, samples=samples, seed=seed,
                      fallback_steps=(1e-4, 1e-5, 1e-6, 1e-7)), len(storages)


def suite_gradients(include_model: bool = True) -> list[CheckResult]:
    out = []
    for name, f, inputs, step in op_gradient_cases():
        res = grad_check(f, inputs, step=step)
        out.append(CheckResult("gradients", name, res.max_rel_error <= GRAD_TOLERANCE,
                               f"max rel error {res.max_rel_error:.2e} over {res.checked} entries"))
    if include_model:
        res, n = full_model_gradient()
        covered = sum(c > 0 for c in res.checked_per_input[:n])
        out.append(CheckResult("gradients", "full_model",
                               res.max_rel_error <= GRAD_TOLERANCE and covered == n,
                               f"max rel error {res.max_rel_error:.2e} over {res.checked} entries "
                               f"({res.skipped} straddling a kink); {covered}/{n} parameter tensors covered"))
    return out


def suite_warp(seeds: int = 20) -> list[CheckResult]:
    identity_ok, translate_ok = True, True
    for s in range(seeds):
        r = _rng(1000 + s)
        h, w = int(r.integers(5, 17)), int(r.integers(5, 17))
        src = r.random((2, h, w, 3)).astype(np.float32)
        out = backward_warp(Tensor(src), Tensor(np.zeros((2, h, w, 2), np.float32)))
        identity_ok &= bool(np.array_equal(out.data, src))
        dx, dy = int(r.integers(-3, 4)), int(r.integers(-3, 4))
        flow = np.zeros((2, h, w, 2), np.float32)
        flow[..., 0], flow[..., 1] = dx, dy
        out = backward_warp(Tensor(src), Tensor(flow)).data
        ys = slice(max(0, -dy), h - max(0, dy))
        xs = slice(max(0, -dx), w - max(0, dx))
        expect = src[:, max(0, dy):h + min(0, dy), max(0, dx):w + min(0, dx)]
        translate_ok &= bool(np.array_equal(out[:, ys, xs], expect))
    return [CheckResult("warp", "zero_flow_identity", identity_ok, f"{seeds} seeds"),
            CheckResult("warp", "integer_translation", translate_ok, f"{seeds} seeds")]


def suite_losses() -> list[CheckResult]:
    critic = FeatureCritic.builtin()
    img = Tensor(_rng(3).random((2, 16, 16, 3)).astype(np.float32))
    zeros = [float(loss_l1(img, img).data), float(loss_perceptual(img, img, critic).data),
             float(loss_gram(img, img, critic).data)]
    feats = _rng(4).standard_normal((2, 5, 6, 7))
    g = gram_matrix(Tensor(feats)).data
    sym = bool(np.array_equal(g, np.swapaxes(g, 1, 2)))
    min_eig = float(min(np.linalg.eigvalsh(m).min() for m in g))
    perm = _rng(5).permutation(5 * 6)
    shuffled = feats.reshape(2, 30, 7)[:, perm].reshape(2, 5, 6, 7)
    perm_err = float(np.abs(gram_matrix(Tensor(shuffled)).data - g).max())
    return [
        CheckResult("losses", "zero_on_identical", all(z == 0 for z in zeros), f"values {zeros}"),
        CheckResult("losses", "gram_symmetric_psd", sym and min_eig >= -1e-6, f"min eigenvalue {min_eig:.2e}"),
        CheckResult("losses", "gram_permutation_invariant", perm_err <= 1e-12, f"max diff {perm_err:.1e}"),
    ]


def suite_schedule() -> list[CheckResult]:
    from film.train import TrainConfig, lr_schedule

    sched = LossWeightSchedule.style(1000)
    before, after = sched.weights(499), sched.weights(500)
    cfg = TrainConfig()
    lr0, lr1 = lr_schedule(0, cfg), lr_schedule(cfg.decay_every, cfg)
    return [
        CheckResult("schedule", "loss_weights", before == (1.0, 1.0, 0.0) and after == (1.0, 0.25, 40.0),
                    f"{before} -> {after}"),
        CheckResult("schedule", "learning_rate", abs(lr0 - 1e-4) <= 1e-12 and abs(lr1 - 4.64e-5) <= 1e-12,
                    f"lr(0)={lr0:.3g} lr(decay)={lr1:.3g}"),
    ]


def suite_sharing() -> list[CheckResult]:
    sizes = {}
    groups_ok = True
    for levels in (4, 5, 7):
        store = FilmModel(PyramidConfig(levels=levels)).params
        sizes[levels] = store.size("extractor/")
        keys = {k.split("/")[1] for k in store.storages() if k.startswith("flow/")}
        groups_ok &= keys == {"l1", "l2", "shared"}
    return [
        CheckResult("sharing", "extractor_size_constant", len(set(sizes.values())) == 1, f"sizes {sizes}"),
        CheckResult("sharing", "flow_groups", groups_ok, "one shared group plus levels 1 and 2"),
    ]


SUITES = {
    "gradients": suite_gradients,
    "warp": suite_warp,
    "losses": suite_losses,
    "schedule": suite_schedule,
    "sharing": suite_sharing,
}


def run_selfcheck(names=None, echo=print) -> bool:
    """Run the named suites (all by default); returns True when every check passes."""
    ok = True
    for name in names or SUITES:
        t0 = time.perf_counter()
        results = SUITES[name]()
        passed = sum(r.passed for r in results)
        echo(f"{name}: {passed}/{len(results)} passed ({time.perf_counter() - t0:.1f}s)")
        for r in results:
            if not r.passed:
                echo(f"  FAIL {r.name}: {r.detail}")
        ok &= passed == len(results)
    return ok
