"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from film.autodiff import Tensor, backward, record_branches

DENOM_FLOOR = 1e-8


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_input: int
    worst_index: tuple
    analytic: float
    numeric: float
    checked: int
    skipped: int = 0
    checked_per_input: list = field(default_factory=list)

    def __float__(self) -> float:
        return self.max_rel_error


def rel_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), DENOM_FLOOR)


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence,
    step: float = 1e-3,
    samples: Optional[int] = None,
    seed: int = 0,
    skip_kinks: bool = True,
    fallback_steps: Sequence[float] = (),
) -> GradCheckResult:
    """Compare reverse-mode gradients of ``f(*inputs)`` with central differences.

    ``inputs`` are arrays or tensors; each is converted to a float64 leaf.
    When ``samples`` is given, only that many randomly chosen entries of each
    input are perturbed. Raises ``RuntimeError`` if ``f`` is not deterministic.

    With ``skip_kinks`` an entry is skipped (and counted in ``skipped``) when
    either perturbation changes the branch pattern of a piecewise operation:
    the difference quotient then straddles a kink and says nothing about the
    derivative. ``fallback_steps`` are tried in order before giving up on
    such an entry.
    """
    leaves = [
        x if isinstance(x, Tensor) and x.dtype == np.float64 and x.requires_grad
        else Tensor(np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64), requires_grad=True)
        for x in inputs
    ]
    for leaf in leaves:
        leaf.grad = None
    out = f(*leaves)
    backward(out)
    with record_branches() as base_pattern:
        f(*leaves)
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]
    base = float(out.data)
    if float(f(*leaves).data) != base:
        raise RuntimeError("grad_check: function is not deterministic")

    rng = np.random.default_rng(seed)
    worst = GradCheckResult(0.0, -1, (), 0.0, 0.0, 0)
    checked = skipped = 0
    per_input = [0] * len(leaves)
    for k, leaf in enumerate(leaves):
        flat = leaf.data.reshape(-1)
        if samples is None or samples >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=samples, replace=False)
        for i in idx:
            orig = flat[i]
            for h in (step, *fallback_steps):
                flat[i] = orig + h
                with record_branches() as plus:
                    fp = float(f(*leaves).data)
                flat[i] = orig - h
                with record_branches() as minus:
                    fm = float(f(*leaves).data)
                flat[i] = orig
                smooth = not skip_kinks or (plus == base_pattern and minus == base_pattern)
                if smooth:
                    break
            if not smooth:
                skipped += 1
                continue
            num = (fp - fm) / (2 * h)
            ana = float(analytic[k].reshape(-1)[i])
            err = float(rel_error(ana, num))
            checked += 1
            per_input[k] += 1
            if err > worst.max_rel_error or worst.worst_input < 0:
                worst = GradCheckResult(err, k, np.unravel_index(i, leaf.shape), ana, num, 0)
    worst.checked = checked
    worst.skipped = skipped
    worst.checked_per_input = per_input
    return worst
