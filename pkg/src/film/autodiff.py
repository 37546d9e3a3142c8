"""Tensor type and reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable operation creates
a node holding its parents and a backward rule; :func:`backward` visits the
reachable nodes exactly once in reverse creation order, which is the order a
tape would have recorded them in.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Optional, Sequence

import numpy as np

_counter = itertools.count()
_grad_enabled = True
_active_tapes: list["Tape"] = []
_branch_logs: list[list[bytes]] = []

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Dense real array with an optional gradient accumulator.

    Image-like values are rank 4 ``(batch, height, width, channels)``; losses
    are rank 0. ``grad`` is ``None`` until a backward pass reaches the tensor.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._seq = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Operator sugar; the implementations live in film.ops.
    def __add__(self, other):
        from film import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from film import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from film import ops
        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scalar_mul(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        from film import ops
        return ops.scalar_mul(self, -1.0)


class Tape:
    """Records operation nodes in execution order.

    Use as a context manager; nodes created inside the block are appended to
    :attr:`nodes`. Passing the tape to :func:`backward` restricts the pass to
    the recorded nodes.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def record_branches():
    """Collect the branch pattern of every piecewise operation run inside the block.

    Finite-difference checks compare patterns to notice when a perturbation
    crosses a kink (a rectifier switching sides, a warp sample changing cell).
    """
    log: list[bytes] = []
    _branch_logs.append(log)
    try:
        yield log
    finally:
        _branch_logs.remove(log)


def note_branch(*patterns: np.ndarray) -> None:
    """Record discrete branch choices; a no-op unless a recorder is active."""
    if not _branch_logs:
        return
    for pattern in patterns:
        blob = np.ascontiguousarray(pattern).tobytes()
        for log in _branch_logs:
            log.append(blob)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap ``data`` as the output of an operation on ``parents``."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        for tape in _active_tapes:
            tape.nodes.append(out)
    return out


def _reachable(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    order: list[Tensor] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._backward is not None:
            order.append(node)
            stack.extend(p for p in node._parents if p.requires_grad)
    return order


def backward(loss: Tensor, tape: Optional[Tape] = None) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients are added to existing ``.grad`` values; clearing them between
    steps is the caller's job. Returns a map from ``id(leaf)`` to the gradient
    contributed by this call.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss is detached from every tensor that requires grad")

    if tape is not None:
        reach = {id(n) for n in _reachable(loss)}
        nodes = [n for n in reversed(tape.nodes) if id(n) in reach]
        if loss._backward is not None and (not nodes or nodes[0] is not loss):
            raise RuntimeError("tape does not cover the loss computation")
    else:
        nodes = sorted(_reachable(loss), key=lambda n: n._seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss._backward is None:
        leaves[id(loss)] = loss
    for node in nodes:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if parent._backward is None:
                leaves[key] = parent

    contributed: dict[int, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = g.astype(leaf.dtype, copy=False)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        contributed[key] = g
    return contributed
