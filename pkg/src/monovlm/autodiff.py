"""Reverse-mode automatic differentiation over numpy arrays.

A small tape-based engine: every differentiable operation records its input
tensors and a vector-Jacobian closure on the output, and ``backward()`` walks
the recorded graph once in reverse topological order, accumulating gradients
additively across fan-out. Tensors are immutable once produced by an op;
gradients live in ``Tensor.grad``.

Arrays are plain ``np.ndarray`` at float32 (training) or float64 (gradient
checks). Inside a ``no_grad()`` block no graph is recorded, so forward-only
code (teachers, generation, evaluation) pays no tape overhead.
"""

from __future__ import annotations

import contextlib
import math
from typing import Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """A NaN/Inf was produced or consumed where finite values are required."""


class DegenerateBatchError(ValueError):
    """A reduction was requested over an empty selection (e.g. all-masked loss)."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block. Nesting is fine."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """An n-dimensional array with an optional gradient.

    ``requires_grad`` tensors created by operations carry references to their
    parents and a VJP closure; leaves (parameters, constants) carry neither.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if requires_grad and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not np.isfinite(self.data).all():
            raise NumericError(f"{what} contains non-finite values")
        return self

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self.op}{flag})"

    # -- graph --------------------------------------------------------------

    def parents(self) -> tuple["Tensor", ...]:
        return self._parents

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every requires_grad tensor reachable from here.

        The root must be a scalar unless ``grad`` supplies the seed. Gradients
        add into any existing ``.grad`` (call ``zero_grad`` between steps).
        """
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed requires a scalar loss")
            grad = np.ones_like(self.data)
        order = topo_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def topo_order(root: Tensor) -> list[Tensor]:
    """Requires-grad subgraph under ``root``, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def vjp(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), vjp, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), vjp, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), vjp, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    data = a.data**p

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(data, (a,), vjp, "pow")


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: (g * data,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * data * (1.0 - data),)

    return _make(data, (a,), vjp, "sigmoid")


def silu(a: Tensor) -> Tensor:
    return mul(a, sigmoid(a))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; stacked on leading dims via numpy broadcasting rules."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(data, (a, b), vjp, "matmul")


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(data, (a,), vjp, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), Tensor(np.asarray(1.0 / count, dtype=a.dtype)))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = a.data.reshape(shape)
    return _make(data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)
    data = a.data.transpose(axes)
    return _make(data, (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    """Basic indexing only (ints/slices/Ellipsis); the VJP writes into a view."""
    data = a.data[idx]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[idx] += g
        return (full,)

    return _make(data, (a,), vjp, "getitem")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding ids out of range")
    data = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(data, (table,), vjp, "embedding")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        grads = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                grads.append(g[tuple(sl)])
            else:
                grads.append(None)
        return tuple(grads)

    return _make(data, tuple(tensors), vjp, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(
            np.take(g, i, axis=axis) if t.requires_grad else None
            for i, t in enumerate(tensors)
        )

    return _make(data, tuple(tensors), vjp, "stack")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Row-stabilized softmax; -inf entries get exactly zero weight."""
    m = x.data.max(axis=axis, keepdims=True)
    if np.isnan(m).any() or np.isposinf(m).any():
        raise NumericError("softmax input is not finite")
    e = np.exp(x.data - m)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - dot),)

    return _make(p, (x,), vjp, "softmax")


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to unit RMS (plus eps) and scale by ``gain``."""
    c = x.shape[-1] if x.ndim else 0
    if c < 1:
        raise ShapeError("rms_norm needs a non-empty feature axis")
    if gain.shape != (c,):
        raise ShapeError(f"rms_norm gain shape {gain.shape} does not match feature dim {c}")
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    data = x.data * inv * gain.data

    def vjp(g):
        gx = ggain = None
        if x.requires_grad:
            gg = g * gain.data
            dot = (gg * x.data).sum(axis=-1, keepdims=True)
            gx = gg * inv - x.data * (inv**3) * dot / c
        if gain.requires_grad:
            ggain = (g * x.data * inv).reshape(-1, c).sum(axis=0)
        return gx, ggain

    return _make(data, (x, gain), vjp, "rms_norm")


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """Per-row cosine of the last axis; result drops that axis."""
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity shapes differ: {a.shape} vs {b.shape}")
    dot = tensor_sum(mul(a, b), axis=-1)
    na = power(tensor_sum(mul(a, a), axis=-1), 0.5)
    nb = power(tensor_sum(mul(b, b), axis=-1), 0.5)
    denom = add(mul(na, nb), Tensor(np.asarray(eps, dtype=a.dtype)))
    return div(dot, denom)


def cross_entropy(logits: Tensor, targets: np.ndarray, loss_mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood over unmasked rows, via log-sum-exp.

    ``logits`` is (n, v); ``targets`` integer (n,); ``loss_mask`` boolean (n,)
    selecting the rows that contribute (all rows when None).
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-D logits, got {logits.shape}")
    n, v = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} does not match logits rows {n}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ValueError("cross_entropy targets out of vocabulary range")
    if loss_mask is None:
        mask = np.ones(n, dtype=bool)
    else:
        mask = np.asarray(loss_mask, dtype=bool)
        if mask.shape != (n,):
            raise ShapeError(f"loss_mask shape {mask.shape} does not match logits rows {n}")
    count = int(mask.sum())
    if count == 0:
        raise DegenerateBatchError("cross_entropy over an all-masked batch")

    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    sums = e.sum(axis=1, keepdims=True)
    lse = np.log(sums) + m
    nll = lse[:, 0] - z[np.arange(n), targets]
    loss = np.asarray((nll * mask).sum() / count, dtype=z.dtype)

    def vjp(g):
        probs = e / sums
        probs[np.arange(n), targets] -= 1.0
        probs *= (mask / count)[:, None]
        return (probs * g,)

    return _make(loss, (logits,), vjp, "cross_entropy")
