"""Minimal reverse-mode autodiff over dense numpy arrays.

Every primitive records its inputs and a backward closure on the output
tensor. Tensors carry a monotonically increasing creation id, so the
backward pass simply visits reachable nodes in reverse creation order.

Shapes follow a batch-outer, row-major convention. Binary ops require
identical shapes, with two exceptions: a trailing bias vector may be added
row-wise, and a Python scalar may stand in for either operand.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "DegenerateInputError",
    "Tensor",
    "no_grad",
    "corrupt_backward",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "elementwise",
    "relu",
    "tanh",
    "sigmoid",
    "activation",
    "softmax_masked",
    "concat",
    "slice_axis",
    "take",
    "stack",
    "where",
    "reduce",
    "sum_all",
    "mean_all",
    "log",
    "cross_entropy",
    "backward",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(ValueError):
    """A reduction or normalisation has no valid (unmasked) positions."""


_ids = itertools.count()
_grad_enabled = True
# op name -> multiplicative factor applied to that op's input gradients.
_faults: dict[str, float] = {}
# Names recorded on graph nodes; `reduce` records its kind.
RECORDED_OPS = frozenset({
    "matmul", "transpose", "add", "sub", "mul", "relu", "tanh", "sigmoid", "log",
    "softmax_masked", "mean", "max", "sum_all", "mean_all", "cross_entropy", "concat",
    "slice_axis", "take", "stack", "where",
})


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def corrupt_backward(op: str, factor: float = 1.01):
    """Scale the input gradients of every `op` node by `factor`.

    Exists as a negative control for gradient checking.
    """
    if op not in RECORDED_OPS:
        raise ValueError(f"unknown op {op!r}; expected one of {sorted(RECORDED_OPS)}")
    _faults[op] = factor
    try:
        yield
    finally:
        _faults.pop(op, None)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_ids)

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = False
        t.op = "const"
        t._parents = ()
        t._backward = None
        t._id = next(_ids)
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def _record(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    # a non-finite sum means a non-finite entry (or overflow, also an error)
    if not np.isfinite(data.sum()):
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor._wrap(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    `a` may carry leading batch axes. `b` is either a plain matrix shared
    across the batch or has the same leading axes as `a`.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    shared = b.data.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes differ, {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if shared:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _record("matmul", out, (a, b), bw)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    x = _as_tensor(x)
    if x.data.ndim < 2:
        raise DimensionError(f"transpose needs >= 2 axes, got {x.shape}")
    return _record("transpose", np.swapaxes(x.data, -1, -2), (x,),
                   lambda g: (np.swapaxes(g, -1, -2),))


# -- elementwise --------------------------------------------------------------


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> str:
    """Classify operand shapes: 'same', 'bias' (b is a trailing vector), 'scalar_a', 'scalar_b'."""
    if a.shape == b.shape:
        return "same"
    if b.data.ndim == 0:
        return "scalar_b"
    if a.data.ndim == 0:
        return "scalar_a"
    if op == "add" and b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "bias"
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not agree")


def _reduce_to(g: np.ndarray, kind: str, side: str) -> np.ndarray:
    if kind == "bias" and side == "b":
        return g.reshape(-1, g.shape[-1]).sum(axis=0)
    if (kind == "scalar_b" and side == "b") or (kind == "scalar_a" and side == "a"):
        return np.asarray(g.sum(), dtype=g.dtype)
    return g


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    kind = _binary_shapes("add", a, b)
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_reduce_to(g, kind, "a"), _reduce_to(g, kind, "b")))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    kind = _binary_shapes("sub", a, b)
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_reduce_to(g, kind, "a"), _reduce_to(-g, kind, "b")))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    kind = _binary_shapes("mul", a, b)
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (_reduce_to(g * b.data, kind, "a"), _reduce_to(g * a.data, kind, "b")))


def elementwise(a, b, kind: str) -> Tensor:
    try:
        fn = {"add": add, "sub": sub, "mul": mul}[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(a, b)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    pos = x.data > 0
    return _record("relu", np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return _record("tanh", y, (x,), lambda g: (g * (1 - y * y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form: no overflow for large |z|, exactly 0.5 at 0
    return 0.5 + 0.5 * np.tanh(0.5 * z)


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = _sigmoid(x.data)
    return _record("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "linear":
        return _as_tensor(x)
    try:
        fn = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return _record("log", np.log(x.data), (x,), lambda g: (g / x.data,))


# -- masked normalisation and pooling -------------------------------------------


def softmax_masked(scores: Tensor, mask) -> Tensor:
    """Softmax over the last axis; masked-out positions get exactly 0.

    `mask` is a boolean array broadcastable to `scores`.
    """
    scores = _as_tensor(scores)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
    if not mask.any(axis=-1).all():
        raise DegenerateInputError("softmax over a fully masked row")
    z = np.where(mask, scores.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0).astype(scores.dtype)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax_masked", y, (scores,), bw)


def reduce(x: Tensor, mask, kind: str) -> Tensor:
    """Masked max or mean over axis -2 (the sequence axis).

    x: [..., n, h]; mask: boolean [..., n]. Returns [..., h].
    Max routes its gradient to the first arg-max row.
    """
    x = _as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    if x.data.ndim < 2 or mask.shape != x.shape[:-1]:
        raise DimensionError(f"reduce: mask {mask.shape} does not fit tensor {x.shape}")
    if not mask.any(axis=-1).all():
        raise DegenerateInputError("reduce over a fully masked sequence")
    m = mask[..., None]
    if kind == "mean":
        count = mask.sum(axis=-1, keepdims=True).astype(x.dtype)
        y = np.where(m, x.data, 0).sum(axis=-2) / count

        def bw(g):
            return (np.where(m, (g / count)[..., None, :], 0).astype(x.dtype),)

        return _record("mean", y, (x,), bw)
    if kind == "max":
        masked = np.where(m, x.data, -np.inf)
        idx = masked.argmax(axis=-2)  # argmax returns the first occurrence
        y = np.take_along_axis(x.data, idx[..., None, :], axis=-2)[..., 0, :]

        def bw(g):
            gx = np.zeros_like(x.data)
            np.put_along_axis(gx, idx[..., None, :], g[..., None, :], axis=-2)
            return (gx,)

        return _record("max", y, (x,), bw)
    raise ValueError(f"unknown reduction {kind!r}")


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return _record("sum_all", np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.full_like(x.data, g),))


def mean_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size
    return _record("mean_all", np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                   lambda g: (np.full_like(x.data, g / n),))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer `labels` under softmax(logits).

    logits: [B, C]. Computed through log-sum-exp, so confident wrong
    predictions stay finite.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != logits.shape[:1]:
        raise DimensionError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= logits.shape[1]:
        raise ValueError("gold label outside the label set")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(labels))
    nll = lse - z[rows, labels]
    probs = np.exp(z - lse[:, None])
    B = len(labels)

    def bw(g):
        d = probs.copy()
        d[rows, labels] -= 1
        return (d * (g / B),)

    return _record("cross_entropy", np.asarray(nll.mean(), dtype=logits.dtype), (logits,), bw)


# -- structural -----------------------------------------------------------------


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat of an empty list")
    nd = parts[0].data.ndim
    ax = axis % nd
    ref = parts[0].shape
    for p in parts[1:]:
        if p.data.ndim != nd or any(s != r for i, (s, r) in enumerate(zip(p.shape, ref)) if i != ax):
            raise DimensionError(f"concat: extents {ref} and {p.shape} disagree off axis {axis}")
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]
    out = np.concatenate([p.data for p in parts], axis=ax)
    return _record("concat", out, parts, lambda g: tuple(np.split(g, bounds, axis=ax)))


def slice_axis(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    ax = axis % x.data.ndim
    idx = [slice(None)] * x.data.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _record("slice_axis", x.data[idx], (x,), bw)


def take(x: Tensor, i: int, axis: int) -> Tensor:
    """Select index `i` along `axis`, dropping that axis."""
    x = _as_tensor(x)
    ax = axis % x.data.ndim
    idx = [slice(None)] * x.data.ndim
    idx[ax] = i
    idx = tuple(idx)

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _record("take", x.data[idx], (x,), bw)


def stack(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if any(p.shape != parts[0].shape for p in parts):
        raise DimensionError("stack: all parts must share a shape")
    out = np.stack([p.data for p in parts], axis=axis)
    ax = axis % out.ndim
    n = len(parts)
    return _record("stack", out, parts,
                   lambda g: tuple(np.take(g, i, axis=ax) for i in range(n)))


def where(mask, a, b) -> Tensor:
    """Select `a` where `mask` holds, else `b`.

    `mask` is a constant broadcastable to the tensor operand's shape; either
    branch may be a Python scalar.
    """
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    if a.shape != b.shape and a.data.ndim and b.data.ndim:
        raise DimensionError(f"where: shapes {a.shape} and {b.shape} do not agree")
    shape = a.shape if a.data.ndim else b.shape
    m = np.broadcast_to(np.asarray(mask, dtype=bool), shape)
    zero = np.zeros((), dtype=a.dtype)

    def bw(g):
        ga, gb = np.where(m, g, zero), np.where(m, zero, g)
        if not a.data.ndim:
            ga = np.asarray(ga.sum(), dtype=g.dtype)
        if not b.data.ndim:
            gb = np.asarray(gb.sum(), dtype=g.dtype)
        return ga, gb

    return _record("where", np.where(m, a.data, b.data).astype(a.dtype, copy=False), (a, b), bw)


# -- backward -------------------------------------------------------------------


def _reachable(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack_: list[Tensor] = [root]
    while stack_:
        t = stack_.pop()
        if t._id in seen:
            continue
        seen.add(t._id)
        nodes.append(t)
        stack_.extend(p for p in t._parents if p.requires_grad)
    return nodes


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every requires_grad leaf reachable from scalar `loss`.

    Gradients accumulate into existing `.grad` arrays; callers zero them
    between steps.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    # creation ids are execution order, so descending id is a reverse topological order
    nodes = sorted(_reachable(loss), key=lambda t: t._id, reverse=True)
    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for node in nodes:
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        factor = _faults.get(node.op)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad:
                continue
            if factor is not None:
                pg = pg * factor
            if p._id in grads:
                grads[p._id] = grads[p._id] + pg
            else:
                grads[p._id] = pg


Tensor.backward = backward  # type: ignore[attr-defined]

