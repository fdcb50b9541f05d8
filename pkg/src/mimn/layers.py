"""Recurrent and feed-forward building blocks on top of `mimn.tensor`.

Weight matrices are stored input-major (``[in, out]``) so a batch of row
vectors multiplies on the left: ``y = x @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

# Gate layout inside the fused 4h axis.
GATE_ORDER = ("input", "forget", "cell", "output")
FORGET_BIAS = 1.0


@dataclass
class LstmWeights:
    w_ih: Tensor  # [in, 4h]
    w_hh: Tensor  # [h, 4h]
    b: Tensor  # [4h]

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_ih.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"w_ih": self.w_ih, "w_hh": self.w_hh, "b": self.b}


@dataclass
class DenseWeights:
    w: Tensor  # [in, out]
    b: Tensor | None  # [out]
    activation: str = "linear"

    def tensors(self) -> dict[str, Tensor]:
        out = {"w": self.w}
        if self.b is not None:
            out["b"] = self.b
        return out


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def init_lstm(rng: np.random.Generator, input_size: int, hidden: int, dtype=np.float32) -> LstmWeights:
    # Glorot per gate block, so the 4h fusion does not shrink the scale
    w_ih = np.concatenate([glorot(rng, input_size, hidden, dtype) for _ in range(4)], axis=1)
    w_hh = np.concatenate([glorot(rng, hidden, hidden, dtype) for _ in range(4)], axis=1)
    b = np.zeros(4 * hidden, dtype=dtype)
    b[hidden:2 * hidden] = FORGET_BIAS
    return LstmWeights(Tensor(w_ih, requires_grad=True), Tensor(w_hh, requires_grad=True),
                       Tensor(b, requires_grad=True))


def init_dense(rng: np.random.Generator, n_in: int, n_out: int, activation: str = "linear",
               bias: bool = True, dtype=np.float32) -> DenseWeights:
    w = Tensor(glorot(rng, n_in, n_out, dtype), requires_grad=True)
    b = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True) if bias else None
    return DenseWeights(w, b, activation)


def dense(x: Tensor, w: DenseWeights) -> Tensor:
    """activation(x @ W + b) over the last axis of `x`."""
    if x.shape[-1] != w.w.shape[0]:
        raise DimensionError(f"dense: input width {x.shape[-1]} != weight rows {w.w.shape[0]}")
    squeeze = x.data.ndim == 1
    y = T.matmul(_row(x) if squeeze else x, w.w)
    if w.b is not None:
        y = T.add(y, w.b)
    y = T.activation(y, w.activation)
    return T.take(y, 0, 0) if squeeze else y


def _lstm_gates(z: Tensor, c_prev: Tensor, h: int) -> tuple[Tensor, Tensor]:
    ifo_pre = T.concat([T.slice_axis(z, 0, 2 * h), T.slice_axis(z, 3 * h, 4 * h)])
    ifo = T.sigmoid(ifo_pre)
    i = T.slice_axis(ifo, 0, h)
    f = T.slice_axis(ifo, h, 2 * h)
    o = T.slice_axis(ifo, 2 * h, 3 * h)
    g = T.tanh(T.slice_axis(z, 2 * h, 3 * h))
    c = T.add(T.mul(f, c_prev), T.mul(i, g))
    return T.mul(o, T.tanh(c)), c


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, w: LstmWeights) -> tuple[Tensor, Tensor]:
    """One LSTM step. Works on a single vector or a batch of row vectors."""
    if x.shape[-1] != w.input_size or h_prev.shape[-1] != w.hidden or c_prev.shape != h_prev.shape:
        raise DimensionError(
            f"lstm_cell: x {x.shape}, h {h_prev.shape}, c {c_prev.shape} vs weights "
            f"in={w.input_size} h={w.hidden}")
    squeeze = x.data.ndim == 1
    if squeeze:
        x, h_prev, c_prev = (_row(t) for t in (x, h_prev, c_prev))
    z = T.add(T.add(T.matmul(x, w.w_ih), T.matmul(h_prev, w.w_hh)), w.b)
    h, c = _lstm_gates(z, c_prev, w.hidden)
    if squeeze:
        h, c = T.take(h, 0, 0), T.take(c, 0, 0)
    return h, c


def _row(t: Tensor) -> Tensor:
    return T.stack([t], axis=0)


def lstm_scan(seq: Tensor, mask: np.ndarray, w: LstmWeights, reverse: bool = False) -> Tensor:
    """Run one LSTM direction over ``seq`` [B, n, in] and return [B, n, h].

    State only advances at unmasked steps, so a reverse pass over a
    right-padded row starts from a zero state at its last real token.
    """
    B, n, _ = seq.shape
    h_size = w.hidden
    dtype = seq.dtype
    xw = T.add(T.matmul(seq, w.w_ih), w.b)
    h = Tensor._wrap(np.zeros((B, h_size), dtype=dtype))
    c = Tensor._wrap(np.zeros((B, h_size), dtype=dtype))
    outs: list[Tensor | None] = [None] * n
    steps = range(n - 1, -1, -1) if reverse else range(n)
    for t in steps:
        z = T.add(T.take(xw, t, axis=1), T.matmul(h, w.w_hh))
        h_new, c_new = _lstm_gates(z, c, h_size)
        m = mask[:, t]
        if m.all():
            h, c = h_new, c_new
        else:
            col = m[:, None]
            h = T.where(col, h_new, h)
            c = T.where(col, c_new, c)
        outs[t] = h
    return T.stack(outs, axis=1)


def bilstm(seq: Tensor, mask, w_fwd: LstmWeights, w_bwd: LstmWeights) -> Tensor:
    """Bidirectional LSTM. ``seq`` is [n, in] or [B, n, in]; output is [.., n, 2h].

    Position i holds the forward and backward hidden states concatenated.
    Rows at masked positions are zero.
    """
    squeeze = seq.data.ndim == 2
    mask = np.asarray(mask, dtype=bool)
    if squeeze:
        seq = _row(seq)
        mask = mask[None, :]
    if seq.data.ndim != 3 or seq.shape[1] == 0:
        raise DimensionError(f"bilstm: expected a nonempty sequence, got {seq.shape}")
    if mask.shape != seq.shape[:2]:
        raise DimensionError(f"bilstm: mask {mask.shape} does not fit {seq.shape}")
    fwd = lstm_scan(seq, mask, w_fwd)
    bwd = lstm_scan(seq, mask, w_bwd, reverse=True)
    out = T.concat([fwd, bwd], axis=-1)
    if not mask.all():
        out = T.where(mask[..., None], out, 0.0)
    if squeeze:
        out = T.take(out, 0, 0)
    return out


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1-rate) at train time."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / np.asarray(1 - rate, dtype=x.dtype)
    return T.mul(x, Tensor._wrap(keep))
