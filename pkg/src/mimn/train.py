"""Adam + L2 training loop with early stopping, evaluation, ensembling and checkpoints."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Batch, Example, Vocabulary, make_batches
from .model import ModelConfig, Parameters, forward_logits, init_params, param_shapes, softmax
from .tensor import Tensor

log = logging.getLogger(__name__)

MAGIC = b"MIMN"
FORMAT_VERSION = 1
EMBEDDING_KEY = "embedding"


class DivergenceError(RuntimeError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2_coeff: float = 3e-4
    patience: int = 10
    max_epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")


@dataclass
class Checkpoint:
    """A trained model: parameters, architecture, vocabulary and the fixed embeddings."""

    params: Parameters
    config: ModelConfig
    vocab: Vocabulary
    embeddings: np.ndarray  # [V, r], never trained

    def copy(self) -> "Checkpoint":
        tensors = {k: Tensor(t.data.copy(), requires_grad=True) for k, t in self.params.named().items()}
        return Checkpoint(Parameters.from_named(tensors), self.config, self.vocab, self.embeddings)


# -- optimisation ---------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: OptimizerState) -> None:
    """Bias-corrected Adam update applied in place to every tensor in `params`."""
    missing = [k for k, p in params.items() if p.grad is None]
    if missing:
        raise ValueError(f"no gradient for trainable tensors {missing}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)


def is_weight_matrix(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in ("w", "w_ih", "w_hh")


def regularized_loss(batch_loss: Tensor, params: Parameters | dict[str, Tensor], l2_coeff: float) -> Tensor:
    """batch_loss + l2_coeff * sum of squared weight-matrix entries (biases excluded)."""
    if l2_coeff == 0:
        return batch_loss
    named = params.named() if isinstance(params, Parameters) else params
    penalty = None
    for name, w in named.items():
        if not is_weight_matrix(name):
            continue
        sq = T.sum_all(T.mul(w, w))
        penalty = sq if penalty is None else T.add(penalty, sq)
    if penalty is None:
        return batch_loss
    return T.add(batch_loss, T.mul(penalty, l2_coeff))


# -- model evaluation ---------------------------------------------------------------------


def embed(ids: np.ndarray, table: np.ndarray, dtype) -> np.ndarray:
    return table[ids].astype(dtype, copy=False)


def batch_logits(model: Checkpoint, batch: Batch, training: bool = False, rng=None) -> Tensor:
    dtype = model.params.mlp_out.w.dtype
    return forward_logits(embed(batch.premise, model.embeddings, dtype),
                          embed(batch.hypothesis, model.embeddings, dtype),
                          batch.premise_mask, batch.hypothesis_mask,
                          model.params, model.config, training, rng)


def predict_proba(model: Checkpoint, examples: Sequence[Example], batch_size: int = 64) -> np.ndarray:
    """Label distributions [N, C] in input order, dropout off."""
    out = []
    with T.no_grad():
        for batch in make_batches(examples, batch_size, model.vocab):
            out.append(softmax(batch_logits(model, batch).data.astype(np.float64)))
    return np.concatenate(out, axis=0)


def accuracy_report(probs: np.ndarray, examples: Sequence[Example], labels: Sequence[str]) -> dict:
    gold = np.array([ex.label for ex in examples])
    pred = probs.argmax(axis=1)
    correct = pred == gold
    per_label = {}
    counts = {}
    for i, name in enumerate(labels):
        sel = gold == i
        counts[name] = int(sel.sum())
        per_label[name] = float(correct[sel].mean()) if sel.any() else None
    return {"accuracy": float(correct.mean()), "per_label": per_label, "counts": counts,
            "n": int(len(gold))}


def evaluate(model: Checkpoint, examples: Sequence[Example], batch_size: int = 64) -> dict:
    """Overall and per-gold-label accuracy."""
    if not examples:
        raise ValueError("cannot evaluate on an empty set")
    return accuracy_report(predict_proba(model, examples, batch_size), examples, model.config.labels)


def ensemble_proba(models: Sequence[Checkpoint], examples: Sequence[Example]) -> np.ndarray:
    if not models:
        raise ValueError("ensemble needs at least one member")
    ref = models[0].config.to_dict()
    for m in models[1:]:
        if m.config.to_dict() != ref:
            raise ValueError("ensemble members have different model configs")
    probs = [predict_proba(m, examples) for m in models]
    return sum(probs[1:], probs[0]) / len(probs)


def ensemble_eval(models: Sequence[Checkpoint], examples: Sequence[Example]) -> dict:
    """Average member distributions per example, then take the arg-max."""
    return accuracy_report(ensemble_proba(models, examples), examples, models[0].config.labels)


# -- training loop ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    best: Checkpoint
    history: list[dict]
    best_epoch: int
    stopped_early: bool


def train(model: Checkpoint, train_set: Sequence[Example], valid_set: Sequence[Example],
          cfg: TrainConfig, progress=None) -> TrainResult:
    """Train `model` in place; return a copy of the parameters with the best validation accuracy.

    Patience counts epochs without a strict improvement in validation accuracy.
    """
    if not train_set or not valid_set:
        raise ValueError("train and validation sets must be nonempty")
    state = OptimizerState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    dropout_rng = np.random.default_rng([cfg.seed, 1])
    named = model.params.named()
    history: list[dict] = []
    best: Checkpoint | None = None
    best_acc, best_epoch, bad_epochs = -1.0, 0, 0
    stopped_early = False
    for epoch in range(1, cfg.max_epochs + 1):
        batches = make_batches(train_set, cfg.batch_size, model.vocab, shuffle_seed=cfg.seed * 100_003 + epoch)
        losses = []
        for bi, batch in enumerate(batches):
            model.params.zero_grad()
            try:
                logits = batch_logits(model, batch, training=True, rng=dropout_rng)
                loss = regularized_loss(T.cross_entropy(logits, batch.labels), named, cfg.l2_coeff)
            except FloatingPointError as exc:
                raise DivergenceError(f"epoch {epoch}, batch {bi}: {exc}") from exc
            if not np.isfinite(loss.data):
                raise DivergenceError(f"epoch {epoch}, batch {bi}: non-finite loss")
            T.backward(loss)
            adam_step(named, state)
            losses.append(float(loss.data))
        train_acc = evaluate(model, train_set)["accuracy"]
        valid_acc = evaluate(model, valid_set)["accuracy"]
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                        "train_accuracy": train_acc, "valid_accuracy": valid_acc})
        if progress is not None:
            progress(history[-1])
        log.info("epoch %d loss %.4f train %.4f valid %.4f", epoch, history[-1]["train_loss"],
                 train_acc, valid_acc)
        if valid_acc > best_acc:
            best_acc, best_epoch, bad_epochs = valid_acc, epoch, 0
            best = model.copy()
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                stopped_early = True
                break
    assert best is not None
    return TrainResult(best, history, best_epoch, stopped_early)


def new_model(config: ModelConfig, vocab: Vocabulary, embeddings: np.ndarray, seed: int = 0,
              dtype=np.float32) -> Checkpoint:
    if embeddings.shape != (len(vocab), config.embed_dim):
        raise ValueError(f"embedding table {embeddings.shape} does not match vocab {len(vocab)} "
                         f"x embed_dim {config.embed_dim}")
    return Checkpoint(init_params(config, seed, dtype), config, vocab, embeddings)


# -- checkpoint file ----------------------------------------------------------------------------
#
# layout: b"MIMN" | u32 version | u32 header_len | header JSON (UTF-8) | payload
# payload: little-endian float32 tensors back to back, in header table order


def save_checkpoint(model: Checkpoint, path: str | Path) -> None:
    tensors = dict(model.params.named())
    arrays = {k: np.ascontiguousarray(t.data, dtype="<f4") for k, t in tensors.items()}
    arrays[EMBEDDING_KEY] = np.ascontiguousarray(model.embeddings, dtype="<f4")
    table, offset = [], 0
    for name, arr in arrays.items():
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = json.dumps({"config": model.config.to_dict(), "vocab": model.vocab.to_list(),
                         "tensors": table, "payload_bytes": offset}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        for arr in arrays.values():
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise CheckpointFormatError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if 12 + hlen > len(raw):
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        vocab = Vocabulary.from_list(header["vocab"])
        table = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable header ({exc})") from None
    payload = raw[12 + hlen:]
    expected = 0
    arrays = {}
    for entry in table:
        shape = tuple(int(s) for s in entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * 4
        if entry["offset"] != expected:
            raise CheckpointFormatError(f"{path}: tensor {entry['name']} offset {entry['offset']} != {expected}")
        if expected + n > len(payload):
            raise CheckpointFormatError(f"{path}: truncated payload at tensor {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(payload, dtype="<f4", count=n // 4, offset=expected).reshape(shape).astype(np.float32)
        expected += n
    if expected != len(payload) or header.get("payload_bytes", expected) != expected:
        raise CheckpointFormatError(f"{path}: payload is {len(payload)} bytes, table describes {expected}")
    want = param_shapes(config)
    got = {k: v.shape for k, v in arrays.items() if k != EMBEDDING_KEY}
    if got != want:
        raise CheckpointFormatError(f"{path}: tensor table does not match the declared architecture")
    if EMBEDDING_KEY not in arrays or arrays[EMBEDDING_KEY].shape != (len(vocab), config.embed_dim):
        raise CheckpointFormatError(f"{path}: embedding table missing or misshapen")
    tensors = {k: Tensor(v, requires_grad=True) for k, v in arrays.items() if k != EMBEDDING_KEY}
    return Checkpoint(Parameters.from_named(tensors), config, vocab, arrays[EMBEDDING_KEY])


def history_json(history: list[dict], extra: dict | None = None) -> str:
    doc = {"history": history}
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


__all__ = [
    "TrainConfig", "Checkpoint", "OptimizerState", "adam_step", "regularized_loss", "train",
    "evaluate", "ensemble_eval", "ensemble_proba", "predict_proba", "save_checkpoint",
    "load_checkpoint", "new_model", "DivergenceError", "CheckpointFormatError", "history_json",
]
