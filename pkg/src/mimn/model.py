"""Multi-turn Inference Matching Network.

Pipeline: encode (shared BiLSTM) -> align (dot-product soft attention) ->
match (three views: joint, difference, similarity) -> multi-turn inference
with a gated memory -> masked max/mean pooling -> tanh MLP -> softmax.

All functions work on batches laid out ``[B, L, features]`` with boolean
masks ``[B, L]`` that are true at real tokens.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .layers import DenseWeights, LstmWeights, bilstm, dense, dropout, init_dense, init_lstm
from .tensor import DegenerateInputError, DimensionError, Tensor

VARIANTS = ("full", "no_memory", "gate_relu", "mixed_single_turn")
NLI_LABELS = ("neutral", "entailment", "contradiction")
SCITAIL_LABELS = ("neutral", "entails")
NUM_VIEWS = 3
DROPOUT_SITES = ("embed", "inf_input", "mlp_input")


@dataclass
class ModelConfig:
    embed_dim: int = 300
    hidden: int = 300
    turns: int = 3
    variant: str = "full"
    mlp_hidden: int = 300
    dropout: float = 0.2
    labels: tuple[str, ...] = NLI_LABELS
    dropout_sites: tuple[str, ...] = DROPOUT_SITES

    def __post_init__(self):
        self.labels = tuple(self.labels)
        self.dropout_sites = tuple(self.dropout_sites)
        self.validate()

    @property
    def num_labels(self) -> int:
        return len(self.labels)

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.turns < 1:
            raise ValueError("turns must be >= 1")
        if self.variant != "mixed_single_turn" and self.turns != NUM_VIEWS:
            raise ValueError(
                f"variant {self.variant!r} takes one turn per matching view, so turns must be {NUM_VIEWS}")
        if self.num_labels not in (2, 3):
            raise ValueError(f"expected 2 or 3 labels, got {self.labels}")
        if min(self.embed_dim, self.hidden, self.mlp_hidden) < 1:
            raise ValueError("dimensions must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        unknown = set(self.dropout_sites) - set(DROPOUT_SITES)
        if unknown:
            raise ValueError(f"unknown dropout sites {sorted(unknown)}")

    @property
    def inference_width(self) -> int:
        """Per-token width H of the inference layer output."""
        return 6 * self.hidden if self.variant == "no_memory" else 2 * self.hidden

    def to_dict(self) -> dict:
        d = asdict(self)
        d["labels"] = list(self.labels)
        d["dropout_sites"] = list(self.dropout_sites)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Declared shape of every trainable tensor, keyed by parameter name."""
    r, d = config.embed_dim, config.hidden
    shapes: dict[str, tuple[int, ...]] = {}

    def lstm(prefix, n_in):
        shapes[f"{prefix}.w_ih"] = (n_in, 4 * d)
        shapes[f"{prefix}.w_hh"] = (d, 4 * d)
        shapes[f"{prefix}.b"] = (4 * d,)

    def dense_(prefix, n_in, n_out, bias=True):
        shapes[f"{prefix}.w"] = (n_in, n_out)
        if bias:
            shapes[f"{prefix}.b"] = (n_out,)

    lstm("enc.fwd", r)
    lstm("enc.bwd", r)
    dense_("match.c", 4 * d, d)
    dense_("match.s", 2 * d, d)
    dense_("match.m", 2 * d, d)
    reduce_in = {"full": 3 * d, "gate_relu": 3 * d, "no_memory": d, "mixed_single_turn": 3 * d}
    dense_("inf.reduce", reduce_in[config.variant], d, bias=False)
    lstm("inf.fwd", d)
    lstm("inf.bwd", d)
    if config.variant == "full":
        dense_("memory.gate", 4 * d, 2 * d)
    elif config.variant == "gate_relu":
        dense_("memory.relu", 4 * d, 2 * d, bias=False)
    dense_("mlp.hidden", 4 * config.inference_width, config.mlp_hidden)
    dense_("mlp.out", config.mlp_hidden, config.num_labels)
    return shapes


@dataclass
class Parameters:
    """Every trainable weight of the model, one attribute per role."""

    enc_fwd: LstmWeights
    enc_bwd: LstmWeights
    match_c: DenseWeights
    match_s: DenseWeights
    match_m: DenseWeights
    inf_reduce: DenseWeights
    inf_fwd: LstmWeights
    inf_bwd: LstmWeights
    mlp_hidden: DenseWeights
    mlp_out: DenseWeights
    memory_gate: DenseWeights | None = None
    memory_relu: DenseWeights | None = None

    _GROUPS = {
        "enc.fwd": "enc_fwd", "enc.bwd": "enc_bwd",
        "match.c": "match_c", "match.s": "match_s", "match.m": "match_m",
        "inf.reduce": "inf_reduce", "inf.fwd": "inf_fwd", "inf.bwd": "inf_bwd",
        "memory.gate": "memory_gate", "memory.relu": "memory_relu",
        "mlp.hidden": "mlp_hidden", "mlp.out": "mlp_out",
    }
    _ACTIVATIONS = {
        "match.c": "relu", "match.s": "relu", "match.m": "relu", "inf.reduce": "linear",
        "memory.gate": "sigmoid", "memory.relu": "relu", "mlp.hidden": "tanh", "mlp.out": "linear",
    }

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for prefix, attr in self._GROUPS.items():
            group = getattr(self, attr)
            if group is None:
                continue
            for k, t in group.tensors().items():
                out[f"{prefix}.{k}"] = t
        return out

    def __iter__(self):
        return iter(self.named().values())

    def zero_grad(self) -> None:
        for t in self:
            t.grad = None

    @classmethod
    def from_named(cls, tensors: dict[str, Tensor]) -> "Parameters":
        kwargs = {}
        for prefix, attr in cls._GROUPS.items():
            if f"{prefix}.w_ih" in tensors:
                kwargs[attr] = LstmWeights(tensors[f"{prefix}.w_ih"], tensors[f"{prefix}.w_hh"],
                                           tensors[f"{prefix}.b"])
            elif f"{prefix}.w" in tensors:
                kwargs[attr] = DenseWeights(tensors[f"{prefix}.w"], tensors.get(f"{prefix}.b"),
                                            cls._ACTIVATIONS[prefix])
        return cls(**kwargs)


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Parameters:
    rng = np.random.default_rng(seed)
    d = config.hidden
    groups = {}
    for name, shape in param_shapes(config).items():
        prefix, _ = name.rsplit(".", 1)
        groups.setdefault(prefix, []).append(shape)
    built: dict[str, Tensor] = {}
    for prefix, shapes in groups.items():
        n_in = shapes[0][0]
        if prefix in ("enc.fwd", "enc.bwd", "inf.fwd", "inf.bwd"):
            w = init_lstm(rng, n_in, d, dtype)
            built.update({f"{prefix}.{k}": t for k, t in w.tensors().items()})
        else:
            n_out = shapes[0][1]
            w = init_dense(rng, n_in, n_out, Parameters._ACTIVATIONS[prefix], bias=len(shapes) == 2,
                           dtype=dtype)
            built.update({f"{prefix}.{k}": t for k, t in w.tensors().items()})
    return Parameters.from_named(built)


@dataclass
class Trace:
    """Named intermediates of one forward pass, keyed by sentence side."""

    e: np.ndarray | None = None
    context: dict[str, np.ndarray] = field(default_factory=dict)
    aligned: dict[str, np.ndarray] = field(default_factory=dict)
    views: dict[str, list[np.ndarray]] = field(default_factory=dict)
    inference: dict[str, list[np.ndarray]] = field(default_factory=dict)
    memory: dict[str, list[np.ndarray]] = field(default_factory=dict)
    gates: dict[str, list[np.ndarray]] = field(default_factory=dict)
    logits: np.ndarray | None = None


# -- layers of the network ---------------------------------------------------------


def _drop(x: Tensor, site: str, config: ModelConfig, training: bool, rng) -> Tensor:
    if site not in config.dropout_sites:
        return x
    return dropout(x, config.dropout, training, rng)


def encode(tokens: Tensor, mask, params: Parameters) -> Tensor:
    """Context vectors [B, L, 2d] from embedded tokens [B, L, r]."""
    return bilstm(tokens, mask, params.enc_fwd, params.enc_bwd)


def align(p_bar: Tensor, q_bar: Tensor, p_mask, q_mask) -> tuple[Tensor, Tensor, Tensor]:
    """Soft-align each sentence against the other with dot-product scores.

    Returns (p_tilde, q_tilde, e) where e[b, i, j] = <p_bar_i, q_bar_j>.
    """
    p_mask = np.asarray(p_mask, dtype=bool)
    q_mask = np.asarray(q_mask, dtype=bool)
    if not p_mask.any(axis=-1).all() or not q_mask.any(axis=-1).all():
        raise DegenerateInputError("align: a sentence is entirely masked")
    e = T.matmul(p_bar, T.transpose(q_bar))
    attn_p = T.softmax_masked(e, q_mask[..., None, :])
    attn_q = T.softmax_masked(T.transpose(e), p_mask[..., None, :])
    return T.matmul(attn_p, q_bar), T.matmul(attn_q, p_bar), e


def match_views(context: Tensor, aligned: Tensor, params: Parameters) -> list[Tensor]:
    """[u_c, u_s, u_m]: joint, difference and similarity views, each [.., L, d]."""
    if context.shape != aligned.shape:
        raise DimensionError(f"match_views: {context.shape} vs {aligned.shape}")
    u_c = dense(T.concat([context, aligned], axis=-1), params.match_c)
    u_s = dense(T.sub(context, aligned), params.match_s)
    u_m = dense(T.mul(context, aligned), params.match_m)
    return [u_c, u_s, u_m]


def multi_turn_infer(views: list[Tensor], mask, params: Parameters, config: ModelConfig,
                     training: bool = False, rng=None, record: dict | None = None) -> Tensor:
    """Aggregate the matching sequence into per-token inference vectors [B, L, H].

    The same inference BiLSTM runs every turn, restarting from a zero state.
    """
    variant = config.variant
    if variant != "mixed_single_turn" and (len(views) != NUM_VIEWS or config.turns != NUM_VIEWS):
        raise ValueError(f"{variant} expects {NUM_VIEWS} views and turns")

    def infer(x):
        x = dense(x, params.inf_reduce)
        x = _drop(x, "inf_input", config, training, rng)
        return bilstm(x, mask, params.inf_fwd, params.inf_bwd)

    cs: list[Tensor] = []
    ms: list[Tensor] = []
    gs: list[Tensor] = []
    if variant == "mixed_single_turn":
        out = infer(T.concat(views, axis=-1))
        cs.append(out)
    elif variant == "no_memory":
        cs = [infer(u) for u in views]
        out = T.concat(cs, axis=-1)
    else:
        shape = views[0].shape[:-1] + (2 * config.hidden,)
        m = Tensor._wrap(np.zeros(shape, dtype=views[0].dtype))
        for u in views:
            c = infer(T.concat([u, m], axis=-1))
            cm = T.concat([c, m], axis=-1)
            if variant == "full":
                g = dense(cm, params.memory_gate)
                m = T.add(T.mul(g, c), T.mul(T.sub(1.0, g), m))
                gs.append(g)
            else:
                m = dense(cm, params.memory_relu)
            cs.append(c)
            ms.append(m)
        out = m
    if record is not None:
        record["c"] = cs
        record["m"] = ms
        record["g"] = gs
    return out


def classify(m_p: Tensor, m_q: Tensor, p_mask, q_mask, params: Parameters, config: ModelConfig,
             training: bool = False, rng=None) -> Tensor:
    """Pool both sentences (max then mean, premise first) and apply the MLP."""
    v = T.concat([T.reduce(m_p, p_mask, "max"), T.reduce(m_p, p_mask, "mean"),
                  T.reduce(m_q, q_mask, "max"), T.reduce(m_q, q_mask, "mean")], axis=-1)
    v = _drop(v, "mlp_input", config, training, rng)
    return dense(dense(v, params.mlp_hidden), params.mlp_out)


def forward_logits(p_emb, q_emb, p_mask, q_mask, params: Parameters, config: ModelConfig,
                   training: bool = False, rng=None, trace: Trace | None = None) -> Tensor:
    """Logits [B, num_labels] for embedded premises [B, Lp, r] and hypotheses [B, Lq, r]."""
    dtype = params.mlp_out.w.dtype
    p_mask = np.asarray(p_mask, dtype=bool)
    q_mask = np.asarray(q_mask, dtype=bool)
    p = p_emb if isinstance(p_emb, Tensor) else Tensor._wrap(np.asarray(p_emb, dtype=dtype))
    q = q_emb if isinstance(q_emb, Tensor) else Tensor._wrap(np.asarray(q_emb, dtype=dtype))
    if p.data.ndim != 3 or q.data.ndim != 3:
        raise DimensionError("forward expects batched [B, L, r] inputs")
    if p.shape[1] == 0 or q.shape[1] == 0:
        raise DegenerateInputError("empty sentence")
    p = _drop(p, "embed", config, training, rng)
    q = _drop(q, "embed", config, training, rng)

    p_bar = encode(p, p_mask, params)
    q_bar = encode(q, q_mask, params)
    p_tilde, q_tilde, e = align(p_bar, q_bar, p_mask, q_mask)
    u_p = match_views(p_bar, p_tilde, params)
    u_q = match_views(q_bar, q_tilde, params)
    rec_p: dict = {}
    rec_q: dict = {}
    m_p = multi_turn_infer(u_p, p_mask, params, config, training, rng, rec_p)
    m_q = multi_turn_infer(u_q, q_mask, params, config, training, rng, rec_q)
    logits = classify(m_p, m_q, p_mask, q_mask, params, config, training, rng)

    if trace is not None:
        trace.e = e.data
        trace.context = {"p": p_bar.data, "q": q_bar.data}
        trace.aligned = {"p": p_tilde.data, "q": q_tilde.data}
        trace.views = {"p": [u.data for u in u_p], "q": [u.data for u in u_q]}
        for side, rec in (("p", rec_p), ("q", rec_q)):
            trace.inference[side] = [c.data for c in rec["c"]]
            trace.memory[side] = [m.data for m in rec["m"]]
            trace.gates[side] = [g.data for g in rec["g"]]
        trace.logits = logits.data
    return logits


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def forward(p_emb, q_emb, p_mask, q_mask, params: Parameters, config: ModelConfig,
            training: bool = False, rng=None) -> Tensor:
    """Label distribution [B, num_labels]."""
    logits = forward_logits(p_emb, q_emb, p_mask, q_mask, params, config, training, rng)
    all_valid = np.ones(logits.shape, dtype=bool)
    return T.softmax_masked(logits, all_valid)


def predict(probs: np.ndarray) -> np.ndarray:
    """Arg-max label index; np.argmax already picks the lowest index on ties."""
    return np.asarray(probs).argmax(axis=-1)


def loss(probs: Tensor, gold) -> Tensor:
    """Mean -log p(gold) over the batch. `probs` is [B, C] or a single [C] row."""
    gold = np.asarray(gold, dtype=np.int64).reshape(-1)
    if probs.data.ndim == 1:
        probs = T.stack([probs], axis=0)
    n_labels = probs.shape[-1]
    if len(gold) != probs.shape[0] or gold.min() < 0 or gold.max() >= n_labels:
        raise ValueError(f"gold labels {gold.tolist()} do not fit a {n_labels}-label batch")
    onehot = np.zeros(probs.shape, dtype=probs.dtype)
    onehot[np.arange(len(gold)), gold] = 1.0
    ones = np.ones((n_labels, 1), dtype=probs.dtype)
    p_gold = T.matmul(T.mul(probs, Tensor._wrap(onehot)), Tensor._wrap(ones))
    return T.mul(T.sum_all(T.log(p_gold)), -1.0 / len(gold))
