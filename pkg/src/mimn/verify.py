"""Independent checks on the model: finite-difference gradients, parameter
counts from declared shapes, and a straight-line scalar re-implementation of
the forward pass."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import ModelConfig, Parameters, Trace, forward_logits, init_params, param_shapes

# -- gradient check --------------------------------------------------------------------


@dataclass
class TensorCheck:
    max_rel: float
    max_abs: float
    checked: int
    size: int
    worst_index: tuple[int, ...] | None = None


@dataclass
class GradCheckReport:
    tolerance: float
    variant: str
    tensors: dict[str, TensorCheck] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(t.max_rel < self.tolerance for t in self.tensors.values())

    @property
    def max_rel(self) -> float:
        return max(t.max_rel for t in self.tensors.values())

    def worst(self, k: int = 5) -> list[tuple[str, float]]:
        ranked = sorted(self.tensors.items(), key=lambda kv: -kv[1].max_rel)
        return [(name, t.max_rel) for name, t in ranked[:k]]

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "max_rel_error": self.max_rel,
            "tensors": {k: {"max_rel": v.max_rel, "max_abs": v.max_abs, "checked": v.checked,
                            "size": v.size} for k, v in self.tensors.items()},
            "worst": [{"tensor": n, "max_rel": e} for n, e in self.worst()],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def tiny_config(variant: str = "full", dim: int = 4) -> ModelConfig:
    return ModelConfig(embed_dim=dim, hidden=dim, mlp_hidden=dim, variant=variant, dropout=0.0)


def tiny_batch(config: ModelConfig, seed: int, lengths=((3, 3), (2, 3))):
    """Random embedded batch; rows shorter than the widest are right-padded with zeros."""
    rng = np.random.default_rng([seed, 7])
    B = len(lengths)
    lp = max(a for a, _ in lengths)
    lq = max(b for _, b in lengths)
    p = np.zeros((B, lp, config.embed_dim))
    q = np.zeros((B, lq, config.embed_dim))
    pm = np.zeros((B, lp), dtype=bool)
    qm = np.zeros((B, lq), dtype=bool)
    for i, (a, b) in enumerate(lengths):
        p[i, :a] = rng.normal(size=(a, config.embed_dim))
        q[i, :b] = rng.normal(size=(b, config.embed_dim))
        pm[i, :a] = True
        qm[i, :b] = True
    labels = rng.integers(0, config.num_labels, size=B)
    return p, q, pm, qm, labels


def _loss(params, config, batch) -> T.Tensor:
    p, q, pm, qm, labels = batch
    return T.cross_entropy(forward_logits(p, q, pm, qm, params, config), labels)


def _widen(params: Parameters, batch, dtype):
    wide = Parameters.from_named({k: T.Tensor(t.data.astype(dtype)) for k, t in params.named().items()})
    p, q, pm, qm, labels = batch
    return wide, (p.astype(dtype), q.astype(dtype), pm, qm, labels)


def gradcheck(config: ModelConfig, seed: int = 0, tolerance: float = 1e-5, step: float = 1e-5,
              max_per_tensor: int = 200, params: Parameters | None = None, batch=None,
              numeric_dtype=np.longdouble) -> GradCheckReport:
    """Compare float64 analytic gradients with central differences.

    The perturbed losses are evaluated in `numeric_dtype`. With a loss near 1
    and a 1e-5 step, float64 differences carry about 1e-11 of absolute noise,
    which swamps gradient entries of order 1e-8; extended precision pushes
    that floor three orders lower. Tensors with more than `max_per_tensor`
    entries are checked on a seeded random subset of that many entries.
    Relative error is |a - n| / max(|a|, |n|, 1e-8).
    """
    if config.dropout and config.dropout_sites:
        config = ModelConfig.from_dict({**config.to_dict(), "dropout": 0.0})
    params = params if params is not None else init_params(config, seed, np.float64)
    batch = batch if batch is not None else tiny_batch(config, seed)
    named = params.named()
    for t in named.values():
        if t.dtype != np.float64:
            raise ValueError("gradcheck needs float64 parameters")
        t.grad = None
    loss = _loss(params, config, batch)
    T.backward(loss)
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)).copy()
                for k, t in named.items()}
    rng = np.random.default_rng([seed, 11])
    report = GradCheckReport(tolerance, config.variant)
    wide, wide_batch = _widen(params, batch, numeric_dtype)
    h = np.asarray(step, dtype=numeric_dtype)
    with T.no_grad():
        for name, t in wide.named().items():
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if flat.size > max_per_tensor:
                idx = np.sort(rng.choice(flat.size, size=max_per_tensor, replace=False))
            max_rel = max_abs = 0.0
            worst = None
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                up = _loss(wide, config, wide_batch).data
                flat[i] = orig - h
                down = _loss(wide, config, wide_batch).data
                flat[i] = orig
                num = float((up - down) / (2 * h))
                ana = float(analytic[name].reshape(-1)[i])
                err = abs(ana - num)
                rel = err / max(abs(ana), abs(num), 1e-8)
                max_abs = max(max_abs, err)
                if rel > max_rel:
                    max_rel, worst = rel, tuple(int(v) for v in np.unravel_index(i, t.shape))
            report.tensors[name] = TensorCheck(max_rel, max_abs, len(idx), flat.size, worst)
    for t in named.values():
        t.grad = None
    return report


# -- parameter count ---------------------------------------------------------------------


@dataclass
class ParamCountReport:
    per_tensor: dict[str, int]
    variant: str

    @property
    def total(self) -> int:
        return sum(self.per_tensor.values())

    def to_dict(self) -> dict:
        return {"variant": self.variant, "total": self.total, "per_tensor": self.per_tensor}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def count_params(config: ModelConfig) -> ParamCountReport:
    """Trainable parameter count from declared shapes; embeddings excluded."""
    return ParamCountReport({k: math.prod(s) for k, s in param_shapes(config).items()}, config.variant)


# -- straight-line forward oracle ------------------------------------------------------------
#
# Plain Python floats and lists, one example at a time, no masking (the
# example is unpadded). Weight layout matches the model: [in][out].

Vec = list
Mat = list


def _sig(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


def _affine(x: Vec, w: Mat, b: Vec | None) -> Vec:
    n_out = len(w[0])
    out = [0.0] * n_out
    for i, xi in enumerate(x):
        row = w[i]
        for j in range(n_out):
            out[j] += xi * row[j]
    if b is not None:
        out = [o + bj for o, bj in zip(out, b)]
    return out


def _lstm_run(xs: list[Vec], w: dict, reverse: bool) -> list[Vec]:
    h_size = len(w["w_hh"])
    h = [0.0] * h_size
    c = [0.0] * h_size
    out: list[Vec] = [None] * len(xs)  # type: ignore[list-item]
    order = range(len(xs) - 1, -1, -1) if reverse else range(len(xs))
    for t in order:
        a = _affine(xs[t], w["w_ih"], w["b"])
        r = _affine(h, w["w_hh"], None)
        z = [ai + ri for ai, ri in zip(a, r)]
        i_g = [_sig(v) for v in z[0:h_size]]
        f_g = [_sig(v) for v in z[h_size:2 * h_size]]
        g_g = [math.tanh(v) for v in z[2 * h_size:3 * h_size]]
        o_g = [_sig(v) for v in z[3 * h_size:4 * h_size]]
        c = [f * cp + i * g for f, cp, i, g in zip(f_g, c, i_g, g_g)]
        h = [o * math.tanh(cv) for o, cv in zip(o_g, c)]
        out[t] = h
    return out


def _bilstm(xs: list[Vec], wf: dict, wb: dict) -> list[Vec]:
    f = _lstm_run(xs, wf, False)
    b = _lstm_run(xs, wb, True)
    return [fi + bi for fi, bi in zip(f, b)]


def _softmax(v: Vec) -> Vec:
    m = max(v)
    e = [math.exp(x - m) for x in v]
    s = sum(e)
    return [x / s for x in e]


def _group(params: Parameters, prefix: str) -> dict:
    out = {}
    for name, t in params.named().items():
        if name.startswith(prefix + "."):
            out[name[len(prefix) + 1:]] = t.data.tolist()
    return out


@dataclass
class OracleTrace:
    e: list
    context: dict
    aligned: dict
    views: dict
    inference: dict
    memory: dict
    logits: list
    probs: list


def forward_oracle(p_emb, q_emb, params: Parameters, config: ModelConfig) -> OracleTrace:
    """Single unpadded example: p_emb [lp][r], q_emb [lq][r] nested sequences."""
    P = [list(map(float, row)) for row in p_emb]
    Q = [list(map(float, row)) for row in q_emb]
    enc_f, enc_b = _group(params, "enc.fwd"), _group(params, "enc.bwd")
    inf_f, inf_b = _group(params, "inf.fwd"), _group(params, "inf.bwd")
    p_bar = _bilstm(P, enc_f, enc_b)
    q_bar = _bilstm(Q, enc_f, enc_b)

    e = [[sum(a * b for a, b in zip(pi, qj)) for qj in q_bar] for pi in p_bar]
    p_tilde = []
    for i in range(len(p_bar)):
        wts = _softmax(e[i])
        p_tilde.append([sum(wts[j] * q_bar[j][k] for j in range(len(q_bar))) for k in range(len(q_bar[0]))])
    q_tilde = []
    for j in range(len(q_bar)):
        wts = _softmax([e[i][j] for i in range(len(p_bar))])
        q_tilde.append([sum(wts[i] * p_bar[i][k] for i in range(len(p_bar))) for k in range(len(p_bar[0]))])

    mc, ms, mm = _group(params, "match.c"), _group(params, "match.s"), _group(params, "match.m")
    red = _group(params, "inf.reduce")["w"]

    def relu(v):
        return [x if x > 0 else 0.0 for x in v]

    def views(bar, til):
        u_c = [relu(_affine(a + b, mc["w"], mc["b"])) for a, b in zip(bar, til)]
        u_s = [relu(_affine([x - y for x, y in zip(a, b)], ms["w"], ms["b"])) for a, b in zip(bar, til)]
        u_m = [relu(_affine([x * y for x, y in zip(a, b)], mm["w"], mm["b"])) for a, b in zip(bar, til)]
        return [u_c, u_s, u_m]

    def infer(u):
        d2 = 2 * config.hidden
        n = len(u[0])
        cs, ms_ = [], []
        if config.variant == "mixed_single_turn":
            x = [_affine(u[0][i] + u[1][i] + u[2][i], red, None) for i in range(n)]
            c = _bilstm(x, inf_f, inf_b)
            return c, [c], []
        if config.variant == "no_memory":
            for k in range(3):
                x = [_affine(u[k][i], red, None) for i in range(n)]
                cs.append(_bilstm(x, inf_f, inf_b))
            return [cs[0][i] + cs[1][i] + cs[2][i] for i in range(n)], cs, []
        m = [[0.0] * d2 for _ in range(n)]
        gate = _group(params, "memory.gate") if config.variant == "full" else None
        upd = _group(params, "memory.relu") if config.variant == "gate_relu" else None
        for k in range(3):
            x = [_affine(u[k][i] + m[i], red, None) for i in range(n)]
            c = _bilstm(x, inf_f, inf_b)
            new_m = []
            for i in range(n):
                if gate is not None:
                    g = [_sig(v) for v in _affine(c[i] + m[i], gate["w"], gate["b"])]
                    new_m.append([gi * ci + (1 - gi) * mi for gi, ci, mi in zip(g, c[i], m[i])])
                else:
                    new_m.append(relu(_affine(c[i] + m[i], upd["w"], None)))
            m = new_m
            cs.append(c)
            ms_.append(m)
        return m, cs, ms_

    u_p, u_q = views(p_bar, p_tilde), views(q_bar, q_tilde)
    out_p, c_p, m_p = infer(u_p)
    out_q, c_q, m_q = infer(u_q)

    def pool(rows):
        width = len(rows[0])
        mx = [max(r[k] for r in rows) for k in range(width)]
        mean = [sum(r[k] for r in rows) / len(rows) for k in range(width)]
        return mx + mean

    v = pool(out_p) + pool(out_q)
    hid = _group(params, "mlp.hidden")
    outl = _group(params, "mlp.out")
    hidden = [math.tanh(x) for x in _affine(v, hid["w"], hid["b"])]
    logits = _affine(hidden, outl["w"], outl["b"])
    return OracleTrace(e, {"p": p_bar, "q": q_bar}, {"p": p_tilde, "q": q_tilde},
                       {"p": u_p, "q": u_q}, {"p": c_p, "q": c_q}, {"p": m_p, "q": m_q},
                       logits, _softmax(logits))


@dataclass
class OracleComparison:
    max_diff: dict[str, float]

    @property
    def worst(self) -> float:
        return max(self.max_diff.values())

    def first_divergence(self, tol: float) -> str | None:
        for name, diff in self.max_diff.items():
            if diff > tol:
                return name
        return None


def compare_with_oracle(p_emb: np.ndarray, q_emb: np.ndarray, params: Parameters,
                        config: ModelConfig) -> OracleComparison:
    """Run model and oracle on one unpadded example; max |diff| per named intermediate.

    Keys are ordered along the forward pass so the first one over tolerance is
    where the two paths part ways.
    """
    trace = Trace()
    lp, lq = len(p_emb), len(q_emb)
    with T.no_grad():
        forward_logits(np.asarray(p_emb)[None], np.asarray(q_emb)[None], np.ones((1, lp), bool),
                       np.ones((1, lq), bool), params, config, trace=trace)
    oracle = forward_oracle(p_emb, q_emb, params, config)

    def diff(a, b) -> float:
        return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))

    out: dict[str, float] = {}
    for side in ("p", "q"):
        out[f"context_{side}"] = diff(trace.context[side][0], oracle.context[side])
    out["e"] = diff(trace.e[0], oracle.e)
    for side in ("p", "q"):
        out[f"aligned_{side}"] = diff(trace.aligned[side][0], oracle.aligned[side])
        for name, mv, ov in zip(("u_c", "u_s", "u_m"), trace.views[side], oracle.views[side]):
            out[f"{name}_{side}"] = diff(mv[0], ov)
    for side in ("p", "q"):
        for k, (mc, oc) in enumerate(zip(trace.inference[side], oracle.inference[side]), 1):
            out[f"c{k}_{side}"] = diff(mc[0], oc)
        for k, (mm, om) in enumerate(zip(trace.memory[side], oracle.memory[side]), 1):
            out[f"m{k}_{side}"] = diff(mm[0], om)
    out["logits"] = diff(trace.logits[0], oracle.logits)
    return OracleComparison(out)


@dataclass
class OracleSweep:
    tolerance: float
    results: list[dict]

    @property
    def worst(self) -> float:
        return max(r["max_diff"] for r in self.results)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def oracle_sweep(instances: int = 100, seed: int = 0, dim: int = 4, max_len: int = 4,
                 tolerance: float = 1e-10) -> OracleSweep:
    """Compare model and oracle on random float64 instances, cycling through the variants.

    Each instance draws its own parameters and sentence lengths in [1, max_len].
    """
    from .model import VARIANTS

    rng = np.random.default_rng(seed)
    results = []
    for n in range(instances):
        variant = VARIANTS[n % len(VARIANTS)]
        config = tiny_config(variant, dim)
        params = init_params(config, int(rng.integers(2**31)), np.float64)
        lp, lq = (int(v) for v in rng.integers(1, max_len + 1, size=2))
        p = rng.normal(size=(lp, dim))
        q = rng.normal(size=(lq, dim))
        cmp = compare_with_oracle(p, q, params, config)
        results.append({"variant": variant, "lengths": (lp, lq), "max_diff": cmp.worst,
                        "compared": sorted(cmp.max_diff), "first_divergence": cmp.first_divergence(tolerance)})
    return OracleSweep(tolerance, results)
