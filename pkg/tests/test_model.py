import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import mimn.model as M
from mimn import tensor as T
from mimn.layers import bilstm
from mimn.model import ModelConfig, Trace, forward, forward_logits, init_params, param_shapes
from mimn.tensor import DegenerateInputError, Tensor


def tiny(variant="full", dim=4, **kw):
    return ModelConfig(embed_dim=dim, hidden=dim, mlp_hidden=dim, variant=variant, dropout=0.0, **kw)


def batch(rng, lengths, r):
    lp, lq = max(a for a, _ in lengths), max(b for _, b in lengths)
    p, q = np.zeros((len(lengths), lp, r)), np.zeros((len(lengths), lq, r))
    pm, qm = np.zeros(p.shape[:2], bool), np.zeros(q.shape[:2], bool)
    for i, (a, b) in enumerate(lengths):
        p[i, :a], q[i, :b] = rng.normal(size=(a, r)), rng.normal(size=(b, r))
        pm[i, :a], qm[i, :b] = True, True
    return p, q, pm, qm


def zero_params(params):
    for t in params:
        t.data[...] = 0


# -- configuration -------------------------------------------------------------------------


def test_config_rejects_bad_turns_and_labels():
    with pytest.raises(ValueError):
        ModelConfig(variant="full", turns=2)
    with pytest.raises(ValueError):
        ModelConfig(labels=("a",))
    with pytest.raises(ValueError):
        ModelConfig(variant="deep")
    ModelConfig(variant="mixed_single_turn", turns=1)


def test_config_round_trip():
    cfg = tiny("gate_relu", labels=("neutral", "entails"))
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_declared_shapes_match_initialised_tensors():
    for variant in M.VARIANTS:
        cfg = tiny(variant, dim=3)
        named = init_params(cfg, 0).named()
        assert {k: t.shape for k, t in named.items()} == param_shapes(cfg)


def test_variant_specific_parameters():
    assert "memory.gate.w" in param_shapes(tiny("full"))
    assert "memory.relu.b" not in param_shapes(tiny("gate_relu"))
    assert "inf.reduce.b" not in param_shapes(tiny("full"))
    assert param_shapes(tiny("no_memory"))["inf.reduce.w"] == (4, 4)
    assert param_shapes(tiny("mixed_single_turn"))["inf.reduce.w"] == (12, 4)


# -- encode -----------------------------------------------------------------------------------


def test_encode_zero_everything():
    cfg = tiny()
    params = init_params(cfg, 0, np.float64)
    zero_params(params)
    out = M.encode(Tensor(np.zeros((1, 3, 4))), np.ones((1, 3), bool), params)
    np.testing.assert_array_equal(out.data, 0)


def test_encode_width_at_full_size():
    params = init_params(ModelConfig(), 0)
    out = M.encode(Tensor(np.ones((1, 2, 300), np.float32)), np.ones((1, 2), bool), params)
    assert out.shape == (1, 2, 600)


def test_encoder_weights_shared_between_sentences(monkeypatch):
    cfg = tiny()
    params = init_params(cfg, 0, np.float64)
    seen = []

    def spy(seq, mask, w_fwd, w_bwd):
        seen.append((w_fwd, w_bwd))
        return bilstm(seq, mask, w_fwd, w_bwd)

    monkeypatch.setattr(M, "bilstm", spy)
    rng = np.random.default_rng(0)
    forward_logits(*batch(rng, [(3, 2)], 4), params, cfg)
    assert seen[0][0] is seen[1][0] is params.enc_fwd
    assert seen[0][1] is seen[1][1] is params.enc_bwd


# -- align ------------------------------------------------------------------------------------


def test_align_single_hypothesis_token():
    rng = np.random.default_rng(1)
    p_bar, q_bar = rng.normal(size=(1, 3, 4)), rng.normal(size=(1, 1, 4))
    p_t, q_t, e = M.align(Tensor(p_bar), Tensor(q_bar), np.ones((1, 3), bool), np.ones((1, 1), bool))
    np.testing.assert_allclose(p_t.data[0], np.repeat(q_bar[0], 3, axis=0), atol=1e-15)
    np.testing.assert_allclose(e.data[0, :, 0], p_bar[0] @ q_bar[0, 0], atol=1e-14)


def test_align_prefers_matching_row():
    p_bar = np.eye(3)[None] * 3.0
    q_bar = p_bar[:, [1]]
    p_t, q_t, _ = M.align(Tensor(p_bar), Tensor(q_bar), np.ones((1, 3), bool), np.ones((1, 1), bool))
    weights = np.linalg.solve(p_bar[0].T, q_t.data[0, 0])
    assert weights.argmax() == 1


def test_align_hand_softmax():
    p_bar = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    q_bar = np.array([[[1.0, 0.0]]])
    _, q_t, e = M.align(Tensor(p_bar), Tensor(q_bar), np.ones((1, 2), bool), np.ones((1, 1), bool))
    np.testing.assert_array_equal(e.data[0, :, 0], [1, 0])
    np.testing.assert_allclose(q_t.data[0, 0], [0.7311, 0.2689], atol=1e-4)


def test_align_masked_positions_get_no_weight():
    rng = np.random.default_rng(2)
    p_bar, q_bar = rng.normal(size=(1, 2, 3)), rng.normal(size=(1, 3, 3))
    q_mask = np.array([[True, True, False]])
    p_t, _, _ = M.align(Tensor(p_bar), Tensor(q_bar), np.ones((1, 2), bool), q_mask)
    p_t2, _, _ = M.align(Tensor(p_bar), Tensor(q_bar[:, :2]), np.ones((1, 2), bool), np.ones((1, 2), bool))
    np.testing.assert_allclose(p_t.data, p_t2.data, atol=1e-15)
    with pytest.raises(DegenerateInputError):
        M.align(Tensor(p_bar), Tensor(q_bar), np.ones((1, 2), bool), np.zeros((1, 3), bool))


# -- matching views ---------------------------------------------------------------------------


def test_views_vanish_on_identical_or_zero_alignment():
    cfg = tiny()
    params = init_params(cfg, 0, np.float64)
    ctx = Tensor(np.random.default_rng(3).normal(size=(1, 3, 8)))
    u_s = M.match_views(ctx, ctx, params)[1]
    np.testing.assert_array_equal(u_s.data, 0)
    u_m = M.match_views(ctx, Tensor(np.zeros((1, 3, 8))), params)[2]
    np.testing.assert_array_equal(u_m.data, 0)


def test_views_match_formula():
    cfg = tiny(dim=2)
    params = init_params(cfg, 4, np.float64)
    rng = np.random.default_rng(4)
    for t in params:
        t.data[...] = rng.normal(size=t.shape)
    ctx, al = rng.normal(size=(1, 2, 4)), rng.normal(size=(1, 2, 4))
    u_c, u_s, u_m = (u.data for u in M.match_views(Tensor(ctx), Tensor(al), params))
    relu = lambda z: np.maximum(z, 0)
    pc, ps, pm = params.match_c, params.match_s, params.match_m
    np.testing.assert_allclose(u_c, relu(np.concatenate([ctx, al], -1) @ pc.w.data + pc.b.data), atol=1e-12)
    np.testing.assert_allclose(u_s, relu((ctx - al) @ ps.w.data + ps.b.data), atol=1e-12)
    np.testing.assert_allclose(u_m, relu((ctx * al) @ pm.w.data + pm.b.data), atol=1e-12)


# -- multi-turn inference ---------------------------------------------------------------------


def views_and_mask(rng, L=3, d=4):
    return [Tensor(rng.normal(size=(1, L, d))) for _ in range(3)], np.ones((1, L), bool)


def run_turns(params, cfg, views, mask):
    rec = {}
    out = M.multi_turn_infer(views, mask, params, cfg, record=rec)
    return out, rec


def test_zero_gate_averages():
    cfg = tiny()
    params = init_params(cfg, 0, np.float64)
    params.memory_gate.w.data[...] = 0
    params.memory_gate.b.data[...] = 0
    views, mask = views_and_mask(np.random.default_rng(5))
    _, rec = run_turns(params, cfg, views, mask)
    prev = np.zeros_like(rec["m"][0].data)
    for c, m, g in zip(rec["c"], rec["m"], rec["g"]):
        assert (g.data == 0.5).all()
        assert (m.data == 0.5 * (c.data + prev)).all()
        prev = m.data


def test_saturated_gate_selects_last_inference():
    cfg = tiny()
    params = init_params(cfg, 0, np.float64)
    params.memory_gate.w.data[...] = 0
    params.memory_gate.b.data[...] = 100.0
    views, mask = views_and_mask(np.random.default_rng(6))
    out, rec = run_turns(params, cfg, views, mask)
    np.testing.assert_array_equal(out.data, rec["c"][-1].data)


def test_full_variant_against_unrolled_equations():
    cfg = tiny(dim=3)
    params = init_params(cfg, 7, np.float64)
    views, mask = views_and_mask(np.random.default_rng(7), L=2, d=3)
    out, _ = run_turns(params, cfg, views, mask)
    sig = lambda z: 1 / (1 + np.exp(-z))
    m = np.zeros((1, 2, 6))
    for u in views:
        x = np.concatenate([u.data, m], -1) @ params.inf_reduce.w.data
        c = bilstm(Tensor(x), mask, params.inf_fwd, params.inf_bwd).data
        g = sig(np.concatenate([c, m], -1) @ params.memory_gate.w.data + params.memory_gate.b.data)
        m = g * c + (1 - g) * m
    np.testing.assert_allclose(out.data, m, atol=1e-10)


@given(st.integers(0, 2**31))
def test_memory_stays_between_inference_and_previous_memory(seed):
    cfg = tiny()
    params = init_params(cfg, seed % 1000, np.float64)
    views, mask = views_and_mask(np.random.default_rng(seed))
    _, rec = run_turns(params, cfg, views, mask)
    prev = np.zeros_like(rec["m"][0].data)
    for c, m in zip(rec["c"], rec["m"]):
        lo, hi = np.minimum(c.data, prev), np.maximum(c.data, prev)
        assert (m.data >= lo - 1e-15).all() and (m.data <= hi + 1e-15).all()
        prev = m.data


def test_output_widths():
    for variant, width in (("full", 8), ("gate_relu", 8), ("no_memory", 24), ("mixed_single_turn", 8)):
        cfg = tiny(variant)
        views, mask = views_and_mask(np.random.default_rng(8))
        out, _ = run_turns(init_params(cfg, 0, np.float64), cfg, views, mask)
        assert out.shape == (1, 3, width) == (1, 3, cfg.inference_width)
    assert ModelConfig(variant="no_memory").inference_width == 6 * 300


def test_view_order_matters_for_full_only_up_to_blocks_for_no_memory():
    rng = np.random.default_rng(9)
    views, mask = views_and_mask(rng)
    perm = [2, 0, 1]
    cfg = tiny("full")
    params = init_params(cfg, 1, np.float64)
    a, _ = run_turns(params, cfg, views, mask)
    b, _ = run_turns(params, cfg, [views[i] for i in perm], mask)
    assert not np.allclose(a.data, b.data)
    cfg = tiny("no_memory")
    params = init_params(cfg, 1, np.float64)
    a, _ = run_turns(params, cfg, views, mask)
    b, _ = run_turns(params, cfg, [views[i] for i in perm], mask)
    blocks = np.split(a.data, 3, axis=-1)
    np.testing.assert_array_equal(b.data, np.concatenate([blocks[i] for i in perm], axis=-1))


def test_wrong_number_of_views():
    cfg = tiny()
    views, mask = views_and_mask(np.random.default_rng(0))
    with pytest.raises(ValueError):
        M.multi_turn_infer(views[:2], mask, init_params(cfg, 0, np.float64), cfg)


# -- classify, forward, loss -----------------------------------------------------------------


def test_classify_single_token_pools_to_the_row():
    cfg = tiny()
    params = init_params(cfg, 0, np.float64)
    row_p, row_q = np.random.default_rng(1).normal(size=(2, 1, 1, 8))
    logits = M.classify(Tensor(row_p), Tensor(row_q), np.ones((1, 1), bool), np.ones((1, 1), bool), params, cfg)
    v = np.concatenate([row_p[:, 0], row_p[:, 0], row_q[:, 0], row_q[:, 0]], -1)
    h = np.tanh(v @ params.mlp_hidden.w.data + params.mlp_hidden.b.data)
    np.testing.assert_allclose(logits.data, h @ params.mlp_out.w.data + params.mlp_out.b.data, atol=1e-14)
    assert params.mlp_hidden.w.shape[0] == 4 * cfg.inference_width
    assert param_shapes(ModelConfig())["mlp.hidden.w"][0] == 2400


def test_zero_output_layer_is_uniform():
    cfg = tiny()
    params = init_params(cfg, 0, np.float64)
    params.mlp_out.w.data[...] = 0
    probs = forward(*batch(np.random.default_rng(2), [(3, 2), (1, 4)], 4), params, cfg).data
    np.testing.assert_array_equal(probs, np.full((2, 3), 1 / 3))
    assert (M.predict(probs) == 0).all()


@given(st.integers(0, 2**31))
def test_probabilities_sum_to_one(seed):
    cfg = tiny()
    probs = forward(*batch(np.random.default_rng(seed), [(3, 2), (2, 5)], 4), init_params(cfg, seed % 97), cfg).data
    np.testing.assert_allclose(probs.sum(-1), 1, atol=1e-6)


@given(st.sampled_from(M.VARIANTS), st.integers(1, 4), st.integers(1, 4), st.integers(0, 3),
       st.integers(0, 3), st.integers(0, 2**31))
def test_padding_does_not_change_logits(variant, lp, lq, pad_p, pad_q, seed):
    cfg = tiny(variant)
    params = init_params(cfg, seed % 101)
    rng = np.random.default_rng(seed)
    p, q = rng.normal(size=(1, lp, 4)), rng.normal(size=(1, lq, 4))
    base = forward_logits(p, q, np.ones((1, lp), bool), np.ones((1, lq), bool), params, cfg).data
    pp = np.concatenate([p, rng.normal(size=(1, pad_p, 4))], 1)
    qq = np.concatenate([q, rng.normal(size=(1, pad_q, 4))], 1)
    pm = np.array([[True] * lp + [False] * pad_p])
    qm = np.array([[True] * lq + [False] * pad_q])
    padded = forward_logits(pp, qq, pm, qm, params, cfg).data
    assert np.abs(padded - base).max() < 1e-5


def test_batched_equals_one_at_a_time():
    cfg = tiny()
    params = init_params(cfg, 3, np.float64)
    p, q, pm, qm = batch(np.random.default_rng(3), [(3, 1), (1, 3), (2, 2)], 4)
    whole = forward_logits(p, q, pm, qm, params, cfg).data
    for i in range(3):
        a, b = pm[i].sum(), qm[i].sum()
        single = forward_logits(p[i:i + 1, :a], q[i:i + 1, :b], pm[i:i + 1, :a], qm[i:i + 1, :b], params, cfg)
        np.testing.assert_allclose(single.data[0], whole[i], atol=1e-13)


def test_trace_records_intermediates():
    cfg = tiny()
    trace = Trace()
    forward_logits(*batch(np.random.default_rng(4), [(3, 2)], 4), init_params(cfg, 0, np.float64), cfg, trace=trace)
    assert trace.e.shape == (1, 3, 2)
    assert len(trace.views["p"]) == len(trace.inference["q"]) == len(trace.memory["p"]) == 3


def test_loss_examples():
    uniform = Tensor(np.full((1, 3), 1 / 3))
    assert abs(M.loss(uniform, [2]).data - math.log(3)) < 1e-12
    assert M.loss(Tensor([[0.0, 1.0, 0.0]]), [1]).data == 0
    assert abs(M.loss(Tensor([0.5, 0.25, 0.25]), 0).data - math.log(2)) < 1e-12
    with pytest.raises(ValueError):
        M.loss(uniform, [3])


def test_loss_agrees_with_cross_entropy():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(4, 3))
    gold = [0, 2, 1, 1]
    probs = T.softmax_masked(Tensor(logits), np.ones((4, 3), bool))
    assert abs(M.loss(probs, gold).data - T.cross_entropy(Tensor(logits), gold).data) < 1e-12
