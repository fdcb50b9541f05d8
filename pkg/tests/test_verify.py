import json

import numpy as np
import pytest

from mimn import tensor as T
from mimn.model import VARIANTS, ModelConfig, Parameters, forward, init_params
from mimn.verify import (compare_with_oracle, count_params, forward_oracle, gradcheck, oracle_sweep,
                         tiny_batch, tiny_config)


def zero_params(config):
    return Parameters.from_named({k: T.Tensor(np.zeros_like(t.data))
                                  for k, t in init_params(config, 0, np.float64).named().items()})


# -- parameter counts -----------------------------------------------------------------------


def test_full_size_counts_fall_in_the_reported_bands():
    full = count_params(ModelConfig())
    assert full.total == 5_317_503
    assert 5_200_000 <= full.total <= 5_400_000
    no_mem = count_params(ModelConfig(variant="no_memory"))
    assert 5_600_000 <= no_mem.total <= 6_000_000


def test_d1_counts_by_hand():
    # enc 2x(4+4+4), match 5+3+3, reduce 3, inf 2x12, gate 8+2, mlp 8+1 and 3+3
    assert count_params(ModelConfig(embed_dim=1, hidden=1, mlp_hidden=1)).total == 87
    # reduce 1, mlp.hidden sees 4 * 6d
    assert count_params(ModelConfig(embed_dim=1, hidden=1, mlp_hidden=1, variant="no_memory")).total == 91


def test_count_matches_initialized_tensors():
    for variant in VARIANTS:
        cfg = tiny_config(variant, 3)
        report = count_params(cfg)
        named = init_params(cfg, 0).named()
        assert report.per_tensor == {k: t.data.size for k, t in named.items()}
        assert report.total == sum(report.per_tensor.values())
        assert json.loads(report.to_json())["total"] == report.total


def test_count_ignores_batch_shape():
    cfg = tiny_config("full")
    before = count_params(cfg).total
    for lengths in [((1, 1),), ((3, 3), (2, 3)), ((5, 2),) * 4]:
        p, q, pm, qm, _ = tiny_batch(cfg, 0, lengths)
        forward(p, q, pm, qm, init_params(cfg, 0, np.float64), cfg)
        assert count_params(cfg).total == before


# -- gradient checker -----------------------------------------------------------------------


def test_gradcheck_passes_for_full():
    report = gradcheck(tiny_config("full"), seed=0)
    assert report.passed, report.worst()
    assert set(report.tensors) == set(count_params(tiny_config("full")).per_tensor)
    assert all(t.max_rel >= 0 and t.max_abs >= 0 for t in report.tensors.values())


def test_gradcheck_subsamples_large_tensors():
    report = gradcheck(tiny_config("full"), seed=1, max_per_tensor=5)
    assert all(t.checked == min(5, t.size) for t in report.tensors.values())


def test_gradcheck_catches_corrupted_backward():
    with T.corrupt_backward("matmul"):
        report = gradcheck(tiny_config("full"), seed=0, max_per_tensor=20)
    assert not report.passed
    assert report.max_rel > 1e-2
    assert gradcheck(tiny_config("full"), seed=0, max_per_tensor=20).passed


def test_gradcheck_zero_weight_branch_reports_zero():
    # zero MLP output weights: every upstream tensor has zero gradient on both sides
    cfg = tiny_config("full")
    params = init_params(cfg, 0, np.float64)
    params.named()["mlp.out.w"].data[:] = 0.0
    report = gradcheck(cfg, params=params)
    assert report.passed
    for name in ("enc.fwd.w_ih", "memory.gate.w", "mlp.hidden.w"):
        assert report.tensors[name].max_abs == 0.0


def test_gradcheck_rejects_float32():
    cfg = tiny_config("full")
    with pytest.raises(ValueError):
        gradcheck(cfg, params=init_params(cfg, 0, np.float32))


# -- forward oracle -------------------------------------------------------------------------


@pytest.mark.parametrize("variant", VARIANTS)
def test_zero_params_give_uniform_from_both_paths(variant):
    cfg = tiny_config(variant)
    rng = np.random.default_rng(0)
    p, q = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
    trace = forward_oracle(p, q, zero_params(cfg), cfg)
    np.testing.assert_allclose(trace.probs, 1 / 3, atol=1e-15)
    probs = forward(p[None], q[None], np.ones((1, 3), bool), np.ones((1, 2), bool), zero_params(cfg), cfg)
    np.testing.assert_allclose(probs.data.reshape(-1), 1 / 3, atol=1e-15)


def test_oracle_e_is_direct_dot_products():
    cfg = tiny_config("full")
    rng = np.random.default_rng(2)
    p, q = rng.normal(size=(4, 4)), rng.normal(size=(3, 4))
    trace = forward_oracle(p, q, init_params(cfg, 2, np.float64), cfg)
    cp, cq = np.array(trace.context["p"]), np.array(trace.context["q"])
    np.testing.assert_allclose(np.array(trace.e), cp @ cq.T, atol=1e-14)


@pytest.mark.parametrize("variant", VARIANTS)
def test_oracle_agrees_with_model(variant):
    cfg = tiny_config(variant)
    rng = np.random.default_rng(0)
    for seed in range(3):
        p, q = rng.normal(size=(3, 4)), rng.normal(size=(2 + seed, 4))
        cmp = compare_with_oracle(p, q, init_params(cfg, seed, np.float64), cfg)
        assert cmp.worst < 1e-10, cmp.first_divergence(1e-10)
        assert {"e", "logits", "c1_p", "u_c_p", "u_s_q", "u_m_p"} <= set(cmp.max_diff)
        if variant in ("full", "gate_relu"):
            assert {"c3_q", "m3_p", "m3_q"} <= set(cmp.max_diff)


def test_first_divergence_names_the_earliest_intermediate():
    cfg = tiny_config("full")
    rng = np.random.default_rng(0)
    p, q = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    cmp = compare_with_oracle(p, q, init_params(cfg, 0, np.float64), cfg)
    assert cmp.first_divergence(1e-10) is None
    cmp.max_diff["e"] = 1.0
    cmp.max_diff["logits"] = 1.0
    assert cmp.first_divergence(1e-10) == "e"


def test_oracle_sweep_small():
    sweep = oracle_sweep(instances=8, seed=5)
    assert sweep.passed and len(sweep.results) == 8
    assert {r["variant"] for r in sweep.results} == set(VARIANTS)


def test_dead_view_ties_are_a_kink_not_a_backward_bug():
    # At d=2 a matching view can be all-zero after its ReLU; the inference LSTM then maps
    # zero input and state to exactly zero at every position, so max pooling ties. Moving
    # the biases off zero breaks the tie and the check must pass.
    cfg = tiny_config("no_memory", 2)
    params = init_params(cfg, 0, np.float64)
    assert not gradcheck(cfg, params=params, max_per_tensor=8).passed
    rng = np.random.default_rng(0)
    for k in ("inf.fwd.b", "inf.bwd.b"):
        params.named()[k].data += rng.uniform(-0.05, 0.05, 8)
    assert gradcheck(cfg, params=params, max_per_tensor=8).passed
