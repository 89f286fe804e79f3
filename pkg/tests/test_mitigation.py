import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlab.curriculum import train_steps
from dlab.groups import ConfigError
from dlab.mitigation import (BETA_SWEEP, DEFAULT_BETA, attach_lora, lora_forward, lora_merge,
                             merge_lora, moe_forward, moe_layer, moe_routing, moe_wrap, moe_wrap_all, new_adapter,
                             wise_ft_interpolate, wise_ft_sweep)
from dlab.model import ModelConfig, greedy_decode_batch, init_model, mlp_sublayer
from dlab.tasks import SyntheticTaskSpec, generate_task


def test_zero_b_merge_is_exact():
    w0 = np.random.default_rng(0).normal(size=(8, 5)).astype(np.float32)
    ad = new_adapter(w0, 2, 4.0, np.random.default_rng(1))
    assert not ad.b.any()
    assert lora_merge(w0, ad).tobytes() == w0.tobytes()


def test_trainable_count():
    ad = new_adapter(np.zeros((64, 64), np.float32), 4, 8.0, np.random.default_rng(0))
    assert ad.n_trainable == 4 * (64 + 64) == 512
    assert 64 * 64 == 4096


def test_init_bounds():
    ad = new_adapter(np.zeros((10, 16), np.float32), 3, 1.0, np.random.default_rng(0))
    assert np.abs(ad.a).max() <= 1 / np.sqrt(16)


def test_rank_validation():
    w0 = np.zeros((6, 4), np.float32)
    with pytest.raises(ConfigError):
        new_adapter(w0, 5, 1.0, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        new_adapter(w0, 0, 1.0, np.random.default_rng(0))


def test_forward_matches_dense_merge():
    rng = np.random.default_rng(0)
    w0 = rng.normal(size=(16, 12)).astype(np.float32)
    ad = new_adapter(w0, 4, 8.0, rng)
    ad.b = rng.normal(0.0, 0.1, ad.b.shape).astype(np.float32)  # as if trained
    x = rng.normal(size=(7, 16)).astype(np.float32)
    assert np.abs(lora_forward(x, w0, ad) - x @ lora_merge(w0, ad)).max() <= 1e-5


def lora_trained_model():
    m = init_model(ModelConfig(), np.random.default_rng(0))
    attach_lora(m, [f"block{l}.{k}" for l in range(4) for k in ("wgate", "wup", "wdown")], 4, 8.0,
                np.random.default_rng(1))
    data = generate_task(SyntheticTaskSpec("count", 0, 320, 20))
    names = [n for n in m.params if ".lora_" in n]
    train_steps(m, data.train, names, np.random.default_rng(2), steps=20)
    return m, data


def test_merged_decode_equals_adapter_decode():
    m, data = lora_trained_model()
    assert any(m.params[n].any() for n in m.params if n.endswith(".lora_b"))
    merged = merge_lora(m)
    assert not merged.lora and not any(".lora_" in n for n in merged.params)
    ev = data.eval
    a, _, _ = greedy_decode_batch(m, ev.prompts, ev.visual, 4, stop_token=None)
    b, _, _ = greedy_decode_batch(merged, ev.prompts, ev.visual, 4, stop_token=None)
    assert len(ev) == 20
    assert np.array_equal(a, b)


def test_double_attach_rejected():
    m = init_model(ModelConfig(), np.random.default_rng(0))
    attach_lora(m, ["block0.wup"], 2, 2.0, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        attach_lora(m, ["block0.wup"], 2, 2.0, np.random.default_rng(0))


def pair():
    cfg = ModelConfig()
    return init_model(cfg, np.random.default_rng(0)), init_model(cfg, np.random.default_rng(1))


def test_wise_endpoints_bit_exact():
    base, tuned = pair()
    w0, w1 = wise_ft_interpolate(base, tuned, 0.0), wise_ft_interpolate(base, tuned, 1.0)
    for n in base.params:
        assert w0.params[n].tobytes() == base.params[n].tobytes()
        assert w1.params[n].tobytes() == tuned.params[n].tobytes()


def test_wise_midpoint():
    base, tuned = pair()
    for n in base.params:
        base.params[n][:] = 2.0
        tuned.params[n][:] = 4.0
    mid = wise_ft_interpolate(base, tuned, 0.5)
    assert all((v == 3.0).all() for v in mid.params.values())


def test_wise_affine_in_beta():
    base, tuned = pair()
    for beta in (0.0, 0.25, 0.5, 0.75, 1.0):
        got = wise_ft_interpolate(base, tuned, beta)
        for n in base.params:
            b, t = base.params[n], tuned.params[n]
            want = ((1 - beta) * b.astype(np.float64) + beta * t.astype(np.float64)).astype(np.float32)
            ulp = np.spacing(np.maximum(np.abs(want), np.abs(got.params[n])))
            assert (np.abs(got.params[n] - want) <= 2 * ulp).all()


def test_wise_validation():
    base, tuned = pair()
    with pytest.raises(ConfigError):
        wise_ft_interpolate(base, tuned, 1.5)
    other = init_model(ModelConfig(n_layers=2), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        wise_ft_interpolate(base, other, 0.5)


def test_sweep_grid():
    assert BETA_SWEEP == (0.1, 0.3, 0.5, 0.7, 0.9) and DEFAULT_BETA == 0.3
    base, tuned = pair()
    assert list(wise_ft_sweep(base, tuned)) == list(BETA_SWEEP)


def test_moe_init_equivalence():
    m = init_model(ModelConfig(), np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(6, 32)).astype(np.float32)
    before = mlp_sublayer(x, m, 2, normalize=False)
    layer = moe_wrap(m, 2)
    np.testing.assert_array_equal(moe_routing(x, layer), np.full((6, 2), 0.5))
    assert np.abs(moe_forward(x, layer) - before).max() <= 1e-6
    assert np.abs(mlp_sublayer(x, m, 2, normalize=False) - before).max() <= 1e-6
    with pytest.raises(ConfigError):
        moe_wrap(m, 2)


def test_moe_training_touches_only_new_expert():
    m = init_model(ModelConfig(), np.random.default_rng(0))
    snap = {k: v.tobytes() for k, v in m.params.items()}
    names = moe_wrap_all(m)
    data = generate_task(SyntheticTaskSpec("count", 0, 1600, 8))
    train_steps(m, data.train, names, np.random.default_rng(0), steps=100)
    for k, v in snap.items():
        assert m.params[k].tobytes() == v, k
    layer = moe_layer(m, 0)
    assert any(not np.array_equal(layer.tuned[k], layer.pretrained[k]) for k in layer.tuned)
    assert layer.router.any()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_moe_routing_convex(seed):
    rng = np.random.default_rng(seed)
    m = init_model(ModelConfig(n_layers=1), rng)
    layer = moe_wrap(m, 0)
    layer.router[:] = rng.normal(0, 5, layer.router.shape)
    g = moe_routing(rng.normal(size=(5, 32)), layer)
    assert (g >= 0).all()
    np.testing.assert_allclose(g.sum(-1), 1.0, atol=1e-6)
