import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, strategies as st

from bmitl.edgebudget import (
    CostModel,
    affine_qparams,
    battery_life,
    budget_report,
    count_macs,
    estimate_inference,
    float_logits,
    quantize,
    quantized_forward,
    quantized_logits,
)
from bmitl.tinynet import NetConfig, forward, init_model, train

LAYERS = ("temporal", "spatial", "sep_depth", "sep_point", "dense")


def instrumented(cfg, batch=2):
    counter = {}
    forward(init_model(cfg), np.zeros((batch, cfg.n_channels, cfg.n_samples), np.float32), mac_counter=counter)
    return {k: v // batch for k, v in counter.items()}


def test_default_macs_match_instrumentation():
    macs = count_macs(NetConfig())
    assert macs["total"] == 2_128_064
    assert {k: macs[k] for k in LAYERS} == instrumented(NetConfig())


@given(
    st.integers(1, 6), st.integers(1, 33), st.integers(1, 3), st.integers(1, 17),
    st.integers(1, 8), st.integers(1, 8), st.integers(2, 8), st.integers(64, 300),
)
def test_macs_match_instrumentation_random(F1, L1, D, L2, P1, P2, C, T):
    if (T // P1) // P2 < 1:
        return
    cfg = NetConfig(F1=F1, L1=L1, D=D, L2=L2, P1=P1, P2=P2, n_channels=C, n_samples=T)
    macs = count_macs(cfg)
    assert {k: macs[k] for k in LAYERS} == instrumented(cfg, batch=1)
    assert macs["total"] == sum(macs[k] for k in LAYERS)


def test_dense_only_degenerate():
    cfg = NetConfig(F1=1, L1=1, D=1, L2=1, P1=1, P2=1)
    assert count_macs(cfg)["dense"] == cfg.flat * 2


def test_doubling_f1_doubles_temporal():
    assert count_macs(NetConfig(F1=16))["temporal"] == 2 * count_macs(NetConfig())["temporal"]


def test_edge_anchor():
    r = budget_report(NetConfig())
    assert 5.0 <= r["latency_ms"] <= 7.0
    assert r["energy_uj"] <= 30.0
    assert set(r) == {"macs", "latency_ms", "energy_uj", "avg_power_mw", "battery_h"}


def test_estimate_formula():
    cost = CostModel()
    lat, en = estimate_inference(cost, 0)
    assert lat == cost.overhead_s
    lat, en = estimate_inference(cost, 1_000_000)
    assert lat == pytest.approx(1e6 / cost.mac_throughput + cost.overhead_s, rel=1e-9)
    assert en == pytest.approx(cost.active_power_w * lat, rel=1e-9)
    _, en2 = estimate_inference(replace(cost, active_power_w=2 * cost.active_power_w), 1_000_000)
    assert en2 == pytest.approx(2 * en, rel=1e-9)


def test_battery_life():
    assert battery_life(CostModel()) == pytest.approx(30.0625, abs=1e-9)
    assert battery_life(CostModel(battery_mah=0.0)) == 0.0
    half = CostModel(avg_power_w=4e-3)
    assert battery_life(half) == pytest.approx(2 * battery_life(CostModel()), rel=1e-9)


def test_cost_model_validation():
    with pytest.raises(ValueError):
        CostModel(mac_throughput=0)


@given(st.floats(-10, 0), st.floats(0, 10), st.booleans())
def test_qparams_represent_zero_exactly(lo, hi, signed):
    qp = affine_qparams(lo, hi, signed)
    assert qp.dequantize(qp.quantize(np.zeros(1)))[0] == 0.0


@given(st.integers(0, 1000))
def test_weight_roundtrip_error_bound(seed):
    w = np.random.default_rng(seed).standard_normal(50) * 0.3
    qp = affine_qparams(w.min(), w.max(), signed=True)
    err = np.abs(qp.dequantize(qp.quantize(w)) - w)
    assert err.max() <= qp.scale / 2 + 1e-12


def test_rounding_is_half_to_even():
    qp = affine_qparams(-1.0, 1.0, signed=True)
    x = np.array([0.5, 1.5, 2.5]) * qp.scale
    np.testing.assert_array_equal(qp.quantize(x) - qp.zero_point, [0, 2, 2])


@pytest.fixture(scope="module")
def trained():
    rng = np.random.default_rng(0)
    y = np.arange(120) % 2
    t = np.arange(950) / 250
    x = rng.standard_normal((120, 8, 950))
    for i, lab in enumerate(y):
        x[i, 2 + 3 * lab] += 1.5 * np.sin(2 * np.pi * 10 * t + rng.uniform(0, 6.3))
    x = x.astype(np.float32)
    ck, _ = train(init_model(NetConfig()), x, y, epochs=8, batch_size=16)
    return ck.model, x, y


def test_folded_float_path_matches_forward(trained):
    model, x, _ = trained
    np.testing.assert_allclose(float_logits(model, x[:8]), forward(model.astype(np.float64), x[:8]), atol=1e-8)


def test_quantized_agreement_and_audit(trained):
    model, x, _ = trained
    q = quantize(model, x)
    audit = {}
    cls, probs = quantized_forward(q, x, audit)
    assert np.mean(cls == forward(model, x).argmax(axis=1)) >= 0.98
    np.testing.assert_allclose(probs.sum(axis=1), 1)
    assert set(audit) == set(LAYERS)
    assert max(audit.values()) < 2**31


def test_quantized_zero_input(trained):
    model, x, _ = trained
    q = quantize(model, x)
    z = np.zeros((8, 950))
    assert quantized_forward(q, z)[0] == int(forward(model, z).argmax())


def test_audit_flags_overflow(trained):
    model, x, _ = trained
    q = quantize(model, x)
    q.dense_bias = np.full(2, 2**40, dtype=np.int64)
    with pytest.raises(OverflowError, match="dense"):
        quantized_logits(q, x[:2], audit={})


def test_calibration_set_requirements(trained):
    model, x, _ = trained
    with pytest.raises(ValueError, match="empty"):
        quantize(model, x[:0])
    with pytest.raises(ValueError, match=">= 100"):
        quantize(model, x[:50])
