import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fp8flow.codec import round_bf16
from fp8flow.counters import PassCounter
from fp8flow.errors import ConfigError, ShapeError
from fp8flow.fused_ops import (
    PAD,
    build_routing,
    fused_permute_pad,
    fused_swiglu_quant,
    fused_unpermute_unpad,
    pad,
    permute,
    plan_from_assignments,
    silu,
    swiglu,
    swiglu_backward,
    unfused_swiglu_quant,
    unfused_unpermute_unpad,
)
from fp8flow.rng import SeededStream
from fp8flow.tile_quant import Layout, ScaleMode, dequantize, quantize


def random_instance(seed: int, tokens: int = 40, experts: int = 4, top_k: int = 2, hidden: int = 128):
    rs = SeededStream(seed)
    plan = build_routing(rs.normal((tokens, experts)), top_k)
    x = round_bf16(rs.normal((tokens, hidden)))
    return plan, x, rs


def test_three_token_example():
    plan = plan_from_assignments([[1], [0], [1]], np.ones((3, 1)), num_experts=2)
    assert plan.inverse_map.tolist() == [1] + [PAD] * 15 + [0, 2] + [PAD] * 14
    assert plan.offsets.tolist() == [0, 16, 32]
    x = np.array([[1.0], [2.0], [3.0]])
    buf = fused_permute_pad(x, plan)
    assert buf[:, 0].tolist() == [2.0] + [0.0] * 15 + [1.0, 3.0] + [0.0] * 14


def test_seven_tokens_pad_to_sixteen():
    plan = plan_from_assignments(np.zeros((7, 1), int), np.ones((7, 1)), num_experts=1)
    assert plan.padded_rows == 16
    assert np.count_nonzero(plan.inverse_map == PAD) == 9
    assert plan.inverse_map[:7].tolist() == list(range(7))


def test_routing_ties_go_to_lower_index():
    plan = build_routing(np.array([[1.0, 3.0, 3.0, 0.0]]), top_k=2)
    assert plan.experts.tolist() == [[1, 2]]
    assert np.allclose(plan.gates, 0.5)


def test_routing_gates_sum_to_one():
    plan, _, _ = random_instance(0, tokens=100, experts=8, top_k=3)
    assert np.allclose(plan.gates.sum(axis=1), 1.0)
    assert plan.expert_counts.sum() == 300
    assert np.all(plan.padded_counts % 16 == 0)


def test_routing_validation():
    with pytest.raises(ConfigError):
        build_routing(np.zeros((4, 3)), top_k=4)
    with pytest.raises(ConfigError):
        plan_from_assignments([[0, 0]], np.ones((1, 2)), num_experts=2)
    with pytest.raises(ConfigError):
        plan_from_assignments([[5]], np.ones((1, 1)), num_experts=2)
    with pytest.raises(ShapeError):
        plan_from_assignments([[0]], np.ones((2, 1)), num_experts=2)


def test_row_maps_are_consistent():
    plan, _, _ = random_instance(3, tokens=50, experts=6, top_k=2)
    for t in range(plan.num_tokens):
        for j in range(plan.top_k):
            r = plan.row_of[t, j]
            assert plan.inverse_map[r] == t and plan.slot_map[r] == j
            assert plan.expert_rows(plan.experts[t, j]).start <= r < plan.expert_rows(plan.experts[t, j]).stop


@given(st.integers(0, 2**32), st.integers(1, 60), st.integers(1, 6), st.sampled_from([1, 8, 16]))
def test_fused_permute_pad_matches_two_stage(seed, tokens, experts, multiple):
    rs = SeededStream(seed)
    plan = build_routing(rs.normal((tokens, experts)), min(2, experts), multiple)
    x = rs.normal((tokens, 128))
    assert np.array_equal(fused_permute_pad(x, plan), pad(permute(x, plan), plan, None), equal_nan=True)


@given(st.integers(0, 2**32), st.integers(1, 60), st.integers(1, 6))
def test_fused_unpermute_matches_two_stage(seed, tokens, experts):
    rs = SeededStream(seed)
    plan = build_routing(rs.normal((tokens, experts)), min(2, experts))
    buf = fused_permute_pad(rs.normal((tokens, 128)), plan) * 1.5
    for gates in (None, plan.gates):
        a = fused_unpermute_unpad(buf, plan, gates)
        b = unfused_unpermute_unpad(buf, plan, gates)
        assert np.array_equal(a, b)


def test_fused_paths_on_seeded_instances():
    for seed in range(1000):
        plan, x, rs = random_instance(seed, tokens=24, experts=4, top_k=2)
        buf = fused_permute_pad(x, plan)
        assert np.array_equal(buf, pad(permute(x, plan), plan))
        assert np.array_equal(fused_unpermute_unpad(buf, plan, plan.gates), unfused_unpermute_unpad(buf, plan, plan.gates))


def test_permute_round_trip_with_unit_gates():
    plan, x, _ = random_instance(1, top_k=1)
    assert np.array_equal(fused_unpermute_unpad(fused_permute_pad(x, plan), plan), x)


def test_top_k_copies_sum():
    plan, x, _ = random_instance(2, top_k=3)
    assert np.array_equal(fused_unpermute_unpad(fused_permute_pad(x, plan), plan), x + x + x)


def test_quantized_tokens_travel_with_scales():
    plan, x, _ = random_instance(5)
    q = quantize(x, Layout.ROW, ScaleMode.POW2)
    buf = fused_permute_pad(q, plan)
    assert np.array_equal(dequantize(buf), fused_permute_pad(dequantize(q), plan))
    with pytest.raises(ShapeError):
        fused_permute_pad(quantize(np.ones((128, 128)), Layout.COL), build_routing(np.ones((128, 2)), 1))


def test_padding_rows_do_not_leak():
    plan, x, _ = random_instance(6)
    buf = fused_permute_pad(x, plan)
    assert np.all(buf[plan.inverse_map == PAD] == 0)
    buf[plan.inverse_map == PAD] = 1e6  # garbage in padding must be ignored
    assert np.array_equal(fused_unpermute_unpad(buf, plan, plan.gates), unfused_unpermute_unpad(buf, plan, plan.gates))
    clean = fused_permute_pad(x, plan)
    assert np.array_equal(fused_unpermute_unpad(buf, plan, plan.gates), fused_unpermute_unpad(clean, plan, plan.gates))


def test_buffer_shape_checks():
    plan, x, _ = random_instance(7)
    with pytest.raises(ShapeError):
        fused_permute_pad(x[:-1], plan)
    with pytest.raises(ShapeError):
        fused_unpermute_unpad(np.zeros((plan.padded_rows + 1, 128)), plan)
    with pytest.raises(ShapeError):
        fused_unpermute_unpad(np.zeros((plan.padded_rows, 128)), plan, np.ones((3, 3)))


def test_pass_counts():
    plan, x, _ = random_instance(8)
    fused, unfused = PassCounter(), PassCounter()
    buf = fused_permute_pad(x, plan, fused)
    pad(permute(x, plan, unfused), plan, unfused)
    assert fused.passes == 1 and unfused.passes == 2
    fused, unfused = PassCounter(), PassCounter()
    fused_unpermute_unpad(buf, plan, plan.gates, fused)
    unfused_unpermute_unpad(buf, plan, plan.gates, unfused)
    assert fused.passes == 1 and unfused.passes == 3
    h = round_bf16(SeededStream(0).normal((128, 256)))
    fused, unfused = PassCounter(), PassCounter()
    fused_swiglu_quant(h, counter=fused)
    unfused_swiglu_quant(h, counter=unfused)
    assert fused.passes == 1 and unfused.passes == 2


def test_swiglu_values():
    h = np.array([[0.0, 5.0], [1.0, 2.0], [-40.0, 1.0]])
    y = swiglu(h)
    assert y[0, 0] == 0.0
    assert y[1, 0] == pytest.approx(2.0 / (1.0 + np.exp(-1.0)))
    assert abs(y[2, 0]) < 1e-15
    assert silu(np.array([800.0]))[0] == 800.0
    with pytest.raises(ShapeError):
        swiglu(np.ones((2, 3)))


@pytest.mark.parametrize("layout", list(Layout))
@pytest.mark.parametrize("mode", list(ScaleMode))
def test_fused_swiglu_quant_is_bitwise(layout, mode):
    for seed in range(20):
        h = round_bf16(SeededStream(seed).normal((256, 512), 2.0))
        assert fused_swiglu_quant(h, layout, mode) == unfused_swiglu_quant(h, layout, mode)


@given(st.integers(0, 2**32), st.integers(1, 300))
def test_fused_swiglu_quant_ragged_rows(seed, rows):
    h = round_bf16(SeededStream(seed).normal((rows, 256), 3.0))
    assert fused_swiglu_quant(h) == unfused_swiglu_quant(h)


def test_swiglu_quant_shape_errors():
    with pytest.raises(ShapeError):
        fused_swiglu_quant(np.ones((128, 200)))
    with pytest.raises(ShapeError):
        fused_swiglu_quant(np.ones((100, 256)), Layout.COL)
    with pytest.raises(TypeError):
        swiglu(quantize(np.ones((128, 256))))


def test_swiglu_backward_closed_form():
    dh = swiglu_backward(np.array([[0.0, 1.0]]), np.array([[1.0]]))
    assert dh.tolist() == [[0.5, 0.0]]


def test_swiglu_backward_finite_difference():
    rs = SeededStream(11)
    h = rs.normal((16, 64), 2.0)
    dy = rs.normal((16, 32))
    analytic = swiglu_backward(h, dy, round_output=False)
    eps = 1e-6
    fd = np.empty_like(h)
    for idx in np.ndindex(h.shape):
        hp, hm = h.copy(), h.copy()
        hp[idx] += eps
        hm[idx] -= eps
        fd[idx] = ((swiglu(hp) - swiglu(hm)) * dy).sum() / (2 * eps)
    assert np.max(np.abs(analytic - fd)) < 1e-6


def test_swiglu_backward_rounds_to_bf16():
    rs = SeededStream(12)
    h, dy = rs.normal((8, 32)), rs.normal((8, 16))
    dh = swiglu_backward(h, dy)
    assert np.array_equal(dh, round_bf16(dh))
    with pytest.raises(ShapeError):
        swiglu_backward(h, dy[:, :8])
