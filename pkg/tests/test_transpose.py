import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fp8flow import codec
from fp8flow.counters import PassCounter
from fp8flow.errors import ScaleModeError, ShapeError
from fp8flow.rng import SeededStream
from fp8flow.samples import aligned_magnitudes, gaussian
from fp8flow.tile_quant import TILE, Layout, QuantizedTensor, ScaleMode, dequantize, quantize
from fp8flow.transpose import (
    ErrorStats,
    block_shifts,
    direct_transpose,
    double_quant_error,
    naive_transpose,
    underflow_count,
)


def random_pow2_tensor(seed: int, rows: int, cols: int, spread: int = 6) -> QuantizedTensor:
    """Arbitrary row-wise pow2 tensor: random non-NaN codes, random tile exponents."""
    rs = SeededStream(seed)
    codes = (rs.raw(rows * cols) % 254).astype(np.uint8).reshape(rows, cols)
    codes = np.where(codes >= 0x7F, codes + 1, codes).astype(np.uint8)  # skip 0x7F
    exps = (rs.raw(rows * cols // TILE) % (2 * spread + 1)).astype(np.int32).reshape(rows, cols // TILE) - spread
    return QuantizedTensor(codes, exps, Layout.ROW, ScaleMode.POW2).validate()


def direct_oracle(q: QuantizedTensor) -> np.ndarray:
    """Element-by-element evaluation of the block-align-and-shift rule."""
    out = np.empty_like(q.codes)
    for b in range(q.rows // TILE):
        for t in range(q.cols // TILE):
            rows = slice(b * TILE, (b + 1) * TILE)
            block_codes = q.codes[rows, t * TILE : (t + 1) * TILE]
            t_row = q.scales[rows, t]
            live = block_codes.any(axis=1)
            t_max = t_row[live].max() if live.any() else 0
            for i in range(TILE):
                k = int(t_max - t_row[i]) if live[i] else 0
                for j in range(TILE):
                    out[b * TILE + i, t * TILE + j] = codec.shift_exponent(int(block_codes[i, j]), k)
    return out


def test_aligned_input_is_exact():
    for seed in range(5):
        x = aligned_magnitudes(seed, 256, 256)
        q = quantize(x, Layout.ROW, ScaleMode.POW2)
        assert underflow_count(q) == 0
        out = direct_transpose(q)
        assert out.layout is Layout.COL and out.scale_mode is ScaleMode.POW2
        assert np.array_equal(dequantize(out), dequantize(q))
        assert np.array_equal(dequantize(out.T), dequantize(q).T)


def test_equal_scales_give_pure_transpose():
    x = aligned_magnitudes(3, 256, 128)
    x[:, ::TILE] = 300.0  # every row tile has the same maximum, hence the same exponent
    q = quantize(x, Layout.ROW, ScaleMode.POW2)
    assert len(np.unique(q.scales)) == 1
    out = direct_transpose(q)
    assert np.array_equal(out.T.codes, q.codes.T)
    assert np.all(out.scales == q.scales[0, 0])


def test_one_row_with_larger_scale():
    x = np.zeros((TILE, TILE))
    x[:, 0] = 256.0  # scale 2^0
    x[3, 0] = 1024.0  # scale 2^2
    x[0, 1] = 1.0
    q = quantize(x, Layout.ROW, ScaleMode.POW2)
    assert q.scales[0, 0] == 0 and q.scales[3, 0] == 2
    assert q.codes[0, 1] == 0x38
    out = direct_transpose(q)
    assert np.all(out.scales == 2)
    assert out.codes[0, 1] == 0x28
    assert codec.decode_e4m3(0x28) * 4 == 1.0
    assert np.array_equal(dequantize(out), x)


def test_shift_into_subnormal_edge():
    x = np.zeros((TILE, TILE))
    x[:, 0] = 256.0  # scale 2^0
    x[0, 1] = 2.0**-6  # code 0x08
    x[1, 0] = 4096.0  # scale 2^4, so row 0 shifts by k = 4
    q = quantize(x, Layout.ROW, ScaleMode.POW2)
    assert q.codes[0, 1] == 0x08
    k, t_max = block_shifts(q)
    assert k[0, 0] == 4 and t_max[0, 0] == 4
    out = direct_transpose(q)
    # 2^-10 is a tie between 0 and the smallest subnormal; nearest-even picks 0x00
    assert out.codes[0, 1] == 0x00
    err = abs(codec.decode_e4m3(int(out.codes[0, 1])) * 16 - x[0, 1])
    assert err <= 0.5 * codec.E4M3_MIN_SUBNORMAL * 16
    assert underflow_count(q) >= 1


def test_matches_elementwise_oracle():
    for seed in range(3):
        q = random_pow2_tensor(seed, 256, 128)
        assert np.array_equal(direct_transpose(q).codes, direct_oracle(q))


@given(st.integers(0, 2**32), st.integers(0, 10))
def test_exactness_theorem(seed, spread):
    q = random_pow2_tensor(seed, 128, 256, spread)
    out = direct_transpose(q)
    exact = dequantize(out) == dequantize(q)
    if underflow_count(q) == 0:
        assert exact.all()
    # the elements that lose value are exactly the ones flagged as underflow
    assert np.count_nonzero(~exact) == underflow_count(q)


@given(st.integers(0, 2**32))
def test_scale_alignment(seed):
    q = random_pow2_tensor(seed, 256, 256)
    out = direct_transpose(q)
    for b in range(2):
        for t in range(2):
            blk = out.scales[b, t * TILE : (t + 1) * TILE]
            assert np.all(blk == blk[0])
            rows = slice(b * TILE, (b + 1) * TILE)
            live = q.codes[rows, t * TILE : (t + 1) * TILE].any(axis=1)
            assert blk[0] == (q.scales[rows, t][live].max() if live.any() else 0)


def test_zero_rows_do_not_raise_block_scale():
    x = aligned_magnitudes(1, 128, 128)
    x[:64] = 0.0
    q = quantize(x, Layout.ROW, ScaleMode.POW2)
    k, t_max = block_shifts(q)
    live = x[64:].any(axis=1)
    assert t_max[0, 0] == q.scales[64:, 0][live].max()
    assert t_max[0, 0] < 0  # zero tiles carry exponent 0 but are ignored
    assert np.all(k[:64] == 0)


def test_pass_counts():
    q = quantize(gaussian(0, 256, 256), Layout.ROW, ScaleMode.POW2)
    naive, direct = PassCounter(), PassCounter()
    naive_transpose(q, naive)
    direct_transpose(q, direct)
    assert naive.passes == 3 and set(naive.by_op) == {"dequantize", "transpose", "quantize"}
    assert direct.passes == 1


@pytest.mark.parametrize("mode", list(ScaleMode))
def test_naive_is_requantize_of_dequantized(mode):
    x = gaussian(4, 256, 128)
    q = quantize(x, Layout.ROW, mode)
    assert naive_transpose(q) == quantize(dequantize(q), Layout.COL, mode)


def test_input_validation():
    q = quantize(gaussian(0, 128, 128), Layout.ROW, ScaleMode.REAL)
    with pytest.raises(ScaleModeError):
        direct_transpose(q)
    with pytest.raises(ShapeError):
        naive_transpose(q.T)
    with pytest.raises(ShapeError):
        naive_transpose(quantize(gaussian(0, 100, 128), Layout.ROW))


def test_constant_matrix_has_no_error():
    x = np.full((256, 256), -3.3)
    for mode, path in ((ScaleMode.REAL, "naive"), (ScaleMode.POW2, "naive"), (ScaleMode.POW2, "direct")):
        r = double_quant_error(x, mode, path)
        assert r.error.nonzero_count == 0 and r.drift.nonzero_count == 0


def test_equal_row_and_column_maxima_have_no_error():
    rs = SeededStream(8)
    x = rs.uniform((TILE, TILE), -100.0, 100.0)
    np.fill_diagonal(x, 400.0)
    r = double_quant_error(x, ScaleMode.REAL, "naive")
    assert r.error.max_abs == 0.0


def test_gaussian_naive_error_fixture():
    r = double_quant_error(gaussian(7, 256, 256), ScaleMode.REAL, "naive")
    assert r.error.nonzero_count > 0
    assert r.error.nonzero_count == 42360
    assert r.error.rms == pytest.approx(0.044106907339821165, rel=1e-12)
    assert r.drift.rms == pytest.approx(0.02575768694550258, rel=1e-12)


def test_direct_drift_is_zero_without_underflow():
    x = aligned_magnitudes(9, 512, 512)
    r = double_quant_error(x, ScaleMode.POW2, "direct")
    assert r.underflow == 0 and r.drift.max_abs == 0.0


def test_error_dominance_over_seeded_matrices():
    for i in range(1000):
        rs = SeededStream(10_000 + i)
        x = rs.normal((TILE, TILE)) if i % 2 == 0 else rs.lognormal((TILE, TILE), 2.0)
        naive = double_quant_error(x, ScaleMode.REAL, "naive")
        direct = double_quant_error(x, ScaleMode.POW2, "direct")
        assert direct.drift.rms <= naive.drift.rms
        if naive.drift.nonzero_count > 0 and direct.underflow == 0:
            assert direct.drift.rms < naive.drift.rms


def test_double_quant_error_validation():
    with pytest.raises(ScaleModeError):
        double_quant_error(np.ones((128, 128)), ScaleMode.REAL, "direct")
    with pytest.raises(ValueError):
        double_quant_error(np.ones((128, 128)), ScaleMode.REAL, "sideways")
    with pytest.raises(ShapeError):
        double_quant_error(np.ones((128, 100)))


def test_error_stats():
    s = ErrorStats.of(np.array([0.0, 3.0, -4.0, 0.0]))
    assert s.max_abs == 4.0 and s.rms == 2.5 and s.mean_abs == 1.75
    assert s.nonzero_count == 2 and s.total_count == 4
    assert s.max_abs >= s.rms >= 0
    assert ErrorStats.of(np.array([])).total_count == 0


def test_negative_zero_rows_are_zero_rows():
    x = aligned_magnitudes(2, 128, 128)
    x[:10] = -0.0
    q = quantize(x, Layout.ROW, ScaleMode.POW2)
    assert np.all(q.codes[:10] == 0x80)
    k, t_max = block_shifts(q)
    assert np.all(k[:10] == 0)
    assert t_max[0, 0] == q.scales[10:, 0][x[10:].any(axis=1)].max()
