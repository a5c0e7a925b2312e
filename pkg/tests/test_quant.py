import numpy as np
import pytest
from hypothesis import given, strategies as st

from nanomind import _alloc, quant
from nanomind.errors import DomainError, FormatError, ShapeError
from nanomind.quant import DenseMatrix, QuantizedMatrix

from oracles import dense_matmul_k_ascending, naive_dequant, naive_group_params, naive_unpack


def rand(rng, r, c, scale=1.0):
    return (scale * rng.standard_normal((r, c))).astype(np.float32)


@st.composite
def quant_case(draw, max_dim=64):
    bits = draw(st.sampled_from([2, 4, 8]))
    gs = draw(st.sampled_from([4, 8, 16, 32]))
    cols = gs * draw(st.integers(1, max(1, max_dim // gs)))
    rows = draw(st.integers(1, 16))
    seed = draw(st.integers(0, 2**31))
    return bits, gs, rows, cols, seed


def test_all_zero_matrix_dequantizes_to_zero():
    q = quant.quantize_blockwise(np.zeros((4, 16), np.float32), 4, 16)
    assert np.all(q.codes() == q.zero_points[0])
    assert np.all(quant.dequantize_blockwise(q).data == 0.0)


def test_integer_ramp_is_exact():
    row = np.arange(16, dtype=np.float32)[None, :]
    q = quant.quantize_blockwise(row, 4, 16)
    assert q.scales[0] == 1.0 and q.zero_points[0] == 0
    assert list(q.codes()[0]) == list(range(16))
    assert np.array_equal(quant.dequantize_blockwise(q).data, row)


def test_direct_dequant_formula():
    # one group, scale 2, zero point 1, codes [0, 1, 2, 0]
    packed = quant.pack_codes(np.array([0, 1, 2, 0], np.uint8), 4)
    q = QuantizedMatrix(1, 4, 4, 4, packed, np.array([2.0], np.float32), np.array([1], np.uint8))
    assert list(quant.dequantize_blockwise(q).data[0]) == [-2.0, 0.0, 2.0, -2.0]


@given(quant_case())
def test_quantizer_matches_naive_formulas(case):
    bits, gs, rows, cols, seed = case
    m = rand(np.random.default_rng(seed), rows, cols, 3.0)
    q = quant.quantize_blockwise(m, bits, gs)
    codes = naive_unpack(q.packed, bits, rows * cols)
    qmax = 2**bits - 1
    for i in range(rows):
        for g in range(cols // gs):
            vals = [float(v) for v in m[i, g * gs:(g + 1) * gs]]
            scale, zp = naive_group_params(vals, bits)
            gi = i * (cols // gs) + g
            assert q.scales[gi] == np.float32(scale)
            assert q.zero_points[gi] == zp
            for j, v in enumerate(vals):
                expect = min(max(round(v / scale) + zp, 0), qmax)
                assert codes[i * cols + g * gs + j] == expect
    assert np.array_equal(quant.dequantize_blockwise(q).data, naive_dequant(q))


@given(quant_case())
def test_round_trip_within_half_scale(case):
    bits, gs, rows, cols, seed = case
    m = rand(np.random.default_rng(seed), rows, cols)
    q = quant.quantize_blockwise(m, bits, gs)
    err = np.abs(quant.dequantize_blockwise(q).data - m).reshape(rows, cols // gs, gs)
    scales = q.scales.reshape(rows, cols // gs)
    ulp = np.spacing(np.abs(m).reshape(rows, cols // gs, gs).max(axis=-1))
    assert np.all(err.max(axis=-1) <= scales / 2 + 2 * ulp)


@given(quant_case(), st.integers(-6, 6))
def test_power_of_two_scaling_scales_codes_exactly(case, e):
    bits, gs, rows, cols, seed = case
    m = rand(np.random.default_rng(seed), rows, cols)
    c = np.float32(2.0**e)
    a, b = quant.quantize_blockwise(m, bits, gs), quant.quantize_blockwise(m * c, bits, gs)
    assert np.array_equal(a.codes(), b.codes())
    assert np.array_equal(a.scales * c, b.scales)


@given(quant_case(), st.floats(0.1, 10.0))
def test_general_scaling_keeps_codes_within_one(case, c):
    bits, gs, rows, cols, seed = case
    m = rand(np.random.default_rng(seed), rows, cols)
    a, b = quant.quantize_blockwise(m, bits, gs), quant.quantize_blockwise(m * np.float32(c), bits, gs)
    assert np.max(np.abs(a.codes().astype(int) - b.codes().astype(int))) <= 1
    np.testing.assert_allclose(a.scales * c, b.scales, rtol=1e-5)


def test_errors():
    with pytest.raises(ShapeError):
        quant.quantize_blockwise(np.zeros((2, 10), np.float32), 4, 4)
    with pytest.raises(DomainError):
        quant.quantize_blockwise(np.full((1, 8), np.nan, np.float32), 4, 8)
    with pytest.raises(ShapeError):
        quant.quantize_blockwise(np.zeros((1, 8), np.float32), 3, 8)
    q = quant.quantize_blockwise(np.ones((2, 8), np.float32), 4, 8)
    with pytest.raises(FormatError):
        QuantizedMatrix(2, 8, 4, 8, q.packed[:-1].copy(), q.scales, q.zero_points)
    with pytest.raises(ShapeError):
        quant.gemm_reference(np.zeros((1, 3), np.float32), q)
    with pytest.raises(ValueError):
        quant.gemm_fused_dequant(np.zeros((1, 2), np.float32), q, activation="relu")


def test_nmq1_container_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    q = quant.quantize_blockwise(rand(rng, 6, 32), 2, 16)
    blob = q.to_bytes()
    assert blob[:4] == b"NMQ1"
    assert int.from_bytes(blob[4:8], "little") == 6 and int.from_bytes(blob[8:12], "little") == 32
    assert len(blob) == 20 + 5 * q.n_groups + 6 * 32 * 2 // 8
    q.save(tmp_path / "w.nmq")
    r = QuantizedMatrix.load(tmp_path / "w.nmq")
    assert r.to_bytes() == blob
    with pytest.raises(FormatError):
        QuantizedMatrix.from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        QuantizedMatrix.from_bytes(blob[:-1])


def test_gemm_zero_input_gives_bias():
    rng = np.random.default_rng(0)
    q = quant.quantize_blockwise(rand(rng, 8, 16), 4, 8)
    bias = rng.standard_normal(16).astype(np.float32)
    out = quant.gemm_reference(np.zeros((1, 8), np.float32), q, bias).data
    assert np.array_equal(out[0], bias)


def test_identity_weights_pass_input_through():
    ident = QuantizedMatrix(8, 8, 4, 8, quant.pack_codes(np.eye(8, dtype=np.uint8), 4),
                            np.ones(8, np.float32), np.zeros(8, np.uint8))
    x = np.random.default_rng(1).standard_normal((3, 8)).astype(np.float32)
    assert np.array_equal(quant.gemm_reference(x, ident).data, x)
    assert np.array_equal(quant.gemm_fused_dequant(x, ident).data, x)


def test_reference_equals_dense_oracle():
    rng = np.random.default_rng(11)
    x = rand(rng, 4, 8)
    q = quant.quantize_blockwise(rand(rng, 8, 6 * 4), 4, 4)
    expect = dense_matmul_k_ascending(x, naive_dequant(q))
    assert np.array_equal(quant.gemm_reference(x, q).data, expect)


@given(quant_case(), st.integers(1, 8), st.sampled_from(["none", "silu", "gelu"]), st.booleans())
def test_fused_matches_reference_with_epilogue(case, m_rows, act, with_bias):
    bits, gs, k, n, seed = case
    rng = np.random.default_rng(seed)
    x = rand(rng, m_rows, k)
    q = quant.quantize_blockwise(rand(rng, k, n), bits, gs)
    bias = rng.standard_normal(n).astype(np.float32) if with_bias else None
    ref = quant.gemm_reference(x, q, bias).data
    fused = quant.gemm_fused_dequant(x, q, bias, act).data
    assert np.array_equal(fused, quant.apply_activation(ref.copy(), act))


def test_fused_never_materializes_full_weights():
    rng = np.random.default_rng(5)
    q = quant.quantize_blockwise(rand(rng, 64, 64), 4, 32)
    x = rand(rng, 2, 64)
    with _alloc.track_allocations() as log:
        quant.gemm_fused_dequant(x, q)
    assert log.counts["dequant_full"] == 0
    assert log.largest <= 8 * 64 * 4 < 64 * 64 * 4
    with _alloc.track_allocations() as log:
        quant.gemm_reference(x, q)
    assert log.counts["dequant_full"] == 1


def test_r16_activations_round_trip_half():
    x = DenseMatrix(np.array([[1.0001, 3.14159, -2.5e-5]], np.float32), "r16")
    assert np.array_equal(x.data, x.data.astype(np.float16).astype(np.float32))
    q = quant.quantize_blockwise(np.ones((3, 4), np.float32), 8, 4)
    out = quant.gemm_fused_dequant(x, q)
    assert out.precision == "r16"
    assert np.array_equal(out.data, out.data.astype(np.float16).astype(np.float32))


def test_determinism():
    rng = np.random.default_rng(9)
    m, x = rand(rng, 32, 32), rand(rng, 4, 32)
    a = quant.gemm_fused_dequant(x, quant.quantize_blockwise(m, 4, 16)).data
    b = quant.gemm_fused_dequant(x, quant.quantize_blockwise(m, 4, 16)).data
    assert a.tobytes() == b.tobytes()
