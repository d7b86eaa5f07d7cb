import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qinfer.errors import InvalidConfig, ShapeError
from qinfer.kernels import (
    KernelConfig,
    dense_linear,
    gemm_ref,
    int8_group_accumulators,
    linear,
    qlinear,
    qlinear_fp32,
    qlinear_int8,
)
from qinfer.quant import QuantizedTensor, QuantRecipe, dequantize_tensor, pack_nibbles, quantize_tensor

import oracles


def random_cfg(rng, cols, gs, batch, rows, threads=None):
    blocks = max(1, cols // gs)
    return KernelConfig(
        tile_rows=int(rng.integers(1, batch + 2)),
        tile_cols=int(rng.integers(1, rows + 2)),
        reduction_block=gs * int(rng.integers(1, blocks + 1)),
        threads=int(threads if threads is not None else rng.choice([1, 2, 4])),
    )


# --- gemm_ref ----------------------------------------------------------------------


def test_gemm_identity_and_scalar(rng):
    x = rng.normal(size=(5, 5)).astype(np.float32)
    np.testing.assert_array_equal(gemm_ref(np.eye(5), x), x)
    assert gemm_ref([[2.0]], [[3.0]]).tolist() == [[6.0]]


def test_gemm_matches_fp64(rng):
    a = rng.normal(size=(8, 8))
    b = rng.normal(size=(8, 8))
    ref = oracles.gemm_fp64(a.astype(np.float32), b.astype(np.float32))
    np.testing.assert_allclose(gemm_ref(a, b), ref, rtol=1e-5, atol=1e-6)


def test_gemm_shape_error():
    with pytest.raises(ShapeError):
        gemm_ref(np.ones((2, 3)), np.ones((2, 3)))


def test_dense_linear_is_bit_exact_to_gemm_ref(rng):
    x = rng.uniform(-3, 3, size=(6, 200)).astype(np.float32)
    w = rng.normal(size=(70, 200)).astype(np.float32)
    ref = gemm_ref(x, w.T)
    np.testing.assert_array_equal(dense_linear(x, w), ref)
    np.testing.assert_array_equal(dense_linear(x, w, cfg=KernelConfig(2, 16, 64, 4)), ref)


# --- fp32 path ------------------------------------------------------------------------


def grid_diag():
    # diag(0.1, 0.2) padded to 32 columns; every value lies on its group's grid
    w = np.zeros((2, 32), dtype=np.float32)
    w[0, 0], w[1, 1] = 0.1, 0.2
    return quantize_tensor(w, QuantRecipe.parse("rtn-asym-g32-fp32"))


def test_fp32_grid_diag():
    x = np.zeros((1, 32), dtype=np.float32)
    x[0, :2] = 1
    np.testing.assert_allclose(qlinear_fp32(x, grid_diag()), [[0.1, 0.2]], rtol=1e-6)


def test_zero_input_gives_bias(rng):
    qt = quantize_tensor(rng.normal(size=(16, 64)), QuantRecipe.parse("rtn-asym-g32-int8"))
    bias = rng.normal(size=16).astype(np.float32)
    np.testing.assert_array_equal(qlinear_fp32(np.zeros((3, 64)), qt, bias), np.tile(bias, (3, 1)))
    np.testing.assert_array_equal(qlinear_int8(np.zeros((3, 64)), qt, bias), np.tile(bias, (3, 1)))


@pytest.mark.parametrize("text", ["rtn-asym-g32-fp32", "rtn-sym-g64-fp32", "rtn-asym-pc-fp32"])
def test_fp32_path_matches_dequant_gemm(rng, text):
    x = rng.uniform(-10, 10, size=(4, 256)).astype(np.float32)
    qt = quantize_tensor(rng.normal(size=(128, 256)), QuantRecipe.parse(text))
    ref = gemm_ref(x, dequantize_tensor(qt).T)
    out = qlinear_fp32(x, qt)
    assert np.max(np.abs(out - ref)) <= 1e-5
    np.testing.assert_allclose(out, x.astype(np.float64) @ oracles.dequant_fp64(qt).T, rtol=1e-4, atol=1e-3)


def test_fp32_path_is_linear_in_x(rng):
    x = rng.uniform(-1, 1, size=(3, 128)).astype(np.float32)
    qt = quantize_tensor(rng.normal(size=(32, 128)), QuantRecipe.parse("rtn-asym-g32-fp32"))
    base = qlinear_fp32(x, qt)
    for alpha in (2.0, 0.25, -4.0):  # powers of two scale exactly
        np.testing.assert_allclose(qlinear_fp32(np.float32(alpha) * x, qt), alpha * base, rtol=1e-6)


def test_shape_errors(rng):
    qt = quantize_tensor(rng.normal(size=(8, 64)), QuantRecipe.parse("rtn-asym-g32-int8"))
    for fn in (qlinear_fp32, qlinear_int8):
        with pytest.raises(ShapeError):
            fn(np.ones((1, 32)), qt)
    with pytest.raises(ShapeError):
        qlinear_fp32(np.ones((1, 64)), qt, bias=np.ones(3))


def test_kernel_config_validation():
    with pytest.raises(InvalidConfig):
        KernelConfig(threads=0)
    with pytest.raises(InvalidConfig):
        KernelConfig(reduction_block=48).groups_per_block(128, 32)
    assert KernelConfig(reduction_block=4096).groups_per_block(128, 32) == 4


# --- int8 path ------------------------------------------------------------------------


def test_int8_exact_when_both_quantizations_exact():
    # power-of-two scales on both sides so every product and rescale is exact
    w = np.zeros((2, 32), dtype=np.float32)
    w[0, 0], w[1, 1] = 15 / 16, 15 / 32
    qt = quantize_tensor(w, QuantRecipe.parse("rtn-asym-g32-int8"))
    assert qt.scales.ravel().tolist() == [1 / 16, 1 / 32]
    x = np.zeros((1, 32), dtype=np.float32)
    x[0, 0] = 127 / 64
    x[0, 1] = 63 / 64
    np.testing.assert_array_equal(qlinear_int8(x, qt), qlinear_fp32(x, qt))


@pytest.mark.parametrize("gs", [32, 64, 128, 256])
@pytest.mark.parametrize("scheme", ["asym", "sym"])
def test_int8_vs_fp32_relative_l2(rng, gs, scheme):
    x = rng.uniform(-1, 1, size=(4, 256)).astype(np.float32)
    qt = quantize_tensor(rng.normal(size=(128, 256)), QuantRecipe.parse(f"rtn-{scheme}-g{gs}-int8"))
    a, b = qlinear_int8(x, qt), qlinear_fp32(x, qt)
    assert np.linalg.norm(a - b) / np.linalg.norm(b) <= 2e-2


@pytest.mark.parametrize("scheme", ["asym", "sym"])
def test_int8_integer_accumulators_match_wide_oracle(rng, scheme):
    x = rng.uniform(-1, 1, size=(3, 128)).astype(np.float32)
    qt = quantize_tensor(rng.normal(size=(16, 128)), QuantRecipe.parse(f"rtn-{scheme}-g32-int8"))
    got = int8_group_accumulators(x, qt)
    want = oracles.int8_accumulators(x, qt)
    assert got.tolist() == want.tolist()


def test_int8_output_recomposes_from_accumulators(rng):
    from qinfer.quant import quantize_activations

    x = rng.uniform(-1, 1, size=(2, 64)).astype(np.float32)
    qt = quantize_tensor(rng.normal(size=(8, 64)), QuantRecipe.parse("rtn-asym-g32-int8"))
    acc = int8_group_accumulators(x, qt).astype(np.float64)
    act = quantize_activations(x, 32)
    want = (acc * act.scales[:, None, :] * qt.scales[None]).sum(-1)
    np.testing.assert_allclose(qlinear_int8(x, qt), want, rtol=1e-5, atol=1e-6)


def test_int8_extreme_codes_do_not_overflow():
    # every activation code +/-127 and every weight code at the ends of its range
    cols = 1024
    codes = np.tile([0, 15], (4, cols // 2)).astype(np.uint8)
    qt = QuantizedTensor(4, cols, QuantRecipe.parse("rtn-asym-g1024-int8"), pack_nibbles(codes),
                         np.ones((4, 1), np.float32), np.zeros((4, 1), np.uint8))
    x = np.ones((1, cols), dtype=np.float32)
    assert int8_group_accumulators(x, qt)[0, 0, 0] == 127 * 15 * cols // 2


# --- dispatch and blocking ---------------------------------------------------------------


def test_dispatch(rng):
    x = rng.uniform(-1, 1, size=(2, 64)).astype(np.float32)
    w = rng.normal(size=(8, 64)).astype(np.float32)
    q8 = quantize_tensor(w, QuantRecipe.parse("rtn-asym-g32-int8"))
    q32 = quantize_tensor(w, QuantRecipe.parse("rtn-asym-g32-fp32"))
    np.testing.assert_array_equal(qlinear(x, q8), qlinear_int8(x, q8))
    np.testing.assert_array_equal(qlinear(x, q32), qlinear_fp32(x, q32))
    np.testing.assert_array_equal(linear(x, w), dense_linear(x, w))


@pytest.mark.parametrize("path", ["fp32", "int8"])
def test_full_tile_config_equals_direct_call(rng, path):
    x = rng.uniform(-1, 1, size=(5, 128)).astype(np.float32)
    qt = quantize_tensor(rng.normal(size=(40, 128)), QuantRecipe.parse(f"rtn-asym-g32-{path}"))
    np.testing.assert_array_equal(qlinear(x, qt, cfg=KernelConfig(5, 40, 128, 1)), qlinear(x, qt))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["fp32", "int8"]), st.sampled_from(["asym", "sym"]))
def test_blocked_threaded_bit_identical(seed, path, scheme):
    rng = np.random.default_rng(seed)
    gs = int(rng.choice([32, 64]))
    cols, rows, batch = gs * int(rng.integers(1, 6)), int(rng.integers(1, 70)), int(rng.integers(1, 9))
    x = rng.uniform(-1, 1, size=(batch, cols)).astype(np.float32)
    qt = quantize_tensor(rng.normal(size=(rows, cols)), QuantRecipe.parse(f"rtn-{scheme}-g{gs}-{path}"))
    ref = qlinear(x, qt)
    for threads in (1, 2, 4):
        np.testing.assert_array_equal(qlinear(x, qt, cfg=random_cfg(rng, cols, gs, batch, rows, threads)), ref)
