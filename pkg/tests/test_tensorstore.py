import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from wholekernel.config import ModelConfig, QuantConfig, preset, stacked_linear
from wholekernel.tensorstore import (CapacityError, QuantGroup, QuantizedMatrix, decoder_weight_bytes, dequantize,
                                     init_weights, kv_append, kv_bytes_per_position, kv_cache_bytes, load_store,
                                     matrix_layout, pack_int4, quantize_group, round_bf16, save_store,
                                     streamed_weight_bytes, total_parameter_bytes, unpack_int4, KVCache,
                                     fill_random_prefill)

finite = st.floats(-1e4, 1e4, allow_nan=False, width=32)


def test_round_bf16_known_values():
    x = np.array([1.0, 1.0 + 2**-8, 1.0 + 3 * 2**-8, -2.5, 0.0], np.float32)
    # ties go to even mantissa: 1+2^-8 is halfway between 1 and 1+2^-7
    assert round_bf16(x).tolist() == [1.0, 1.0, 1.0 + 2**-6, -2.5, 0.0]


@given(hnp.arrays(np.float32, st.integers(1, 64), elements=finite))
def test_round_bf16_idempotent_and_close(x):
    r = round_bf16(x)
    assert np.array_equal(round_bf16(r), r)
    assert np.all(np.abs(r - x) <= np.abs(x) * 2**-8 + 1e-38)


def test_dequantize_known_group():
    g = QuantGroup(np.array([0, 1, 15], np.uint8), scale=0.5, zero_point=8)
    np.testing.assert_array_equal(dequantize(g), [-4.0, -3.5, 3.5])
    with pytest.raises(ValueError):
        dequantize(QuantGroup(np.array([16], np.uint8), 1.0, 0.0))


@given(hnp.arrays(np.float64, 128, elements=st.floats(-8, 8, allow_nan=False)))
def test_quantize_group_error_bounded(values):
    g = quantize_group(values)
    assert g.codes.min() >= 0 and g.codes.max() <= 15
    assert np.float16(g.scale) == g.scale
    # within half a step (plus fp16 scale rounding slack) of every value
    err = np.abs(dequantize(g) - values)
    assert err.max() <= 0.5 * g.scale + 2e-3 * max(abs(values).max(), 1e-3)


@given(hnp.arrays(np.uint8, st.integers(1, 40).map(lambda n: 2 * n), elements=st.integers(0, 15)))
def test_pack_unpack_round_trip(codes):
    packed = pack_int4(codes)
    assert packed.size == codes.size // 2
    np.testing.assert_array_equal(unpack_int4(packed), codes)


def test_pack_rejects_odd_length():
    with pytest.raises(ValueError):
        pack_int4(np.zeros(3, np.uint8))


def test_quantized_matrix_matches_group_quantizer():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((3, 256)).astype(np.float32)
    qm = QuantizedMatrix.from_dense(w, 128)
    dense = qm.dense()
    for r in range(3):
        for gi in range(2):
            g = quantize_group(w[r, gi * 128:(gi + 1) * 128])
            np.testing.assert_allclose(dense[r, gi * 128:(gi + 1) * 128], dequantize(g), rtol=0, atol=1e-6)


def test_llama8b_byte_accounting():
    m = preset("llama31_8b")
    per_layer = (6144 + 4096 + 2 * 14336 + 14336) * 4096 * 2
    assert decoder_weight_bytes(m) == 32 * per_layer == 13_958_643_712
    assert streamed_weight_bytes(m) == decoder_weight_bytes(m) + 128256 * 4096 * 2
    assert total_parameter_bytes(m) == streamed_weight_bytes(m) + (65 + 128256) * 4096 * 2
    assert kv_bytes_per_position(m) == 256
    assert kv_cache_bytes(m) == 2 * 32 * 8 * 8192 * 256


def test_int4_row_bytes_include_group_metadata():
    m = preset("llama31_70b")
    qkv = matrix_layout(m)[0]
    assert qkv.dtype == "int4"
    assert qkv.row_bytes == 8192 // 2 + (8192 // 128) * 4


def test_layout_order_and_names():
    names = [m.name for m in matrix_layout(preset("llama31_8b-toy"))]
    assert names[:4] == ["L0.qkv", "L0.aout", "L0.ffn1", "L0.ffn2"]
    assert names[-1] == "tail.lmhead" and len(names) == 4 * 4 + 1
    assert [m.name for m in matrix_layout(stacked_linear(512, 2))] == ["L0.linear", "L1.linear"]


def test_init_weights_deterministic(toy):
    a, b = init_weights(toy, seed=5), init_weights(toy, seed=5)
    c = init_weights(toy, seed=6)
    for k in a.weights:
        assert np.array_equal(a.weights[k], b.weights[k])
    assert not np.array_equal(a.weights["L0.qkv"], c.weights["L0.qkv"])
    assert np.array_equal(round_bf16(a.weights["L0.qkv"]), a.weights["L0.qkv"])


def test_capacity_error_for_oversized_model():
    big = ModelConfig(layers=200, d_model=8192, d_inter=28672, n_q_heads=64)
    with pytest.raises(CapacityError):
        init_weights(big, seed=0)


def test_kv_append_and_overflow():
    m = ModelConfig(layers=1, d_model=128, d_inter=128, d_head=64, n_q_heads=2, n_kv_heads=1, vocab_size=8,
                    max_seq_len=2)
    kv = KVCache.empty(m)
    for i in range(2):
        kv_append(kv, 0, np.full((1, 1, 64), i), np.full((1, 1, 64), -i))
    assert kv.length[0] == 2 and kv.k[0, 0, 0, 1, 0] == 1 and kv.v[0, 0, 0, 1, 0] == -1
    with pytest.raises(CapacityError):
        kv_append(kv, 0, np.zeros(64), np.zeros(64))


@pytest.mark.parametrize("quant", [None, QuantConfig(group_size=64)])
def test_store_round_trip(tmp_path, quant):
    m = ModelConfig(layers=2, d_model=128, d_inter=256, d_head=64, n_q_heads=2, n_kv_heads=1, vocab_size=32,
                    max_seq_len=16, quant=quant)
    store = init_weights(m, seed=1)
    fill_random_prefill(store, 5, seed=2)
    path = tmp_path / "w.bin"
    save_store(store, path)
    back = load_store(path)
    assert back.model == m
    assert set(back.weights) == set(store.weights)
    for k in store.weights:
        assert np.array_equal(back.weights[k], store.weights[k]), k
    assert np.array_equal(back.kv.k, store.kv.k) and back.kv.length.tolist() == [5, 5]


def test_load_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"not a store at all")
    with pytest.raises(ValueError, match="not a weight container"):
        load_store(p)
