import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from wholekernel.config import ALL_MODES, RunMode, TOY_PIPELINE, preset, stacked_linear
from wholekernel.kernelgen import GlobalBarrier, emit_programs
from wholekernel.numerics import (MemoryOrderError, PartialAttention, attn_partial, attn_reduce, execute_program,
                                  glu_chunk_step, greedy_token, reduce_metadata, reference_forward, rmsnorm,
                                  rope_rotate, silu, swiglu_combine)
from wholekernel.partitioner import build_plan
from wholekernel.tensorstore import fill_random_prefill, init_weights

from conftest import H100, toy_programs

# frozen from the dense float64 reference: toy preset, weights seed 0, prefill 300 (seed 1), token 5
TOY_REF_LOGITS_HEAD = [0.185080432645, -0.036850922513, 1.070187419242, -1.750767691715, 0.225155867315,
                       0.891444827762]
TOY_REF_ARGMAX = 283


def softmax_attention(q, K, V, alpha):
    s = alpha * (q @ K.T)
    p = np.exp(s - s.max(axis=-1, keepdims=True))
    return (p / p.sum(axis=-1, keepdims=True)) @ V


def test_rmsnorm_hand_value():
    out = rmsnorm(np.array([3.0, 4.0]), np.array([1.0, 2.0]), 0.0)
    np.testing.assert_allclose(out, [3 / np.sqrt(12.5), 8 / np.sqrt(12.5)], rtol=1e-15)


def test_rope_hand_values():
    v = np.array([1.0, 0.0, 1.0, 0.0])
    np.testing.assert_array_equal(rope_rotate(v, 0, 10000.0), v)
    # pair 0 turns by pos radians, pair 1 by pos * theta**-0.5
    out = rope_rotate(v, 2, 100.0)
    np.testing.assert_allclose(out, [np.cos(2), np.sin(2), np.cos(0.2), np.sin(0.2)], rtol=1e-14)
    with pytest.raises(ValueError):
        rope_rotate(np.ones(3), 1, 10.0)


@given(hnp.arrays(np.float64, (3, 8), elements=st.floats(-5, 5)), st.integers(0, 8000))
def test_rope_preserves_pair_norms(v, pos):
    out = rope_rotate(v, pos, 500000.0)
    np.testing.assert_allclose(np.hypot(out[:, 0::2], out[:, 1::2]), np.hypot(v[:, 0::2], v[:, 1::2]),
                               rtol=1e-12, atol=1e-12)


def test_silu_and_swiglu():
    np.testing.assert_allclose(silu(np.array([0.0, 1.0])), [0.0, 1 / (1 + np.exp(-1))])
    assert silu(np.array([-1000.0]))[0] == 0.0
    np.testing.assert_allclose(swiglu_combine(np.array([2.0]), np.array([1.0])), 2 * silu(np.array([1.0])))
    with pytest.raises(ValueError):
        swiglu_combine(np.ones(2), np.ones(3))


@given(st.integers(1, 60), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_split_attention_matches_softmax(n, parts, seed):
    rng = np.random.default_rng(seed)
    d = 16
    q, K, V = rng.standard_normal((4, d)), rng.standard_normal((n, d)) * 3, rng.standard_normal((n, d))
    alpha = 1 / np.sqrt(d)
    cuts = np.sort(rng.integers(0, n + 1, parts - 1))
    partials = []
    for lo, hi in zip([0, *cuts], [*cuts, n]):
        partials.append(attn_partial(q, K[lo:hi], V[lo:hi], PartialAttention.empty((4,), d), alpha))
    # empty partials (m = -inf) must not disturb the result
    np.testing.assert_allclose(attn_reduce(partials), softmax_attention(q, K, V, alpha), rtol=1e-12, atol=1e-13)


def test_reduce_rejects_all_empty():
    e = PartialAttention.empty((2,), 4)
    with pytest.raises(ValueError):
        reduce_metadata([e.m, e.m], [e.l, e.l])
    with pytest.raises(ValueError):
        attn_reduce([])


def test_glu_chunks_sum_to_dense():
    rng = np.random.default_rng(0)
    d, di = 8, 12
    W_in, W_gate, W_out = rng.standard_normal((di, d)), rng.standard_normal((di, d)), rng.standard_normal((d, di))
    h = rng.standard_normal((1, d))
    acc = np.zeros((1, d))
    for r in range(0, di, 5):
        sl = slice(r, r + 5)
        acc = glu_chunk_step(W_in[sl], W_gate[sl], W_out[:, sl].T, h, acc)
    dense = swiglu_combine(h @ W_in.T, h @ W_gate.T) @ W_out.T
    np.testing.assert_allclose(acc, dense, rtol=1e-13)


def test_reference_forward_frozen(toy_store):
    ref = reference_forward(toy_store, 5, 300)
    np.testing.assert_allclose(ref[0, :6], TOY_REF_LOGITS_HEAD, rtol=1e-10)
    assert greedy_token(ref) == TOY_REF_ARGMAX
    assert toy_store.kv.length.tolist() == [300] * 4  # reference leaves the cache alone


def test_reference_ignores_stale_cache_rows(toy_store):
    # rows past pos must not influence the result
    before = reference_forward(toy_store, 5, 200)
    toy_store.kv.k[:, :, :, 250] = 99.0
    np.testing.assert_array_equal(reference_forward(toy_store, 5, 200), before)


def test_interpreter_matches_reference_and_appends(toy_store):
    ref = reference_forward(toy_store, 5, 300)
    logits = execute_program(toy_programs(300, RunMode.FUSED_OVERLAP), toy_store, 5, 300)
    assert logits.dtype == np.float32
    assert np.abs(logits - ref).max() / np.abs(ref).max() < 1e-4
    assert toy_store.kv.length.tolist() == [301] * 4
    assert greedy_token(logits) == TOY_REF_ARGMAX


def test_interpreter_f64_accumulation_tight(toy_store):
    ref = reference_forward(toy_store, 5, 300)
    logits = execute_program(toy_programs(300, RunMode.FUSED), toy_store, 5, 300, acc_dtype=np.float64)
    assert np.abs(logits - ref).max() / np.abs(ref).max() < 1e-9


def test_modes_bitwise_identical(toy_weights):
    outs = []
    for mode in ALL_MODES:
        s = toy_weights.copy()
        fill_random_prefill(s, 256, seed=4)
        outs.append(execute_program(toy_programs(256, mode), s, 17, 256))
    assert all(np.array_equal(outs[0], o) for o in outs[1:])


def test_decode_two_steps_consistent(toy_weights):
    s = toy_weights.copy()
    fill_random_prefill(s, 10, seed=2)
    first = execute_program(toy_programs(10, RunMode.FUSED), s, 3, 10)
    tok = greedy_token(first)
    ref = reference_forward(s, tok, 11)  # cache now holds the step-10 key/value
    got = execute_program(toy_programs(11, RunMode.FUSED), s, tok, 11)
    assert np.abs(got - ref).max() / np.abs(ref).max() < 1e-4


def test_cache_length_mismatch_rejected(toy_store):
    with pytest.raises(ValueError, match="cache holds"):
        execute_program(toy_programs(299, RunMode.FUSED), toy_store, 5, 299)


def test_missing_barrier_is_memory_order_error(toy_store):
    # drop the QKV barrier from every block: the attention epoch then reads unpublished q/k/v
    progs = [dataclasses.replace(p, instrs=[i for i in p.instrs if not (isinstance(i, GlobalBarrier) and
                                                                        i.barrier_id == 1)])
             for p in toy_programs(300, RunMode.FUSED)]
    with pytest.raises(MemoryOrderError):
        execute_program(progs, toy_store, 5, 300)


def test_stacked_linear_matches_reference():
    m = stacked_linear(512, 3)
    store = init_weights(m, seed=0)
    progs = emit_programs(build_plan(m, H100, TOY_PIPELINE, 0, RunMode.FUSED_OVERLAP))
    got = execute_program(progs, store, 9, 0, acc_dtype=np.float64)
    np.testing.assert_allclose(got, reference_forward(store, 9, 0), rtol=1e-10, atol=1e-12)


def test_batch_rows_independent():
    m = dataclasses.replace(preset("llama31_8b-toy"), batch=2, layers=2)
    store = init_weights(m, seed=0)
    fill_random_prefill(store, 40, seed=1)
    ref = reference_forward(store, np.array([5, 9]), 40)
    got = execute_program(emit_programs(build_plan(m, H100, TOY_PIPELINE, 40)), store, np.array([5, 9]), 40)
    assert np.abs(got - ref).max() / np.abs(ref).max() < 1e-4
    assert not np.allclose(got[0], got[1])


def test_int4_decoder_matches_dequantized_reference():
    m = dataclasses.replace(preset("llama31_8b-toy"), quant=preset("llama31_70b").quant)
    store = init_weights(m, seed=0)
    fill_random_prefill(store, 20, seed=1)
    ref = reference_forward(store, 1, 20)
    got = execute_program(emit_programs(build_plan(m, H100, TOY_PIPELINE, 20)), store, 1, 20)
    assert np.abs(got - ref).max() / np.abs(ref).max() < 1e-4


def test_greedy_ties_lowest_index():
    assert greedy_token(np.array([[1.0, 3.0, 3.0]])) == 1
