import dataclasses

import pytest
from hypothesis import given, strategies as st

from wholekernel.config import (KB, ConfigError, HardwareConfig, ModelConfig, PipelineConfig, QuantConfig, RunConfig,
                                RunMode, check_fits, config_from_dict, default_pipeline, dump_config, load_config,
                                preset, MODEL_PRESETS, HARDWARE_PRESETS)


def test_llama_presets_shapes():
    m8 = preset("llama31_8b")
    assert (m8.layers, m8.d_model, m8.d_inter, m8.d_head, m8.n_q_heads, m8.n_kv_heads) == (32, 4096, 14336, 128, 32, 8)
    m70 = preset("llama31_70b")
    assert (m70.layers, m70.d_model, m70.d_inter, m70.d_head, m70.n_q_heads, m70.n_kv_heads) == \
        (80, 8192, 28672, 128, 64, 8)
    assert m70.quant == QuantConfig(4, 128)


def test_h100_preset():
    hw = preset("h100_sxm")
    assert hw.num_sms == 132
    assert hw.shared_mem_per_sm == 228 * KB
    assert hw.registers_per_sm == 256 * KB
    assert hw.hbm_capacity == 80 * 1024**3
    assert hw.peak_bandwidth == 3.35e12


def test_unknown_preset():
    with pytest.raises(ConfigError, match="unknown preset"):
        preset("llama2_7b")


@pytest.mark.parametrize("name", sorted({**MODEL_PRESETS, **HARDWARE_PRESETS}))
def test_every_preset_validates(name):
    cfg = preset(name)
    assert dataclasses.replace(cfg) == cfg
    if isinstance(cfg, ModelConfig):
        RunConfig(model=cfg, pipeline=default_pipeline(cfg))


def test_gqa_grouping_error(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("[model]\nn_q_heads = 6\nn_kv_heads = 4\nd_model = 768\n")
    with pytest.raises(ConfigError, match="GQA grouping"):
        load_config(p)


def test_parse_error(tmp_path):
    p = tmp_path / "broken.toml"
    p.write_text("[model\nlayers = 3\n")
    with pytest.raises(ConfigError, match="parse error"):
        load_config(p)


def test_unknown_field_rejected():
    with pytest.raises(ConfigError, match="unknown ModelConfig"):
        config_from_dict({"model": {"hidden": 3}})


def test_preset_file_and_override(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text('[model]\npreset = "llama31_8b"\n\n[run]\nmode = "baseline"\nseq_len = 128\n')
    cfg = load_config(p)
    assert cfg.model == preset("llama31_8b")
    assert cfg.mode is RunMode.BASELINE and cfg.seq_len == 128
    assert load_config(p, "llama31_8b-toy").model == preset("llama31_8b-toy")


@pytest.mark.parametrize("name", ["llama31_8b", "llama31_70b", "llama31_8b-toy", "stacked_linear_4k"])
def test_round_trip(tmp_path, name):
    cfg = config_from_dict({"model": {"preset": name}, "run": {"seq_len": 7, "seed": 3}})
    p = tmp_path / "cfg.toml"
    p.write_text(dump_config(cfg))
    assert load_config(p) == cfg


def test_invariants():
    with pytest.raises(ConfigError, match="head layout"):
        ModelConfig(d_model=4000)
    with pytest.raises(ConfigError, match="batch"):
        ModelConfig(batch=5)
    with pytest.raises(ConfigError, match="depth"):
        PipelineConfig(depth=1)
    with pytest.raises(ConfigError, match="strictly positive"):
        HardwareConfig(num_sms=0)
    with pytest.raises(ConfigError, match="group_size"):
        ModelConfig(quant=QuantConfig(group_size=3000))


def test_shared_memory_overflow():
    # four 64 KB stages cannot coexist with the scratch region
    with pytest.raises(ConfigError, match="shared-memory overflow"):
        check_fits(preset("llama31_8b"), HardwareConfig(), PipelineConfig(64 * KB, 4))
    check_fits(preset("llama31_8b"), HardwareConfig(), PipelineConfig(64 * KB, 3))


def test_attention_group_infeasible():
    with pytest.raises(ConfigError, match="attention groups"):
        RunConfig(model=preset("llama31_8b"), attn_group_size=20)


def test_wide_model_gets_smaller_stages():
    assert default_pipeline(preset("llama31_70b")).stage_size == 32 * KB
    assert default_pipeline(preset("llama31_8b")).stage_size == 64 * KB


@given(st.integers(1, 16), st.integers(1, 16))
def test_gqa_rule_matches_divisibility(q, kv):
    ok = q % kv == 0
    try:
        ModelConfig(kind="stacked_linear", n_q_heads=q, n_kv_heads=kv, d_model=256)
    except ConfigError:
        assert not ok
    else:
        assert ok


def test_digest_stable_and_sensitive():
    a = RunConfig(model=preset("llama31_8b-toy"), pipeline=default_pipeline(preset("llama31_8b-toy")))
    assert a.digest() == dataclasses.replace(a).digest()
    assert a.digest() != dataclasses.replace(a, seed=1).digest()
