import functools
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from wholekernel.config import HardwareConfig, PipelineConfig, RunMode, TOY_PIPELINE, preset
from wholekernel.kernelgen import emit_programs
from wholekernel.partitioner import build_plan
from wholekernel.tensorstore import fill_random_prefill, init_weights

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

GOLDEN = Path(__file__).parent / "golden"
H100 = HardwareConfig()


@functools.lru_cache(maxsize=4)
def programs_for(model_name: str, stage_size: int = 64 * 1024, depth: int = 3, seq_len: int = 0,
                 mode: RunMode = RunMode.FUSED_OVERLAP):
    """Emitted programs for a preset, cached across the session (8B emission takes seconds)."""
    model = preset(model_name)
    plan = build_plan(model, H100, PipelineConfig(stage_size, depth), seq_len, mode)
    return tuple(emit_programs(plan))


@pytest.fixture(scope="session")
def hw():
    return H100


@pytest.fixture(scope="session")
def toy():
    return preset("llama31_8b-toy")


@pytest.fixture(scope="session")
def toy_weights(toy):
    return init_weights(toy, seed=0)


@pytest.fixture
def toy_store(toy_weights):
    """Fresh cache with 300 random prefill positions; weights shared (read-only)."""
    store = toy_weights.copy()
    store.kv = type(store.kv).empty(store.model)
    fill_random_prefill(store, 300, seed=1)
    return store


def toy_programs(seq_len: int, mode, hw=H100):
    plan = build_plan(preset("llama31_8b-toy"), hw, TOY_PIPELINE, seq_len, mode)
    return emit_programs(plan)


def pytest_terminal_summary(terminalreporter):
    from oracles import ACCEPTANCE
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}: {detail}")
