"""Model, hardware, pipeline and run configuration.

All configs are frozen dataclasses validated on construction. Units are bytes,
seconds and plain counts throughout.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Optional, Union

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib
import tomli_w

KB = 1024
GB = 1024**3

DTYPE_BYTES = {"bf16": 2, "fp32": 4}
MODEL_KINDS = ("stacked_linear", "llama_decoder")

# barriers, reduction metadata and misc bookkeeping held in shared memory
FIXED_SCRATCH_BYTES = 4 * KB


class ConfigError(ValueError):
    """A config violated one of its invariants (message names the invariant)."""


class RunMode(str, Enum):
    BASELINE = "baseline"
    FUSED = "fused"
    FUSED_OVERLAP = "fused_overlap"

    @classmethod
    def parse(cls, value: Union[str, "RunMode"]) -> "RunMode":
        try:
            return cls(value)
        except ValueError:
            raise ConfigError(f"unknown run mode {value!r}") from None


ALL_MODES = (RunMode.BASELINE, RunMode.FUSED, RunMode.FUSED_OVERLAP)


def _positive(obj, *names):
    for name in names:
        value = getattr(obj, name)
        if not value > 0:
            raise ConfigError(f"{type(obj).__name__}.{name} must be strictly positive, got {value!r}")


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 4
    group_size: int = 128
    scheme: str = "weight_only_affine"

    def __post_init__(self):
        if self.bits != 4:
            raise ConfigError("only 4-bit weight-only quantization is supported")
        if self.scheme != "weight_only_affine":
            raise ConfigError(f"unknown quantization scheme {self.scheme!r}")
        _positive(self, "group_size")


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "llama_decoder"
    layers: int = 32
    d_model: int = 4096
    d_inter: int = 14336
    d_head: int = 128
    n_q_heads: int = 32
    n_kv_heads: int = 8
    vocab_size: int = 128256
    rope_theta: float = 500000.0
    rmsnorm_eps: float = 1e-5
    dtype: str = "bf16"
    quant: Optional[QuantConfig] = None
    batch: int = 1
    max_seq_len: int = 8192

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.dtype not in DTYPE_BYTES:
            raise ConfigError(f"unknown dtype {self.dtype!r}")
        if self.layers < 0:
            raise ConfigError("layers must be non-negative")
        _positive(self, "d_model", "d_inter", "d_head", "n_q_heads", "n_kv_heads", "vocab_size",
                  "rope_theta", "max_seq_len")
        if self.rmsnorm_eps < 0:
            raise ConfigError("rmsnorm_eps must be non-negative")
        if not 1 <= self.batch <= 4:
            raise ConfigError(f"batch must be in 1..4, got {self.batch}")
        if self.n_q_heads % self.n_kv_heads:
            raise ConfigError(
                f"GQA grouping: n_q_heads={self.n_q_heads} is not a multiple of n_kv_heads={self.n_kv_heads}")
        if self.kind == "llama_decoder":
            if self.d_model != self.n_q_heads * self.d_head:
                raise ConfigError(
                    f"head layout: d_model={self.d_model} != n_q_heads*d_head={self.n_q_heads * self.d_head}")
            if self.d_head % 2:
                raise ConfigError("RoPE needs an even d_head")
        if self.quant is not None and self.d_model % self.quant.group_size:
            raise ConfigError(
                f"quant group_size={self.quant.group_size} must divide the stored row length d_model={self.d_model}")

    @property
    def dtype_bytes(self) -> int:
        return DTYPE_BYTES[self.dtype]

    @property
    def qkv_rows(self) -> int:
        return self.d_model + 2 * self.n_kv_heads * self.d_head

    @property
    def group_ratio(self) -> int:
        return self.n_q_heads // self.n_kv_heads


@dataclass(frozen=True)
class HardwareConfig:
    num_sms: int = 132
    shared_mem_per_sm: int = 228 * KB
    registers_per_sm: int = 256 * KB
    hbm_capacity: int = 80 * GB
    peak_bandwidth: float = 3.35e12
    kernel_launch_overhead: float = 8.0e-6
    barrier_latency: float = 5.0e-7
    compute_throughput_per_sm: float = 5.0e11

    def __post_init__(self):
        _positive(self, *(f.name for f in fields(self)))


@dataclass(frozen=True)
class PipelineConfig:
    stage_size: int = 64 * KB
    depth: int = 3
    consumer_warps: int = 4

    def __post_init__(self):
        _positive(self, "stage_size", "consumer_warps")
        if self.depth < 2:
            raise ConfigError(f"pipeline depth must be >= 2 (GLU holds two buffers at once), got {self.depth}")


def scratch_bytes(model: ModelConfig) -> int:
    """Shared memory outside the pipeline buffers: replicated inputs plus accumulators."""
    per_row = model.dtype_bytes  # cached input vector
    if model.kind == "llama_decoder":
        per_row += 4  # f32 GLU partial-output accumulator
    return model.batch * model.d_model * per_row + FIXED_SCRATCH_BYTES


def pipeline_footprint(model: ModelConfig, pipeline: PipelineConfig) -> int:
    return pipeline.stage_size * pipeline.depth + scratch_bytes(model)


def check_fits(model: ModelConfig, hw: HardwareConfig, pipeline: PipelineConfig) -> None:
    need = pipeline_footprint(model, pipeline)
    if need > hw.shared_mem_per_sm:
        raise ConfigError(
            f"shared-memory overflow: {pipeline.depth} x {pipeline.stage_size} B stages + "
            f"{scratch_bytes(model)} B scratch = {need} B > {hw.shared_mem_per_sm} B per SM")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    hardware: HardwareConfig = field(default_factory=HardwareConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    mode: RunMode = RunMode.FUSED_OVERLAP
    seq_len: int = 0
    seed: int = 0
    attn_group_size: int = 8

    def __post_init__(self):
        object.__setattr__(self, "mode", RunMode.parse(self.mode))
        if self.seq_len < 0:
            raise ConfigError("seq_len must be non-negative")
        if self.seq_len >= self.model.max_seq_len:
            raise ConfigError(f"seq_len={self.seq_len} leaves no room in max_seq_len={self.model.max_seq_len}")
        _positive(self, "attn_group_size")
        check_fits(self.model, self.hardware, self.pipeline)
        if self.model.kind == "llama_decoder" and \
                self.attn_group_size * self.model.n_kv_heads > self.hardware.num_sms:
            raise ConfigError(
                f"attention groups infeasible: {self.attn_group_size} x {self.model.n_kv_heads} kv heads "
                f"> {self.hardware.num_sms} SMs")

    def digest(self) -> str:
        return hashlib.sha256(dump_config(self).encode()).hexdigest()[:12]


# ---------------------------------------------------------------- presets

MODEL_PRESETS = {
    "llama31_8b": ModelConfig(),
    "llama31_8b_int4": ModelConfig(quant=QuantConfig()),
    # only ever run quantized; bf16 70B does not fit in 80GB
    "llama31_70b": ModelConfig(layers=80, d_model=8192, d_inter=28672, n_q_heads=64, quant=QuantConfig()),
    "llama31_8b-toy": ModelConfig(layers=4, d_model=256, d_inter=896, d_head=64, n_q_heads=4, n_kv_heads=2,
                                  vocab_size=1024, max_seq_len=1024),
    "stacked_linear_2k": ModelConfig(kind="stacked_linear", d_model=2048),
    "stacked_linear_4k": ModelConfig(kind="stacked_linear", d_model=4096),
    "stacked_linear_8k": ModelConfig(kind="stacked_linear", d_model=8192),
}

HARDWARE_PRESETS = {
    "h100_sxm": HardwareConfig(),
}

# 32 KB stages keep the toy model's KV chunks at 256 positions (d_head 64, bf16)
TOY_PIPELINE = PipelineConfig(stage_size=32 * KB, depth=3)


def preset(name: str) -> Union[ModelConfig, HardwareConfig]:
    if name in MODEL_PRESETS:
        return MODEL_PRESETS[name]
    if name in HARDWARE_PRESETS:
        return HARDWARE_PRESETS[name]
    known = ", ".join(sorted([*MODEL_PRESETS, *HARDWARE_PRESETS]))
    raise ConfigError(f"unknown preset {name!r} (known: {known})")


def stacked_linear(dim: int, layers: int, **kw) -> ModelConfig:
    return ModelConfig(kind="stacked_linear", d_model=dim, layers=layers, **kw)


# fallback when 64 KB x 3 plus the model's scratch overflows shared memory (d_model 8192)
WIDE_PIPELINE = PipelineConfig(stage_size=32 * KB, depth=4)


def default_pipeline(model: ModelConfig, hw: Optional[HardwareConfig] = None) -> PipelineConfig:
    if model.d_model <= 512:
        return TOY_PIPELINE
    if pipeline_footprint(model, PipelineConfig()) <= (hw or HardwareConfig()).shared_mem_per_sm:
        return PipelineConfig()
    return WIDE_PIPELINE


# ------------------------------------------------------------- file format

def _build(cls, table: dict, base=None):
    known = {f.name for f in fields(cls)}
    unknown = set(table) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} field(s): {', '.join(sorted(unknown))}")
    try:
        return replace(base, **table) if base is not None else cls(**table)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def config_from_dict(doc: dict, preset_name: Optional[str] = None) -> RunConfig:
    doc = {k: dict(v) for k, v in doc.items()}
    unknown = set(doc) - {"model", "hardware", "pipeline", "run"}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")

    model_tbl = doc.get("model", {})
    base_name = preset_name or model_tbl.pop("preset", None)
    model_tbl.pop("preset", None)
    base_model = preset(base_name) if base_name else ModelConfig()
    if not isinstance(base_model, ModelConfig):
        raise ConfigError(f"preset {base_name!r} is not a model preset")
    if "quant" in model_tbl:
        q = model_tbl["quant"]
        model_tbl["quant"] = _build(QuantConfig, q) if q else None
    model = _build(ModelConfig, model_tbl, base_model)

    hw_tbl = doc.get("hardware", {})
    hw_name = hw_tbl.pop("preset", "h100_sxm")
    hardware = _build(HardwareConfig, hw_tbl, preset(hw_name))

    pipe_tbl = doc.get("pipeline", {})
    pipeline = _build(PipelineConfig, pipe_tbl, default_pipeline(model, hardware))

    run = doc.get("run", {})
    return _build(RunConfig, {**run, "model": model, "hardware": hardware, "pipeline": pipeline})


def load_config(path: Union[str, Path], preset_name: Optional[str] = None) -> RunConfig:
    """Parse and validate a run config file; ``preset_name`` replaces the model base preset."""
    text = Path(path).read_text()
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"parse error in {path}: {exc}") from None
    return config_from_dict(doc, preset_name)


def config_to_dict(cfg: RunConfig) -> dict[str, Any]:
    model = dataclasses.asdict(cfg.model)
    if model["quant"] is None:
        del model["quant"]
    return {
        "model": model,
        "hardware": dataclasses.asdict(cfg.hardware),
        "pipeline": dataclasses.asdict(cfg.pipeline),
        "run": {"mode": cfg.mode.value, "seq_len": cfg.seq_len, "seed": cfg.seed,
                "attn_group_size": cfg.attn_group_size},
    }


def dump_config(cfg: RunConfig) -> str:
    return tomli_w.dumps(config_to_dict(cfg))
