"""Whole-model fused decode: static partitioning, device-program emission, functional
interpretation and a calibrated timing model."""

__version__ = "0.1.0"

from .config import (ALL_MODES, ConfigError, HardwareConfig, ModelConfig, PipelineConfig, QuantConfig, RunConfig,
                     RunMode, load_config, preset)
from .kernelgen import emit_programs, render_listing, verify_program, verify_programs
from .numerics import execute_program, reference_forward
from .partitioner import build_plan
from .simulator import DEFAULT_COST, CostModel, calibrate, predict_tps, simulate
from .tensorstore import TensorStore, fill_random_prefill, init_weights
