"""Exhaustive grid search over pipeline configurations by simulated latency."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

from .config import KB, ConfigError, HardwareConfig, ModelConfig, PipelineConfig, RunMode, check_fits
from .kernelgen import emit_programs
from .partitioner import build_plan
from .simulator import CostModel, simulate


class TuneError(ValueError):
    pass


@dataclass(frozen=True)
class TuneSpace:
    stage_sizes: tuple = (32 * KB, 64 * KB)
    depths: tuple = (2, 3, 4, 5)
    consumer_warps: tuple = (4,)

    def __post_init__(self):
        for name in ("stage_sizes", "depths", "consumer_warps"):
            if not getattr(self, name):
                raise TuneError(f"empty axis {name}")

    def points(self):
        for s in self.stage_sizes:
            for d in self.depths:
                for w in self.consumer_warps:
                    yield s, d, w

    @property
    def size(self) -> int:
        return len(self.stage_sizes) * len(self.depths) * len(self.consumer_warps)


@dataclass(frozen=True)
class GridPoint:
    stage_size: int
    depth: int
    consumer_warps: int
    latency: float  # nan when infeasible
    feasible: bool
    reason: str = ""

    @property
    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(self.stage_size, self.depth, self.consumer_warps)

    def key(self) -> tuple:
        return (self.latency, self.depth, self.stage_size, self.consumer_warps)


@dataclass
class TuneResult:
    best: PipelineConfig
    best_latency: float
    grid: list[GridPoint]


def tune(model: ModelConfig, hw: HardwareConfig, mode: Union[RunMode, str], seq_len: int, space: TuneSpace,
         cost: CostModel) -> TuneResult:
    """Simulate every grid point; ties go to smaller depth, then smaller stage, then fewer warps."""
    mode = RunMode.parse(mode)
    grid: list[GridPoint] = []
    programs_for: dict = {}
    for s, d, w in space.points():
        try:
            pipe = PipelineConfig(s, d, w)
            check_fits(model, hw, pipe)
        except ConfigError as exc:
            reason = "shared-memory overflow" if "shared-memory overflow" in str(exc) else str(exc)
            grid.append(GridPoint(s, d, w, math.nan, False, reason))
            continue
        if (s, d) not in programs_for:
            try:
                programs_for[s, d] = emit_programs(build_plan(model, hw, pipe, seq_len, mode))
            except ValueError as exc:
                programs_for[s, d] = exc
        progs = programs_for[s, d]
        if isinstance(progs, Exception):
            grid.append(GridPoint(s, d, w, math.nan, False, str(progs)))
            continue
        progs = [dataclasses.replace(p, consumer_warps=w) for p in progs]
        lat = simulate(progs, cost, hw, batch=model.batch).latency
        grid.append(GridPoint(s, d, w, lat, True))
    feasible = [g for g in grid if g.feasible]
    if not feasible:
        reasons = sorted({g.reason for g in grid})
        raise TuneError(f"no feasible grid point ({'; '.join(reasons)})")
    best = min(feasible, key=GridPoint.key)
    return TuneResult(best.pipeline, best.latency, grid)
