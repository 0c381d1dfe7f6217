"""Discrete-event timing model of emitted device programs.

Loads in flight share global bandwidth as a fluid: every active load streams at
the same rate ``min(load_rate_cap, peak * mean_efficiency / n_active)``. Because
all active loads move at one common rate, progress is tracked in virtual time
(bytes delivered per load so far) and completions pop off a heap in O(log n).
Blocks run ahead on their own clocks and only synchronize on stage waits,
barriers and launch markers.
"""
from __future__ import annotations

import dataclasses
import heapq
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .config import ConfigError, HardwareConfig, ModelConfig, PipelineConfig, RunMode, tomli_w, tomllib
from .kernelgen import (AsyncLoad, AwaitStage, Compute, DeviceProgram, GlobalBarrier, LaunchMarker, ReleaseStage,
                        SyncLoadCurrentToken, WriteGlobal, emit_programs)
from .partitioner import OP_SUBLAYER, build_plan

LOAD_CLASSES = ("matvec", "glu", "attn")
OP_CLASS = {"qkv": "matvec", "aout": "matvec", "lmhead": "matvec", "linear": "matvec",
            "ffn1": "glu", "ffn2": "glu", "k": "attn", "v": "attn"}


class DeadlockError(RuntimeError):
    def __init__(self, stuck: dict):
        self.stuck = stuck
        lines = [f"block {b}: waiting at #{pc} {ins}" for b, (pc, ins) in sorted(stuck.items())[:8]]
        super().__init__("simulation deadlocked\n" + "\n".join(lines))


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class CostModel:
    peak_bandwidth: float = 3.35e12
    efficiency: dict = field(default_factory=lambda: {"matvec": 0.85, "glu": 0.90, "attn": 0.50})
    # efficiency ramp over a block's chunk count n in one sublayer: n / (n + ramp_chunks)
    ramp_chunks: float = 0.5
    compute_throughput_per_sm: float = 5.0e11  # elements / s with 4 consumer warps
    kernel_launch_overhead: float = 8.0e-6
    barrier_latency: float = 5.0e-7
    sync_load_latency: float = 5.0e-7
    load_latency: float = 2.5e-7
    load_rate_cap: float = 3.0e10  # per in-flight load, bytes / s
    load_issue_cost: float = 0.0  # producer seconds per AsyncLoad per pipeline slot
    dequant_cost_per_element: float = 0.0
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for k in LOAD_CLASSES:
            e = self.efficiency.get(k)
            if e is None or not 0 < e <= 1:
                raise ConfigError(f"efficiency[{k!r}] must be in (0, 1], got {e!r}")
        if not self.peak_bandwidth > 0 or not self.compute_throughput_per_sm > 0 or not self.load_rate_cap > 0:
            raise ConfigError("bandwidths and throughputs must be positive")
        for name in ("ramp_chunks", "kernel_launch_overhead", "barrier_latency", "sync_load_latency",
                     "load_latency", "load_issue_cost", "dequant_cost_per_element"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")

    @classmethod
    def for_hardware(cls, hw: HardwareConfig, **kw) -> "CostModel":
        base = dict(peak_bandwidth=hw.peak_bandwidth, compute_throughput_per_sm=hw.compute_throughput_per_sm,
                    kernel_launch_overhead=hw.kernel_launch_overhead, barrier_latency=hw.barrier_latency)
        return cls(**{**base, **kw})

    def get(self, name: str) -> float:
        if name.startswith("efficiency."):
            return self.efficiency[name.split(".", 1)[1]]
        return getattr(self, name)

    def with_params(self, values: dict, provenance: Optional[str] = None) -> "CostModel":
        eff = dict(self.efficiency)
        plain = {}
        for name, v in values.items():
            if name.startswith("efficiency."):
                eff[name.split(".", 1)[1]] = float(v)
            else:
                plain[name] = float(v)
        prov = dict(self.provenance)
        if provenance:
            prov.update({name: provenance for name in values})
        return dataclasses.replace(self, efficiency=eff, provenance=prov, **plain)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if math.isinf(d["load_rate_cap"]):
            del d["load_rate_cap"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CostModel":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown cost model field(s): {', '.join(sorted(extra))}")
        d = dict(d)
        if "efficiency" in d:
            d["efficiency"] = {**CostModel().efficiency, **d["efficiency"]}
        return cls(**d)


PRIOR_PROVENANCE = {name: "prior" for name in (
    "efficiency.glu", "efficiency.attn", "ramp_chunks", "barrier_latency", "load_latency", "sync_load_latency",
    "load_rate_cap", "compute_throughput_per_sm")}

# Produced by scripts/calibrate_defaults.py: launch overhead and matvec efficiency fitted to the
# single-layer stacked-linear baseline rows, issue cost fitted to the 32 KB depth-4/5 comparison.
DEFAULT_COST = CostModel(
    kernel_launch_overhead=7.65e-6, efficiency={"matvec": 0.800, "glu": 0.90, "attn": 0.50}, load_issue_cost=2.2e-7,
    provenance={**PRIOR_PROVENANCE, "kernel_launch_overhead": "calibrated", "efficiency.matvec": "calibrated",
                "load_issue_cost": "fitted"})


def save_cost_model(cost: CostModel, path: Union[str, Path]) -> None:
    Path(path).write_text(tomli_w.dumps(cost.to_dict()))


def load_cost_model(path: Union[str, Path]) -> CostModel:
    try:
        return CostModel.from_dict(tomllib.loads(Path(path).read_text()))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"parse error in {path}: {exc}") from None


# ------------------------------------------------------------- simulation

@dataclass
class SimResult:
    latency: float
    weight_bytes: int
    kv_bytes: int
    sync_bytes: int
    barrier_stall: float
    breakdown: dict  # sublayer kind -> seconds between consecutive global syncs
    busy: np.ndarray  # per-block compute seconds
    launches: int
    barriers: int
    timeline: Optional[list] = None  # (block, t_start, t_end, kind)
    batch: int = 1

    @property
    def bytes_moved(self) -> int:
        return self.weight_bytes + self.kv_bytes + self.sync_bytes

    @property
    def achieved_bandwidth(self) -> float:
        return self.bytes_moved / self.latency if self.latency > 0 else 0.0

    @property
    def tokens_per_second(self) -> float:
        return self.batch / self.latency if self.latency > 0 else math.inf

    @property
    def idle(self) -> np.ndarray:
        return self.latency - self.busy


def _ramp_counts(p: DeviceProgram) -> Counter:
    return Counter((ins.chunk.layer, OP_SUBLAYER[ins.chunk.op]) for ins in p.instrs if type(ins) is AsyncLoad)


def _final_label(programs) -> str:
    for p in programs:
        for ins in reversed(p.instrs):
            if type(ins) is AsyncLoad:
                return OP_SUBLAYER[ins.chunk.op]
            if type(ins) is GlobalBarrier:
                break
    return "tail"


def simulate(programs: Sequence[DeviceProgram], cost: CostModel, hw: Optional[HardwareConfig] = None, *,
             timeline: bool = False, batch: int = 1) -> SimResult:
    """Time one decode step of ``programs`` under ``cost``."""
    nb = len(programs)
    if hw is not None and nb > hw.num_sms:
        raise ConfigError(f"{nb} programs for {hw.num_sms} SMs")
    if nb == 0:
        return SimResult(0.0, 0, 0, 0, 0.0, {}, np.zeros(0), 0, 0, [] if timeline else None, batch)

    peak = cost.peak_bandwidth
    cap = cost.load_rate_cap
    eff_of = cost.efficiency
    h = cost.ramp_chunks
    lat = cost.load_latency
    compute_rate = [cost.compute_throughput_per_sm * min(p.consumer_warps, 4) / 4 for p in programs]
    issue = [cost.load_issue_cost * p.depth for p in programs]
    dq = cost.dequant_cost_per_element
    ramp = [_ramp_counts(p) for p in programs]

    instrs = [p.instrs for p in programs]
    pc = [0] * nb
    t_blk = [0.0] * nb
    t_prod = [0.0] * nb  # producer-side issue clock
    busy = [0.0] * nb
    slot_load: list[dict] = [{} for _ in range(nb)]
    tl: Optional[list] = [] if timeline else None

    # fluid state
    now = 0.0
    V = 0.0
    n_active = 0
    sum_eff = 0.0
    fin_heap: list = []  # (V_finish, load_id)
    load_done: list = []  # completion time or None
    load_waiter: list = []  # block waiting on the load, or -1
    load_lat: list = []
    load_eff: list = []
    load_bytes: list = []
    w_bytes = kv_bytes = s_bytes = 0

    events: list = []  # (time, seq, key): key < nb resumes a block, key >= nb starts load key - nb
    seq = 0
    for b in range(nb):
        events.append((0.0, b, b))
    seq = nb
    heapq.heapify(events)

    sync_arrivals: list = []
    sync_kind = None
    n_launch = n_barrier = 0
    stall = 0.0
    last_sync = 0.0
    breakdown: dict = {}
    finished = [False] * nb

    def rate() -> float:
        r = peak * sum_eff / (n_active * n_active)
        return r if r < cap else cap

    while True:
        t_ev = events[0][0] if events else math.inf
        if n_active:
            r = rate()
            t_fin = now + (fin_heap[0][0] - V) / r
        else:
            t_fin = math.inf
        if t_fin == math.inf and t_ev == math.inf:
            break
        if t_fin <= t_ev:
            now = t_fin
            V = fin_heap[0][0]
            while fin_heap and fin_heap[0][0] <= V:
                _, lid = heapq.heappop(fin_heap)
                n_active -= 1
                sum_eff -= load_eff[lid]
                done = now + load_lat[lid]
                load_done[lid] = done
                wb = load_waiter[lid]
                if wb >= 0:
                    load_waiter[lid] = -1
                    t = t_blk[wb] if t_blk[wb] > done else done
                    if tl is not None:
                        tl.append((wb, t_blk[wb], t, "await"))
                    t_blk[wb] = t
                    heapq.heappush(events, (t, seq, wb))
                    seq += 1
            if n_active == 0:
                sum_eff = 0.0
            continue

        if n_active:
            V += (t_ev - now) * r
        now = t_ev
        _, _, b = heapq.heappop(events)
        if b >= nb:
            lid = b - nb
            heapq.heappush(fin_heap, (V + load_bytes[lid], lid))
            n_active += 1
            sum_eff += load_eff[lid]
            continue
        prog = instrs[b]
        i = pc[b]
        t = t_blk[b]
        n = len(prog)
        while i < n:
            ins = prog[i]
            kind = type(ins)
            if kind is AsyncLoad:
                # a producer issues loads one after another, in parallel with the consumer
                c = ins.chunk
                cls = OP_CLASS[c.op]
                k = ramp[b][(c.layer, OP_SUBLAYER[c.op])]
                e = eff_of[cls] * (k / (k + h) if h else 1.0)
                lid = len(load_done)
                load_done.append(None)
                load_waiter.append(-1)
                load_lat.append(lat)
                load_eff.append(e)
                load_bytes.append(c.byte_len)
                # the load starts once the producer is free; issuing then occupies the producer
                start = t if t > t_prod[b] else t_prod[b]
                t_prod[b] = start + issue[b]
                if start > now:
                    heapq.heappush(events, (start, seq, nb + lid))
                    seq += 1
                else:
                    heapq.heappush(fin_heap, (V + c.byte_len, lid))
                    n_active += 1
                    sum_eff += e
                if c.load_class == "kv_cache":
                    kv_bytes += c.byte_len
                else:
                    w_bytes += c.byte_len
                slot_load[b][ins.slot] = lid
                i += 1
            elif kind is AwaitStage:
                lid = slot_load[b][ins.slot]
                done = load_done[lid]
                i += 1
                if done is None:
                    load_waiter[lid] = b
                    t_blk[b] = t
                    pc[b] = i
                    t = None
                    break
                if done > t:
                    if tl is not None:
                        tl.append((b, t, done, "await"))
                    t = done
            elif kind is Compute:
                d = ins.work / compute_rate[b]
                if ins.dequant:
                    d += ins.work * dq
                if tl is not None:
                    tl.append((b, t, t + d, ins.op))
                busy[b] += d
                t += d
                i += 1
            elif kind is ReleaseStage or kind is WriteGlobal:
                i += 1
            elif kind is SyncLoadCurrentToken:
                if t > now:
                    heapq.heappush(events, (t, seq, b))
                    seq += 1
                    break
                lid = len(load_done)
                load_done.append(None)
                load_waiter.append(b)
                load_lat.append(cost.sync_load_latency)
                load_eff.append(1.0)
                load_bytes.append(ins.nbytes)
                heapq.heappush(fin_heap, (V + ins.nbytes, lid))
                n_active += 1
                sum_eff += 1.0
                s_bytes += ins.nbytes
                i += 1
                t_blk[b] = t
                pc[b] = i
                t = None
                break
            else:  # GlobalBarrier / LaunchMarker
                i += 1
                pc[b] = i
                t_blk[b] = t
                sync_arrivals.append(t)
                sync_kind = ins
                if len(sync_arrivals) == nb:
                    arrive = max(sync_arrivals)
                    if kind is LaunchMarker:
                        release = arrive + cost.kernel_launch_overhead
                        n_launch += 1
                        label = "launch"
                    else:
                        release = arrive + cost.barrier_latency
                        n_barrier += 1
                        label = ins.label.split(".", 1)[-1]
                    stall += sum(release - a for a in sync_arrivals)
                    breakdown[label] = breakdown.get(label, 0.0) + (release - last_sync)
                    last_sync = release
                    sync_arrivals = []
                    for bb in range(nb):
                        if tl is not None:
                            tl.append((bb, t_blk[bb], release, "barrier" if kind is GlobalBarrier else "launch"))
                        t_blk[bb] = release
                        heapq.heappush(events, (release, seq, bb))
                        seq += 1
                t = None
                break
        else:
            t_blk[b] = t
            pc[b] = i
            finished[b] = True
            if tl is not None:
                tl.append((b, t, t, "end"))
            continue
        if t is not None:
            t_blk[b] = t
            pc[b] = i

    if not all(finished):
        stuck = {b: (pc[b] - 1, instrs[b][pc[b] - 1] if pc[b] else None) for b in range(nb) if not finished[b]}
        raise DeadlockError(stuck)
    end = max(t_blk)
    if end > last_sync:
        label = _final_label(programs)
        breakdown[label] = breakdown.get(label, 0.0) + (end - last_sync)
    return SimResult(end, w_bytes, kv_bytes, s_bytes, stall, breakdown, np.asarray(busy), n_launch, n_barrier,
                     tl, batch)


# ------------------------------------------------------------ calibration

# Measured latencies (ms) of stacked square linear layers on an H100 SXM, 64 KB stages.
REFERENCE_STACKED_MS = {
    (2048, 1): (0.013, 0.013, 0.012), (2048, 4): (0.050, 0.029, 0.027), (2048, 32): (0.403, 0.169, 0.154),
    (4096, 1): (0.021, 0.021, 0.021), (4096, 4): (0.084, 0.060, 0.060), (4096, 32): (0.675, 0.423, 0.423),
    (8192, 1): (0.062, 0.062, 0.062), (8192, 4): (0.250, 0.221, 0.218), (8192, 32): (1.998, 1.543, 1.513),
}
# Measured decode tokens/s for the 8B model in bf16, by prefill length.
REFERENCE_TPS_8B = {128: 184.0, 1024: 182.0, 3072: 180.0, 6144: 176.0}

CALIBRATED_PARAMS = ("kernel_launch_overhead", "efficiency.matvec")
_BOUNDS = {"kernel_launch_overhead": (0.0, 1e-3), "ramp_chunks": (0.0, 64.0), "load_latency": (0.0, 1e-4),
           "barrier_latency": (0.0, 1e-4), "load_issue_cost": (0.0, 1e-5)}


@dataclass(frozen=True)
class CalibrationTarget:
    model: ModelConfig
    pipeline: PipelineConfig
    mode: RunMode
    latency: float  # seconds
    seq_len: int = 0


@dataclass
class CalibrationReport:
    params: dict
    residuals: list  # relative error per target
    cost: CostModel

    @property
    def max_residual(self) -> float:
        return max(abs(r) for r in self.residuals)


def reference_targets(layers: Sequence[int] = (1,), modes: Sequence[RunMode] = (RunMode.BASELINE,),
                      pipeline: Optional[PipelineConfig] = None) -> list[CalibrationTarget]:
    """Stacked-linear reference rows as calibration targets (default: single-layer baseline)."""
    pipeline = pipeline or PipelineConfig()
    out = []
    for (dim, n), row in REFERENCE_STACKED_MS.items():
        if n not in layers:
            continue
        for mode in modes:
            mode = RunMode.parse(mode)
            out.append(CalibrationTarget(_stacked(dim, n), pipeline, mode, row[list(RunMode).index(mode)] * 1e-3))
    return out


def _stacked(dim: int, layers: int) -> ModelConfig:
    return ModelConfig(kind="stacked_linear", d_model=dim, layers=layers)


def _bounds(name: str) -> tuple[float, float]:
    if name.startswith("efficiency."):
        return (0.02, 1.0)
    return _BOUNDS.get(name, (0.0, math.inf))


def calibrate_report(targets: Sequence[CalibrationTarget], hw: HardwareConfig, base: Optional[CostModel] = None,
                     params: Sequence[str] = CALIBRATED_PARAMS) -> CalibrationReport:
    """Least-squares fit of ``params`` minimizing squared relative latency error over ``targets``."""
    from scipy.optimize import least_squares

    base = base or CostModel.for_hardware(hw)
    params = list(params)
    if len(targets) < len(params):
        raise CalibrationError(f"underdetermined: {len(targets)} target(s) for {len(params)} parameter(s)")
    progs = []
    for t in targets:
        plan = build_plan(t.model, hw, t.pipeline, t.seq_len, t.mode)
        progs.append((emit_programs(plan), t.model.batch))
    if len({(plan_bytes(p)) for p, _ in progs}) < 2:
        raise CalibrationError("underdetermined: targets must span at least two distinct workload sizes")
    measured = np.array([t.latency for t in targets])

    x0 = np.array([base.get(p) for p in params], dtype=float)
    scale = np.where(x0 > 0, x0, 1.0)
    lo = np.array([_bounds(p)[0] for p in params]) / scale
    hi = np.array([_bounds(p)[1] for p in params]) / scale

    def model_at(x):
        return base.with_params(dict(zip(params, x * scale)), provenance="calibrated")

    def residuals(x):
        cost = model_at(x)
        sim = np.array([simulate(p, cost, hw, batch=b).latency for p, b in progs])
        return (sim - measured) / measured

    x_start = np.clip(np.ones(len(params)), lo + 1e-9, hi - 1e-9)
    fit = least_squares(residuals, x_start, bounds=(lo, hi), diff_step=1e-3, xtol=1e-10, ftol=1e-12)
    cost = model_at(fit.x)
    return CalibrationReport(dict(zip(params, (float(v) for v in fit.x * scale))), list(map(float, fit.fun)), cost)


def calibrate(targets: Sequence[CalibrationTarget], hw: Optional[HardwareConfig] = None,
              base: Optional[CostModel] = None, params: Sequence[str] = CALIBRATED_PARAMS) -> CostModel:
    return calibrate_report(targets, hw or HardwareConfig(), base, params).cost


def plan_bytes(programs: Sequence[DeviceProgram]) -> int:
    return sum(ins.chunk.byte_len for p in programs for ins in p.instrs if type(ins) is AsyncLoad)


def fit_issue_cost(model: ModelConfig, hw: HardwareConfig, cost: CostModel, seq_len: int = 3072,
                   stage_size: int = 32 * 1024, depths: tuple = (4, 5), hi: float = 4e-7, iters: int = 8) -> float:
    """Smallest per-load issue cost at which the deeper pipeline is no faster than the shallower one."""
    shallow, deep = (emit_programs(build_plan(model, hw, PipelineConfig(stage_size, d), seq_len,
                                              RunMode.FUSED_OVERLAP)) for d in depths)

    def deep_wins(c):
        cc = dataclasses.replace(cost, load_issue_cost=c)
        return simulate(deep, cc, hw).latency < simulate(shallow, cc, hw).latency

    if not deep_wins(0.0):
        return 0.0
    if deep_wins(hi):
        raise CalibrationError(f"deeper pipeline still wins at issue cost {hi}")
    lo = 0.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if deep_wins(mid) else (lo, mid)
    return hi


def predict_tps(model: ModelConfig, hw: HardwareConfig, pipeline: PipelineConfig, mode: Union[RunMode, str],
                prefill: int, cost: CostModel, window: int = 128) -> float:
    """Decode tokens/s over a ``window``-token generation, timed at the window's mean position."""
    seq_len = min(prefill + window // 2, model.max_seq_len - 1)
    plan = build_plan(model, hw, pipeline, seq_len, mode)
    return simulate(emit_programs(plan), cost, hw, batch=model.batch).tokens_per_second
