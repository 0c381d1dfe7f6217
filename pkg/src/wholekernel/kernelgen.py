"""Lower a workload plan into one device program per thread block.

A program is a flat instruction stream. ``AsyncLoad`` is the producer side of the
shared-memory pipeline (non-blocking), ``AwaitStage`` hands a filled stage to the
consumer, ``ReleaseStage`` returns it. The same programs are interpreted for values
(numerics) and timed (simulator).
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Union

from .config import HardwareConfig, RunMode, scratch_bytes
from .partitioner import ChunkDescriptor, WorkloadPlan


class LaunchMarker(NamedTuple):
    kernel: int


class AsyncLoad(NamedTuple):
    chunk: ChunkDescriptor
    slot: int


class AwaitStage(NamedTuple):
    slot: int


class Compute(NamedTuple):
    op: str
    layer: int
    slots: tuple = ()
    chunks: tuple = ()
    work: int = 0  # elements touched, drives the compute cost
    head: int = -1
    dequant: bool = False


class ReleaseStage(NamedTuple):
    slot: int


class GlobalBarrier(NamedTuple):
    barrier_id: int
    label: str = ""


class SyncLoadCurrentToken(NamedTuple):
    layer: int
    head: int
    nbytes: int = 0


class WriteGlobal(NamedTuple):
    target: str
    layer: int


Instruction = Union[LaunchMarker, AsyncLoad, AwaitStage, Compute, ReleaseStage, GlobalBarrier,
                    SyncLoadCurrentToken, WriteGlobal]


@dataclass
class DeviceProgram:
    block_id: int
    instrs: list
    stage_size: int
    depth: int
    footprint: int
    consumer_warps: int = 4
    mode: RunMode = RunMode.FUSED_OVERLAP


class EmitError(RuntimeError):
    pass


class _Slotted(NamedTuple):
    """A compute that consumes pipeline stages; slots are bound during emission."""
    compute: Compute


# ------------------------------------------------------------------ steps

def _block_steps(plan: WorkloadPlan, block: int) -> list[list]:
    """Per-epoch list of instructions / slotted computes for one block, no loads yet."""
    m = plan.model
    batch = m.batch
    quant = m.quant is not None
    out = []
    for ei, epoch in enumerate(plan.epochs):
        chunks = plan.epoch_chunks(block, ei)
        l = epoch.layer
        steps: list = []
        sub = epoch.sublayer
        if sub == "linear":
            for c in chunks:
                steps.append(_Slotted(Compute("matvec_linear", l, chunks=(c,), work=c.rows * m.d_model * batch)))
            if chunks:
                steps.append(WriteGlobal("x", l))
        elif sub == "qkv":
            for c in chunks:
                steps.append(_Slotted(Compute("rmsnorm_matvec_qkv", l, chunks=(c,), work=c.rows * m.d_model * batch,
                                              dequant=quant)))
                if c.row_start < m.d_model + m.n_kv_heads * m.d_head:
                    steps.append(Compute("rope_apply", l, chunks=(c,), work=c.rows * batch))
            if chunks:
                steps.append(WriteGlobal("qkv", l))
        elif sub == "attn":
            head = plan.attention.head_of(block)
            if head >= 0:
                ratio = m.group_ratio
                if plan.attention.current_token_block(head) == block:
                    steps.append(SyncLoadCurrentToken(l, head, 2 * batch * m.d_head * m.dtype_bytes))
                    steps.append(Compute("attn_qk_pv_partial", l, work=2 * m.d_head * ratio * batch, head=head))
                for k, v in zip(chunks[0::2], chunks[1::2]):
                    steps.append(_Slotted(Compute("attn_qk_pv_partial", l, chunks=(k, v),
                                                  work=2 * k.rows * m.d_head * ratio, head=head)))
                steps.append(Compute("attn_reduce_meta", l, work=ratio * batch, head=head))
                steps.append(WriteGlobal("attn_meta", l))
        elif sub == "attn_reduce":
            head = plan.attention.head_of(block)
            if head >= 0:
                w = m.d_head * m.group_ratio * batch
                steps.append(Compute("attn_reduce_rescale", l, work=w, head=head))
                steps.append(Compute("attn_accumulate", l, work=w, head=head))
                steps.append(WriteGlobal("attn_out", l))
        elif sub == "aout":
            for c in chunks:
                steps.append(_Slotted(Compute("matvec_aout", l, chunks=(c,), work=c.rows * m.d_model * batch,
                                              dequant=quant)))
            if chunks:
                steps.append(WriteGlobal("x_mid", l))
        elif sub == "glu":
            for f1, f2 in zip(chunks[0::2], chunks[1::2]):
                assert f1.op == "ffn1" and f2.op == "ffn2" and f1.index == f2.index
                steps.append(_Slotted(Compute("glu_in_gate_swiglu_out", l, chunks=(f1, f2),
                                              work=(f1.rows + f2.rows) * m.d_model * batch, dequant=quant)))
            if chunks or block == 0:
                steps.append(Compute("glu_reduce", l, work=m.d_model * batch))
                steps.append(WriteGlobal("x_out", l))
        elif sub == "lmhead":
            for c in chunks:
                steps.append(_Slotted(Compute("matvec_lmhead", l, chunks=(c,), work=c.rows * m.d_model * batch)))
            if chunks:
                steps.append(WriteGlobal("logits", l))
        else:
            raise EmitError(f"unknown sublayer {sub!r}")
        out.append(steps)
    return out


def _lower(block: int, epochs: list[list], labels: list[tuple[bool, str]], depth: int, mode: RunMode) -> list:
    # loads are issued in consumption order, so the k-th consumed chunk is the k-th load
    loads: list[tuple[int, ChunkDescriptor]] = [
        (ei, c) for ei, steps in enumerate(epochs) for st in steps if isinstance(st, _Slotted) for c in st.compute.chunks]
    n_loads = len(loads)
    slot_of = [0] * n_loads
    free = deque(range(depth))
    nxt = 0
    used = 0
    out: list = []
    append = out.append
    hoist = mode is RunMode.FUSED_OVERLAP

    def fill(epoch: int) -> None:
        nonlocal nxt
        while free and nxt < n_loads and (hoist or loads[nxt][0] <= epoch):
            slot = free.popleft()
            append(AsyncLoad(loads[nxt][1], slot))
            slot_of[nxt] = slot
            nxt += 1

    barrier_id = 0
    for ei, steps in enumerate(epochs):
        if mode is RunMode.BASELINE or ei == 0:
            append(LaunchMarker(ei if mode is RunMode.BASELINE else 0))
        fill(ei)
        for st in steps:
            if not isinstance(st, _Slotted):
                append(st)
                continue
            comp = st.compute
            k = len(comp.chunks)
            if k > depth:
                raise EmitError(f"block {block}: {comp.op} needs {k} stages, pipeline depth is {depth}")
            fill(ei)
            slots = tuple(slot_of[used:used + k])
            used += k
            for s in slots:
                append(AwaitStage(s))
            append(Compute(comp.op, comp.layer, slots, comp.chunks, comp.work, comp.head, comp.dequant))
            for s in slots:
                append(ReleaseStage(s))
                free.append(s)
            fill(ei)
        barrier_after, label = labels[ei]
        if barrier_after:
            barrier_id += 1
            append(GlobalBarrier(barrier_id, label))
    if nxt != n_loads or used != n_loads:
        raise EmitError(f"block {block}: {n_loads - nxt} loads never issued")
    return out


def emit_programs(plan: WorkloadPlan, mode: Optional[Union[RunMode, str]] = None) -> list[DeviceProgram]:
    """One program per thread block; baseline adds a launch marker per sublayer kernel."""
    mode = RunMode.parse(mode if mode is not None else plan.mode)
    pipe = plan.pipeline
    footprint = pipe.stage_size * pipe.depth + scratch_bytes(plan.model)
    labels = [(e.barrier_after, e.label) for e in plan.epochs]
    programs = []
    for b in range(plan.num_blocks):
        instrs = _lower(b, _block_steps(plan, b), labels, pipe.depth, mode)
        programs.append(DeviceProgram(b, instrs, pipe.stage_size, pipe.depth, footprint, pipe.consumer_warps, mode))
    return programs


def strip_launches(instrs: Sequence) -> list:
    return [i for i in instrs if not isinstance(i, LaunchMarker)]


# ----------------------------------------------------------- verification

@dataclass(frozen=True)
class Diagnostic:
    code: str
    block: int
    index: int
    message: str

    def __str__(self) -> str:
        return f"block {self.block} @{self.index}: {self.code}: {self.message}"


def verify_program(p: DeviceProgram, hw: Optional[HardwareConfig] = None) -> list[Diagnostic]:
    """Static checks of one program's pipeline discipline and barrier order."""
    diags: list[Diagnostic] = []

    def bad(code, i, msg):
        diags.append(Diagnostic(code, p.block_id, i, msg))

    if hw is not None and p.footprint > hw.shared_mem_per_sm:
        bad("footprint", -1, f"{p.footprint} B exceeds {hw.shared_mem_per_sm} B of shared memory")
    loaded: dict[int, ChunkDescriptor] = {}
    ready: set[int] = set()
    last_barrier = 0
    for i, ins in enumerate(p.instrs):
        # after reporting, each check recovers as if the instruction were valid so one fault
        # yields one diagnostic rather than a cascade
        if isinstance(ins, AsyncLoad):
            if ins.slot in loaded:
                bad("slot-overflow", i, f"slot {ins.slot} loaded again before release")
                continue
            if not 0 <= ins.slot < p.depth:
                bad("slot-overflow", i, f"slot {ins.slot} outside pipeline depth {p.depth}")
            loaded[ins.slot] = ins.chunk
        elif isinstance(ins, AwaitStage):
            if ins.slot not in loaded:
                bad("await-empty", i, f"await on slot {ins.slot} with no load in flight")
            else:
                ready.add(ins.slot)
        elif isinstance(ins, Compute):
            for s, c in zip(ins.slots, ins.chunks):
                if s not in ready:
                    bad("use-before-ready", i, f"{ins.op} reads slot {s} before it was awaited")
                    if s in loaded:
                        ready.add(s)
                elif loaded.get(s) != c:
                    bad("unloaded-chunk", i, f"{ins.op} expects {c.op}#{c.index} but slot {s} holds another chunk")
            if len(ins.slots) > len(ins.chunks):
                bad("unloaded-chunk", i, f"{ins.op} binds more slots than chunks")
        elif isinstance(ins, ReleaseStage):
            if ins.slot not in ready:
                bad("release-unheld", i, f"release of slot {ins.slot} that is not held by the consumer")
            loaded.pop(ins.slot, None)
            ready.discard(ins.slot)
        elif isinstance(ins, GlobalBarrier):
            if ins.barrier_id <= last_barrier:
                bad("barrier-order", i, f"barrier {ins.barrier_id} after barrier {last_barrier}")
            last_barrier = ins.barrier_id
    if loaded:
        bad("leaked-slot", len(p.instrs), f"slots {sorted(loaded)} still held at program end")
    return diags


def _sync_sequence(p: DeviceProgram) -> list:
    return [ins for ins in p.instrs if isinstance(ins, (GlobalBarrier, LaunchMarker))]


def verify_programs(programs: Sequence[DeviceProgram], hw: Optional[HardwareConfig] = None) -> list[Diagnostic]:
    """Per-program checks plus cross-block agreement of barrier/launch sequences."""
    diags = []
    for p in programs:
        diags += verify_program(p, hw)
    if programs:
        ref = [(type(s).__name__, s[0]) for s in _sync_sequence(programs[0])]
        for p in programs[1:]:
            seq = [(type(s).__name__, s[0]) for s in _sync_sequence(p)]
            if seq != ref:
                diags.append(Diagnostic("barrier-mismatch", p.block_id, -1,
                                        f"sync sequence {_fmt_seq(seq)} differs from block "
                                        f"{programs[0].block_id}'s {_fmt_seq(ref)}"))
    return diags


def _fmt_seq(seq) -> str:
    ids = [str(i) for kind, i in seq if kind == "GlobalBarrier"]
    return "[" + ",".join(ids[:8]) + (",..." if len(ids) > 8 else "") + "]"


# ---------------------------------------------------------------- listing

def _layer(l: int) -> str:
    return "tail" if l < 0 else str(l)


def _chunk_ref(c: ChunkDescriptor) -> str:
    if c.load_class == "kv_cache":
        return f"m={c.op} L={_layer(c.layer)} h={c.head} b={c.batch} c={c.index}"
    return f"m={c.op} L={_layer(c.layer)} c={c.index}"


def render_instruction(ins) -> str:
    if isinstance(ins, AsyncLoad):
        return f"async_load {_chunk_ref(ins.chunk)} -> slot{ins.slot}"
    if isinstance(ins, AwaitStage):
        return f"await slot{ins.slot}"
    if isinstance(ins, ReleaseStage):
        return f"release slot{ins.slot}"
    if isinstance(ins, GlobalBarrier):
        return f"barrier {ins.barrier_id}"
    if isinstance(ins, LaunchMarker):
        return f"launch {ins.kernel}"
    if isinstance(ins, SyncLoadCurrentToken):
        return f"sync_load_current L={_layer(ins.layer)} h={ins.head}"
    if isinstance(ins, WriteGlobal):
        return f"write {ins.target} L={_layer(ins.layer)}"
    if isinstance(ins, Compute):
        op = f"dequant_then({ins.op})" if ins.dequant else ins.op
        parts = [f"compute {op} L={_layer(ins.layer)}"]
        if ins.head >= 0:
            parts.append(f"h={ins.head}")
        if ins.chunks:
            parts.append("in=" + ",".join(f"{c.op}#{c.index}" for c in ins.chunks))
        if ins.slots:
            parts.append("slots=" + ",".join(str(s) for s in ins.slots))
        return " ".join(parts)
    raise TypeError(f"not an instruction: {ins!r}")


def render_listing(p: DeviceProgram) -> str:
    """Deterministic one-instruction-per-line listing; refuses programs that fail verification."""
    diags = verify_program(p)
    if diags:
        raise ValueError(f"refusing to render unverified program: {diags[0]}")
    head = (f"program block={p.block_id} mode={p.mode.value} stage={p.stage_size} depth={p.depth} "
            f"warps={p.consumer_warps} footprint={p.footprint}")
    return "\n".join([head, *(render_instruction(i) for i in p.instrs)]) + "\n"
