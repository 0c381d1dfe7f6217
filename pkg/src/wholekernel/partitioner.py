"""Compile-time static workload partitioning.

Every streamed matrix is cut into whole-row chunks of at most ``stage_size`` bytes
and the chunks of each matrix are dealt round-robin to thread blocks (one block per
SM). Core attention splits the blocks into one group per KV head; the KV cache of
that head is chunked by position and dealt round-robin inside the group.
"""
from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Union

import numpy as np

from .config import (ConfigError, HardwareConfig, ModelConfig, PipelineConfig, RunMode, check_fits)
from .tensorstore import MatrixMeta, kv_bytes_per_position, matrix_layout


class PartitionError(ValueError):
    pass


class ChunkDescriptor(NamedTuple):
    layer: int
    op: str  # matrix op, or "k" / "v" for cache chunks
    index: int  # chunk index within its matrix
    byte_offset: int
    byte_len: int
    row_start: int
    row_end: int
    dtype: str
    load_class: str  # weight | kv_cache
    head: int = -1
    batch: int = -1

    @property
    def matrix_id(self) -> tuple:
        return (self.layer, self.op, self.head, self.batch)

    @property
    def rows(self) -> int:
        return self.row_end - self.row_start


@dataclass(frozen=True)
class ChunkedMatrix(Sequence):
    """Lazy view of a matrix cut into ``rows_per_chunk``-row chunks."""
    layer: int
    op: str
    rows: int
    row_bytes: int
    rows_per_chunk: int
    dtype: str
    load_class: str = "weight"
    head: int = -1
    batch: int = -1
    row_base: int = 0  # first logical row (KV cache: first position)

    def __len__(self) -> int:
        return -(-self.rows // self.rows_per_chunk)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        n = len(self)
        if i < 0:
            i += n
        if not 0 <= i < n:
            raise IndexError(i)
        r0 = i * self.rows_per_chunk
        r1 = min(r0 + self.rows_per_chunk, self.rows)
        return ChunkDescriptor(self.layer, self.op, i, r0 * self.row_bytes, (r1 - r0) * self.row_bytes,
                               self.row_base + r0, self.row_base + r1, self.dtype, self.load_class,
                               self.head, self.batch)

    def take(self, indices) -> list[ChunkDescriptor]:
        """Descriptors for in-range ``indices`` without per-item bounds handling."""
        rpc, rb, base, rows = self.rows_per_chunk, self.row_bytes, self.row_base, self.rows
        head = (self.layer, self.op)
        tail = (self.dtype, self.load_class, self.head, self.batch)
        out = []
        for i in indices:
            r0 = i * rpc
            r1 = r0 + rpc if r0 + rpc < rows else rows
            out.append(ChunkDescriptor(*head, i, r0 * rb, (r1 - r0) * rb, base + r0, base + r1, *tail))
        return out

    @property
    def nbytes(self) -> int:
        return self.rows * self.row_bytes

    def byte_lens(self) -> np.ndarray:
        lens = np.full(len(self), self.rows_per_chunk * self.row_bytes, dtype=np.int64)
        if len(self):
            lens[-1] = (self.rows - (len(self) - 1) * self.rows_per_chunk) * self.row_bytes
        return lens


def _rows_per_chunk(row_bytes: int, chunk_bytes: int, row_multiple: int = 1) -> int:
    rpc = chunk_bytes // row_bytes // row_multiple * row_multiple
    if rpc == 0:
        raise PartitionError(
            f"chunk of {chunk_bytes} B cannot hold {row_multiple} whole row(s) of {row_bytes} B")
    return rpc


def chunk_matrix(meta: MatrixMeta, chunk_bytes: int, row_multiple: int = 1) -> ChunkedMatrix:
    """Cut ``meta`` into whole-row chunks of at most ``chunk_bytes`` bytes."""
    rpc = _rows_per_chunk(meta.row_bytes, chunk_bytes, row_multiple)
    return ChunkedMatrix(meta.layer, meta.op, meta.rows, meta.row_bytes, rpc, meta.dtype)


# -------------------------------------------------------------- assignment

@dataclass(frozen=True)
class AssignmentGroup:
    chunks: Sequence  # ChunkedMatrix or a plain list of descriptors of one matrix
    blocks: tuple[int, ...]  # chunk i goes to blocks[i % len(blocks)]
    epoch: int = 0

    def indices_for(self, slot: int) -> range:
        return range(slot, len(self.chunks), len(self.blocks))


@dataclass
class BlockAssignment:
    num_blocks: int
    groups: list[AssignmentGroup] = field(default_factory=list)

    def chunks_for(self, block: int) -> list[ChunkDescriptor]:
        out = []
        for g in self.groups:
            if block in g.blocks:
                pos = g.blocks.index(block)
                out.extend(g.chunks[i] for i in g.indices_for(pos))
        return out

    def chunk_counts(self) -> np.ndarray:
        counts = np.zeros(self.num_blocks, dtype=np.int64)
        for g in self.groups:
            owners = np.asarray(g.blocks)[np.arange(len(g.chunks)) % len(g.blocks)]
            counts += np.bincount(owners, minlength=self.num_blocks)
        return counts

    def byte_totals(self, load_class: Optional[str] = None) -> np.ndarray:
        totals = np.zeros(self.num_blocks, dtype=np.int64)
        for g in self.groups:
            if load_class and _group_class(g) != load_class:
                continue
            owners = np.asarray(g.blocks)[np.arange(len(g.chunks)) % len(g.blocks)]
            totals += np.bincount(owners, weights=_byte_lens(g.chunks), minlength=self.num_blocks).astype(np.int64)
        return totals

    def check_exactly_once(self) -> None:
        """Raise unless every chunk index of every group lands on exactly one block."""
        for g in self.groups:
            n = len(g.chunks)
            hits = np.zeros(n, dtype=np.int64)
            for pos in range(len(g.blocks)):
                hits[np.arange(pos, n, len(g.blocks))] += 1
            if n and not (hits == 1).all():
                raise PartitionError(f"chunks of {_group_name(g)} not assigned exactly once")
            lens = _byte_lens(g.chunks)
            offsets = _byte_offsets(g.chunks)
            if n and (offsets[0] != 0 or (offsets[1:] != np.cumsum(lens)[:-1]).any()):
                raise PartitionError(f"byte ranges of {_group_name(g)} are not contiguous and disjoint")


def _group_class(g: AssignmentGroup) -> str:
    c = g.chunks
    return c.load_class if isinstance(c, ChunkedMatrix) else (c[0].load_class if len(c) else "weight")


def _group_name(g: AssignmentGroup) -> str:
    c = g.chunks[0]
    return f"L{c.layer}.{c.op}"


def _byte_lens(chunks) -> np.ndarray:
    if isinstance(chunks, ChunkedMatrix):
        return chunks.byte_lens()
    return np.array([c.byte_len for c in chunks], dtype=np.int64)


def _byte_offsets(chunks) -> np.ndarray:
    if isinstance(chunks, ChunkedMatrix):
        return np.arange(len(chunks), dtype=np.int64) * chunks.rows_per_chunk * chunks.row_bytes
    return np.array([c.byte_offset for c in chunks], dtype=np.int64)


def assign_chunks(chunks: Sequence, num_blocks: int) -> BlockAssignment:
    """Round-robin by chunk index within each matrix: chunk i -> block i mod num_blocks."""
    if num_blocks < 1:
        raise PartitionError("need at least one block")
    blocks = tuple(range(num_blocks))
    if isinstance(chunks, ChunkedMatrix):
        return BlockAssignment(num_blocks, [AssignmentGroup(chunks, blocks)])
    by_matrix: dict[tuple, list[ChunkDescriptor]] = {}
    for c in chunks:
        by_matrix.setdefault(c.matrix_id, []).append(c)
    groups = [AssignmentGroup(sorted(cs, key=lambda c: c.index), blocks) for cs in by_matrix.values()]
    return BlockAssignment(num_blocks, groups)


# --------------------------------------------------------------- attention

@dataclass(frozen=True)
class AttentionPartition:
    groups: tuple[tuple[int, ...], ...]  # kv head -> its thread blocks
    q_heads: tuple[tuple[int, ...], ...]  # kv head -> query heads replicated on each of its blocks
    num_blocks: int

    @property
    def participating(self) -> int:
        return sum(len(g) for g in self.groups)

    def head_of(self, block: int) -> int:
        for h, g in enumerate(self.groups):
            if block in g:
                return h
        return -1

    def current_token_block(self, head: int) -> int:
        # round-robin hands extra KV chunks to the front of the group
        return self.groups[head][-1]


def partition_attention(model: ModelConfig, hw: HardwareConfig, group_size: int = 8) -> AttentionPartition:
    if group_size < 1:
        raise PartitionError("group_size must be positive")
    if group_size * model.n_kv_heads > hw.num_sms:
        raise PartitionError(
            f"attention groups infeasible: {group_size} blocks x {model.n_kv_heads} kv heads > {hw.num_sms} SMs")
    ratio = model.group_ratio
    groups = tuple(tuple(range(h * group_size, (h + 1) * group_size)) for h in range(model.n_kv_heads))
    q_heads = tuple(tuple(range(h * ratio, (h + 1) * ratio)) for h in range(model.n_kv_heads))
    return AttentionPartition(groups, q_heads, hw.num_sms)


def kv_chunk_rows(model: ModelConfig, stage_size: int) -> int:
    return _rows_per_chunk(kv_bytes_per_position(model), stage_size)


def plan_kv_loads(partition: AttentionPartition, seq_len: int, chunk_rows: int, *, layer: int = 0,
                  batch: int = 1, row_bytes: int = 256, dtype: str = "bf16") -> dict[int, list[ChunkDescriptor]]:
    """Per-block KV chunk lists for one layer, K_j then V_j for each position range j.

    Positions [0, seq_len) only; the current token's key/value is loaded synchronously.
    """
    if seq_len < 0:
        raise PartitionError("seq_len must be non-negative")
    out: dict[int, list[ChunkDescriptor]] = {b: [] for g in partition.groups for b in g}
    for group in _kv_groups(partition, seq_len, chunk_rows, layer, batch, row_bytes, dtype):
        k, v = group
        for pos, block in enumerate(k.blocks):
            for i in k.indices_for(pos):
                out[block] += [k.chunks[i], v.chunks[i]]
    return out


def _kv_groups(partition, seq_len, chunk_rows, layer, batch, row_bytes, dtype):
    for b in range(batch):
        for h, blocks in enumerate(partition.groups):
            pair = []
            for op in ("k", "v"):
                cm = ChunkedMatrix(layer, op, seq_len, row_bytes, chunk_rows, dtype, "kv_cache", h, b)
                pair.append(AssignmentGroup(cm, blocks))
            yield pair


# ------------------------------------------------------------------- plan

SUBLAYERS = ("qkv", "attn", "attn_reduce", "aout", "glu")
OP_SUBLAYER = {"qkv": "qkv", "k": "attn", "v": "attn", "aout": "aout", "ffn1": "glu", "ffn2": "glu",
               "lmhead": "lmhead", "linear": "linear"}


@dataclass(frozen=True)
class Epoch:
    """Work between two global barriers."""
    layer: int
    sublayer: str
    barrier_after: bool

    @property
    def label(self) -> str:
        return f"{'tail' if self.layer < 0 else f'L{self.layer}'}.{self.sublayer}"


@dataclass
class WorkloadPlan:
    model: ModelConfig
    hardware: HardwareConfig
    pipeline: PipelineConfig
    seq_len: int
    mode: RunMode
    epochs: list[Epoch]
    matrices: dict[tuple[int, str], ChunkedMatrix]
    assignment: BlockAssignment
    attention: Optional[AttentionPartition]
    kv_chunk_rows: int = 0
    _by_epoch: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        for g in self.assignment.groups:
            pos = {b: i for i, b in enumerate(g.blocks)}
            self._by_epoch.setdefault(g.epoch, []).append((g, pos))

    @property
    def num_blocks(self) -> int:
        return self.hardware.num_sms

    @property
    def barriers(self) -> list[tuple[int, str]]:
        out, bid = [], 0
        for e in self.epochs:
            if e.barrier_after:
                bid += 1
                out.append((bid, e.label))
        return out

    def weight_bytes(self) -> int:
        return int(self.assignment.byte_totals("weight").sum())

    def kv_bytes(self) -> int:
        return int(self.assignment.byte_totals("kv_cache").sum())

    def sync_bytes(self) -> int:
        """Current-token keys and values read synchronously after the QKV barrier."""
        m = self.model
        if m.kind != "llama_decoder":
            return 0
        return m.layers * m.batch * m.n_kv_heads * 2 * kv_bytes_per_position(m)

    def epoch_chunks(self, block: int, epoch_index: int) -> list[ChunkDescriptor]:
        e = self.epochs[epoch_index]
        out = []
        for g, pos in self._by_epoch.get(epoch_index, ()):
            if block in pos:
                idx = g.indices_for(pos[block])
                if isinstance(g.chunks, ChunkedMatrix):
                    out.extend(g.chunks.take(idx))
                else:
                    out.extend(g.chunks[i] for i in idx)
        if e.sublayer == "glu":
            out.sort(key=lambda c: (c.index, c.op != "ffn1"))
        elif e.sublayer == "attn":
            out.sort(key=lambda c: (c.batch, c.head, c.index, c.op))
        return out


def build_plan(model: ModelConfig, hw: HardwareConfig, pipeline: PipelineConfig, seq_len: int = 0,
               mode: Union[RunMode, str] = RunMode.FUSED_OVERLAP, group_size: int = 8) -> WorkloadPlan:
    """Full static schedule for one decode step at ``seq_len`` cached positions."""
    mode = RunMode.parse(mode)
    try:
        check_fits(model, hw, pipeline)
    except ConfigError as exc:
        raise PartitionError(str(exc)) from None
    stage = pipeline.stage_size
    nb = hw.num_sms
    all_blocks = tuple(range(nb))
    layout = matrix_layout(model)
    matrices: dict[tuple[int, str], ChunkedMatrix] = {}
    epochs: list[Epoch] = []
    groups: list[AssignmentGroup] = []

    if model.kind == "stacked_linear":
        for meta in layout:
            cm = chunk_matrix(meta, stage)
            matrices[(meta.layer, meta.op)] = cm
            groups.append(AssignmentGroup(cm, all_blocks, len(epochs)))
            epochs.append(Epoch(meta.layer, "linear", meta.layer < model.layers - 1))
        return WorkloadPlan(model, hw, pipeline, seq_len, mode, epochs, matrices,
                            BlockAssignment(nb, groups), None)

    if seq_len + 1 > model.max_seq_len:
        raise PartitionError(f"seq_len {seq_len} exceeds KV capacity {model.max_seq_len}")
    attn = partition_attention(model, hw, group_size)
    kv_rows = kv_chunk_rows(model, stage)
    metas = {(m.layer, m.op): m for m in layout}
    for l in range(model.layers):
        # even row counts keep RoPE pairs and ffn1 in/gate pairs inside one chunk
        qkv = chunk_matrix(metas[l, "qkv"], stage, row_multiple=2)
        aout = chunk_matrix(metas[l, "aout"], stage)
        ffn1 = chunk_matrix(metas[l, "ffn1"], stage, row_multiple=2)
        f2 = metas[l, "ffn2"]
        ffn2 = ChunkedMatrix(l, "ffn2", f2.rows, f2.row_bytes, ffn1.rows_per_chunk // 2, f2.dtype)
        assert len(ffn1) == len(ffn2)
        matrices.update({(l, "qkv"): qkv, (l, "aout"): aout, (l, "ffn1"): ffn1, (l, "ffn2"): ffn2})

        base = len(epochs)
        epochs += [Epoch(l, s, True) for s in SUBLAYERS]
        groups.append(AssignmentGroup(qkv, all_blocks, base))
        for k, v in _kv_groups(attn, seq_len, kv_rows, l, model.batch, kv_bytes_per_position(model), model.dtype):
            groups += [AssignmentGroup(k.chunks, k.blocks, base + 1), AssignmentGroup(v.chunks, v.blocks, base + 1)]
        groups.append(AssignmentGroup(aout, all_blocks, base + 3))
        groups += [AssignmentGroup(ffn1, all_blocks, base + 4), AssignmentGroup(ffn2, all_blocks, base + 4)]

    lm = chunk_matrix(metas[-1, "lmhead"], stage)
    matrices[(-1, "lmhead")] = lm
    groups.append(AssignmentGroup(lm, all_blocks, len(epochs)))
    epochs.append(Epoch(-1, "lmhead", False))
    return WorkloadPlan(model, hw, pipeline, seq_len, mode, epochs, matrices, BlockAssignment(nb, groups),
                        attn, kv_rows)


def plan_report(plan: WorkloadPlan) -> dict:
    counts = plan.assignment.chunk_counts()
    totals = plan.assignment.byte_totals()
    return {
        "blocks": [{"block": b, "chunks": int(counts[b]), "bytes": int(totals[b])} for b in range(plan.num_blocks)],
        "barriers": plan.barriers,
        "weight_bytes": plan.weight_bytes(),
        "kv_bytes": plan.kv_bytes(),
        "sync_bytes": plan.sync_bytes(),
        "epochs": len(plan.epochs),
    }
