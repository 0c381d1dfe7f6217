"""Decode-step math, the device-program interpreter and a dense reference.

The interpreter runs all blocks one barrier epoch at a time. Global writes are
buffered per block and committed at the closing barrier in block-id order, so the
cross-block reduction order (and therefore every bit of the result) is fixed by
the plan, not by the run mode. Reading a global value before the barrier that
publishes it raises :class:`MemoryOrderError`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .kernelgen import (AsyncLoad, AwaitStage, Compute, DeviceProgram, GlobalBarrier, LaunchMarker, ReleaseStage,
                        SyncLoadCurrentToken, WriteGlobal)
from .tensorstore import TensorStore, kv_append


class MemoryOrderError(RuntimeError):
    """A global value was read before the barrier that publishes it."""


# ------------------------------------------------------------- primitives

def rmsnorm(x: np.ndarray, w: np.ndarray, eps: float) -> np.ndarray:
    x = np.asarray(x)
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return w * x / np.sqrt(ms + eps)


def rope_rotate(v: np.ndarray, pos: int, theta: float) -> np.ndarray:
    """Rotate adjacent pairs (2k, 2k+1) of the last axis by pos * theta**(-2k/d)."""
    v = np.asarray(v)
    d = v.shape[-1]
    if d % 2:
        raise ValueError("rope needs an even head dimension")
    k = np.arange(d // 2)
    ang = pos * theta ** (-2.0 * k / d)
    c, s = np.cos(ang), np.sin(ang)
    even, odd = v[..., 0::2], v[..., 1::2]
    out = np.empty(v.shape, dtype=np.result_type(v.dtype, np.float32))
    out[..., 0::2] = even * c - odd * s
    out[..., 1::2] = even * s + odd * c
    return out


def silu(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    with np.errstate(over="ignore"):
        return z / (1.0 + np.exp(-z))


def swiglu_combine(g_in: np.ndarray, g_gate: np.ndarray) -> np.ndarray:
    if np.shape(g_in) != np.shape(g_gate):
        raise ValueError("in/gate halves differ in shape")
    return silu(g_gate) * g_in


@dataclass
class PartialAttention:
    """Online-softmax state; ``o`` is the unnormalized sum of exp(s - m) * v."""
    m: np.ndarray
    l: np.ndarray
    o: np.ndarray

    @classmethod
    def empty(cls, lead: tuple, d_head: int, dtype=np.float64) -> "PartialAttention":
        return cls(np.full(lead, -np.inf, dtype), np.zeros(lead, dtype), np.zeros(lead + (d_head,), dtype))


def attn_partial(q: np.ndarray, keys: np.ndarray, values: np.ndarray, state: PartialAttention,
                 alpha: float) -> PartialAttention:
    """Fold positions (keys/values: (n, d)) into the state of queries q: (..., d)."""
    if len(keys) == 0:
        return state
    s = alpha * (q @ keys.T)  # (..., n)
    m_new = np.maximum(state.m, s.max(axis=-1))
    carry = np.exp(state.m - m_new)
    p = np.exp(s - m_new[..., None])
    l_new = state.l * carry + p.sum(axis=-1)
    o_new = state.o * carry[..., None] + p @ values
    return PartialAttention(m_new, l_new, o_new)


def reduce_metadata(ms: Sequence[np.ndarray], ls: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stage 2 of the reduction: global max logit and global denominator."""
    M = np.max(np.stack(ms), axis=0)
    if np.any(np.isneginf(M)):
        raise ValueError("attention reduction over partials that saw no positions")
    L = sum(l * np.exp(m - M) for m, l in zip(ms, ls))
    return M, L


def rescale_partial(p: PartialAttention, M: np.ndarray, L: np.ndarray) -> np.ndarray:
    w = np.exp(p.m - M) / L
    return p.o * w[..., None]


def attn_reduce(partials: Sequence[PartialAttention]) -> np.ndarray:
    """Combine block partials: publish (m, l), rescale each o, then sum."""
    if not partials:
        raise ValueError("no partials to reduce")
    M, L = reduce_metadata([p.m for p in partials], [p.l for p in partials])
    out = np.zeros_like(partials[0].o)
    for p in partials:
        out = out + rescale_partial(p, M, L)
    return out


def glu_chunk_step(w_in: np.ndarray, w_gate: np.ndarray, w_out_cols: np.ndarray, h: np.ndarray,
                   acc: np.ndarray) -> np.ndarray:
    """acc += W_out[:, rows] @ swiglu(W_in[rows] h, W_gate[rows] h).

    ``w_out_cols`` holds the matching columns of the output projection as rows
    (shape (r, d_model)); h is (batch, d_model), acc is (batch, d_model).
    """
    u = swiglu_combine(h @ w_in.T, h @ w_gate.T)
    return acc + u @ w_out_cols


# -------------------------------------------------------------- reference

def _tokens(store: TensorStore, token) -> np.ndarray:
    return np.broadcast_to(np.asarray(token), (store.model.batch,))


def _input(store: TensorStore, token) -> np.ndarray:
    m = store.model
    toks = _tokens(store, token)
    if m.kind == "stacked_linear":
        return store.input_vector(int(toks[0]))
    return store.weights["embedding"][toks]


def reference_forward(store: TensorStore, token, pos: int) -> np.ndarray:
    """Dense float64 decode step; does not touch the cache."""
    m = store.model
    W = store.weights
    x = _input(store, token).astype(np.float64)
    if m.kind == "stacked_linear":
        for l in range(m.layers):
            x = x @ W[f"L{l}.linear"].astype(np.float64).T
        return x
    B, dh, nkv, ratio = m.batch, m.d_head, m.n_kv_heads, m.group_ratio
    alpha = 1.0 / np.sqrt(dh)
    for l in range(m.layers):
        h = rmsnorm(x, W[f"L{l}.attn_norm"].astype(np.float64), m.rmsnorm_eps)
        qkv = h @ W[f"L{l}.qkv"].astype(np.float64).T
        q = rope_rotate(qkv[:, :m.d_model].reshape(B, m.n_q_heads, dh), pos, m.rope_theta)
        k = rope_rotate(qkv[:, m.d_model:m.d_model + nkv * dh].reshape(B, nkv, dh), pos, m.rope_theta)
        v = qkv[:, m.d_model + nkv * dh:].reshape(B, nkv, dh)
        # the current key/value is attended to as stored in the cache
        k, v = (a.astype(store.kv.k.dtype).astype(np.float64) for a in (k, v))
        K = np.concatenate([store.kv.k[l, :, :, :pos].astype(np.float64), k[:, :, None]], axis=2)
        V = np.concatenate([store.kv.v[l, :, :, :pos].astype(np.float64), v[:, :, None]], axis=2)
        qg = q.reshape(B, nkv, ratio, dh)
        s = alpha * np.einsum("bhrd,bhnd->bhrn", qg, K)
        s -= s.max(axis=-1, keepdims=True)
        p = np.exp(s)
        p /= p.sum(axis=-1, keepdims=True)
        o = np.einsum("bhrn,bhnd->bhrd", p, V).reshape(B, m.d_model)
        x = x + o @ W[f"L{l}.aout"].astype(np.float64).T
        h2 = rmsnorm(x, W[f"L{l}.ffn_norm"].astype(np.float64), m.rmsnorm_eps)
        f1 = W[f"L{l}.ffn1"].astype(np.float64)
        u = swiglu_combine(h2 @ f1[0::2].T, h2 @ f1[1::2].T)
        x = x + u @ W[f"L{l}.ffn2"].astype(np.float64)
    hf = rmsnorm(x, W["tail.final_norm"].astype(np.float64), m.rmsnorm_eps)
    return hf @ W["tail.lmhead"].astype(np.float64).T


# ------------------------------------------------------------ interpreter

@dataclass
class _Block:
    slots: dict = field(default_factory=dict)
    ready: set = field(default_factory=set)
    local: dict = field(default_factory=dict)


class _Interpreter:
    def __init__(self, programs: Sequence[DeviceProgram], store: TensorStore, token, pos: int, acc_dtype):
        self.store = store
        self.m = store.model
        self.pos = pos
        self.dt = np.dtype(acc_dtype)
        self.blocks = [_Block() for _ in programs]
        self.programs = programs
        self.globals: dict = {("x_out", -1) if self.m.kind == "llama_decoder" else ("x", -1):
                              _input(store, token).astype(self.dt)}
        self.pending: list = []
        self._normed: dict = {}

    # -- globals
    def read(self, key):
        try:
            return self.globals[key]
        except KeyError:
            raise MemoryOrderError(f"read of {key} before the barrier that publishes it") from None

    def weight(self, name, r0, r1):
        return self.store.weights[name][r0:r1].astype(self.dt, copy=False)

    def normed(self, src_key, norm_name):
        key = (src_key, norm_name)
        if key not in self._normed:
            x = self.read(src_key)
            self._normed[key] = rmsnorm(x, self.store.weights[norm_name].astype(self.dt), self.m.rmsnorm_eps
                                        ).astype(self.dt)
        return self._normed[key]

    # -- execution
    def run(self):
        segments = [_split_epochs(p.instrs) for p in self.programs]
        n_epochs = {len(s) for s in segments}
        if len(n_epochs) != 1:
            raise MemoryOrderError("blocks disagree on the number of barrier epochs")
        for e in range(n_epochs.pop()):
            for b, segs in enumerate(segments):
                for ins in segs[e]:
                    self.step(b, ins)
            self.commit()

    def step(self, b: int, ins):
        blk = self.blocks[b]
        if isinstance(ins, AsyncLoad):
            blk.slots[ins.slot] = (ins.chunk, self.load(ins.chunk))
        elif isinstance(ins, AwaitStage):
            blk.ready.add(ins.slot)
        elif isinstance(ins, ReleaseStage):
            blk.slots.pop(ins.slot, None)
            blk.ready.discard(ins.slot)
        elif isinstance(ins, Compute):
            data = []
            for s, c in zip(ins.slots, ins.chunks):
                if s not in blk.ready or blk.slots[s][0] != c:
                    raise MemoryOrderError(f"block {b}: {ins.op} reads slot {s} before its chunk is ready")
                data.append(blk.slots[s][1])
            getattr(self, "op_" + ins.op)(b, blk.local, ins, data)
        elif isinstance(ins, SyncLoadCurrentToken):
            if ("kvcur", ins.layer) not in self.globals:
                raise MemoryOrderError(f"current-token K/V of layer {ins.layer} read before it was appended")
            kv = self.store.kv
            blk.local["cur"] = (kv.k[ins.layer, :, ins.head, self.pos].astype(self.dt),
                                kv.v[ins.layer, :, ins.head, self.pos].astype(self.dt))
        elif isinstance(ins, WriteGlobal):
            self.pending.append((b, ins.target, ins.layer, self.payload(blk.local, ins)))
        elif isinstance(ins, (GlobalBarrier, LaunchMarker)):
            pass
        else:
            raise TypeError(ins)

    def load(self, c):
        if c.load_class == "kv_cache":
            if c.row_end > self.pos:
                raise MemoryOrderError(f"KV chunk {c} reaches past the cached prefix {self.pos}")
            kv = self.store.kv
            src = kv.k if c.op == "k" else kv.v
            return src[c.layer, c.batch, c.head, c.row_start:c.row_end].astype(self.dt)
        name = f"{'tail' if c.layer < 0 else f'L{c.layer}'}.{c.op}"
        return self.weight(name, c.row_start, c.row_end)

    # -- compute kinds
    def _x_in(self, l):
        return ("x_out", l - 1)

    def _rows(self, local, c, values):
        local.setdefault("rows", {})[c.row_start] = (c.row_start, c.row_end, values)

    def op_matvec_linear(self, b, local, ins, data):
        x = self.read(("x", ins.layer - 1))
        self._rows(local, ins.chunks[0], x @ data[0].T)

    def op_rmsnorm_matvec_qkv(self, b, local, ins, data):
        h = self.normed(self._x_in(ins.layer), f"L{ins.layer}.attn_norm")
        self._rows(local, ins.chunks[0], h @ data[0].T)

    def op_rope_apply(self, b, local, ins, data):
        m = self.m
        c = ins.chunks[0]
        r0, r1, vals = local["rows"][c.row_start]
        rope_end = m.d_model + m.n_kv_heads * m.d_head
        out = vals.copy()
        for start in range(r0, min(r1, rope_end), 2):
            k = (start % m.d_head) // 2
            ang = self.pos * m.rope_theta ** (-2.0 * k / m.d_head)
            cs, sn = np.cos(ang), np.sin(ang)
            a, bb = vals[:, start - r0], vals[:, start - r0 + 1]
            out[:, start - r0] = a * cs - bb * sn
            out[:, start - r0 + 1] = a * sn + bb * cs
        local["rows"][c.row_start] = (r0, r1, out)

    def _attn_state(self, local, layer, head):
        if "attn" not in local:
            m = self.m
            local["q"] = self.read(("q", layer))[:, head * m.group_ratio:(head + 1) * m.group_ratio]
            local["head"] = head
            local["attn"] = PartialAttention.empty((m.batch, m.group_ratio), m.d_head, self.dt)
        return local["attn"]

    def op_attn_qk_pv_partial(self, b, local, ins, data):
        m = self.m
        st = self._attn_state(local, ins.layer, ins.head)
        alpha = 1.0 / np.sqrt(m.d_head)
        if not ins.chunks:  # current token, already synchronously loaded
            k, v = local["cur"]
            for bi in range(m.batch):
                upd = attn_partial(local["q"][bi], k[bi][None], v[bi][None], _row(st, bi), alpha)
                _set_row(st, bi, upd)
            return
        kc = ins.chunks[0]
        upd = attn_partial(local["q"][kc.batch], data[0], data[1], _row(st, kc.batch), alpha)
        _set_row(st, kc.batch, upd)

    def op_attn_reduce_meta(self, b, local, ins, data):
        self._attn_state(local, ins.layer, ins.head)

    def op_attn_reduce_rescale(self, b, local, ins, data):
        metas = self.read(("meta", ins.layer))[ins.head]
        M, L = reduce_metadata([mm for _, mm, _ in metas], [ll for _, _, ll in metas])
        local["o_scaled"] = rescale_partial(local["attn"], M, L)

    def op_attn_accumulate(self, b, local, ins, data):
        local["o_out"] = (ins.head, local.pop("o_scaled"))
        del local["attn"], local["q"], local["head"]

    def op_matvec_aout(self, b, local, ins, data):
        o = self.read(("attn_o", ins.layer))
        self._rows(local, ins.chunks[0], o @ data[0].T)

    def op_glu_in_gate_swiglu_out(self, b, local, ins, data):
        l = ins.layer
        f1, f2 = ins.chunks
        if f2.row_start * 2 != f1.row_start:
            raise MemoryOrderError("GLU chunk pairing broken: ffn2 columns do not match ffn1 rows")
        h = self.normed(("x_mid", l), f"L{l}.ffn_norm")
        acc = local.get("glu_acc")
        if acc is None:
            acc = np.zeros((self.m.batch, self.m.d_model), self.dt)
        local["glu_acc"] = glu_chunk_step(data[0][0::2], data[0][1::2], data[1], h, acc)

    def op_glu_reduce(self, b, local, ins, data):
        acc = local.pop("glu_acc", None)
        if acc is None:
            acc = np.zeros((self.m.batch, self.m.d_model), self.dt)
        if b == 0:
            acc = self.read(("x_mid", ins.layer)) + acc
        local["glu_out"] = acc

    def op_matvec_lmhead(self, b, local, ins, data):
        h = self.normed(("x_out", self.m.layers - 1), "tail.final_norm")
        self._rows(local, ins.chunks[0], h @ data[0].T)

    # -- writes and commits
    def payload(self, local, ins):
        t = ins.target
        if t in ("x", "qkv", "x_mid", "logits"):
            rows = local.pop("rows")
            if t == "x_mid":
                x = self.read(self._x_in(ins.layer))
                return [(r0, r1, x[:, r0:r1] + v) for r0, r1, v in rows.values()]
            return list(rows.values())
        if t == "attn_meta":
            st = local["attn"]
            return (local["head"], st.m.copy(), st.l.copy())
        if t == "attn_out":
            return local.pop("o_out")
        if t == "x_out":
            return local.pop("glu_out")
        raise ValueError(f"unknown write target {t!r}")

    def commit(self):
        m = self.m
        pending, self.pending = self.pending, []
        groups: dict = {}
        for b, target, layer, payload in pending:  # already in block order
            groups.setdefault((target, layer), []).append((b, payload))
        for (target, layer), items in groups.items():
            if target in ("x", "qkv", "x_mid", "logits"):
                width = {"x": m.d_model, "qkv": m.qkv_rows, "x_mid": m.d_model, "logits": m.vocab_size}[target]
                full = np.zeros((m.batch, width), self.dt)
                seen = np.zeros(width, dtype=np.int64)
                for _, rows in items:
                    for r0, r1, v in rows:
                        full[:, r0:r1] = v
                        seen[r0:r1] += 1
                if not (seen == 1).all():
                    raise MemoryOrderError(f"{target} of layer {layer}: rows not written exactly once")
                if target == "qkv":
                    self._commit_qkv(layer, full)
                else:
                    self.globals[(target, layer)] = full
            elif target == "attn_meta":
                metas: dict = {}
                for b, (head, mm, ll) in items:
                    metas.setdefault(head, []).append((b, mm, ll))
                self.globals[("meta", layer)] = metas
            elif target == "attn_out":
                o = np.zeros((m.batch, m.n_kv_heads, m.group_ratio, m.d_head), self.dt)
                for _, (head, part) in items:
                    o[:, head] = o[:, head] + part
                self.globals[("attn_o", layer)] = o.reshape(m.batch, m.d_model)
            elif target == "x_out":
                acc = np.zeros((m.batch, m.d_model), self.dt)
                for _, part in items:
                    acc = acc + part
                self.globals[("x_out", layer)] = acc

    def _commit_qkv(self, layer, full):
        m = self.m
        kvd = m.n_kv_heads * m.d_head
        self.globals[("q", layer)] = full[:, :m.d_model].reshape(m.batch, m.n_q_heads, m.d_head)
        k = full[:, m.d_model:m.d_model + kvd].reshape(m.batch, m.n_kv_heads, m.d_head)
        v = full[:, m.d_model + kvd:].reshape(m.batch, m.n_kv_heads, m.d_head)
        kv_append(self.store.kv, layer, k, v)
        self.globals[("kvcur", layer)] = True


def _row(st: PartialAttention, i: int) -> PartialAttention:
    return PartialAttention(st.m[i], st.l[i], st.o[i])


def _set_row(st: PartialAttention, i: int, upd: PartialAttention) -> None:
    st.m[i], st.l[i], st.o[i] = upd.m, upd.l, upd.o


def _split_epochs(instrs) -> list[list]:
    out, cur = [], []
    for ins in instrs:
        cur.append(ins)
        if isinstance(ins, GlobalBarrier):
            out.append(cur)
            cur = []
    out.append(cur)
    return out


def execute_program(programs: Sequence[DeviceProgram], store: TensorStore, token, pos: int,
                    acc_dtype=np.float32) -> np.ndarray:
    """Interpret all blocks' programs for one decode step; appends the token's K/V to the cache.

    Returns logits (batch, vocab) for decoders, the final activation for stacked linear models.
    """
    m = store.model
    if m.kind == "llama_decoder" and not (store.kv.length == pos).all():
        raise ValueError(f"cache holds {store.kv.length.tolist()} positions, programs were built for {pos}")
    it = _Interpreter(programs, store, token, pos, acc_dtype)
    it.run()
    if m.kind == "stacked_linear":
        return it.read(("x", m.layers - 1))
    return it.read(("logits", -1))


def greedy_token(logits: np.ndarray) -> int:
    """Argmax over the first batch row; ties go to the lowest index."""
    return int(np.argmax(np.asarray(logits)[0]))
