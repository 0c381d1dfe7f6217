"""Weights, KV cache and residual state for one model instance.

Dense weights are held as float32 arrays whose values are already rounded to the
model's storage dtype, so byte accounting follows the storage dtype while the
arithmetic stays in float32/float64. INT4 matrices additionally keep their packed
codes and fp16 scale/zero pairs.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .config import ConfigError, HardwareConfig, ModelConfig, QuantConfig

# per-group fp16 scale + fp16 zero point, stored next to the codes of each row
QUANT_META_BYTES = 4


class CapacityError(RuntimeError):
    pass


def round_bf16(a: np.ndarray) -> np.ndarray:
    """Round float32 values to the nearest bfloat16 (ties to even), returned as float32."""
    a = np.ascontiguousarray(a, dtype=np.float32)
    bits = a.view(np.uint32)
    rounded = bits + np.uint32(0x7FFF) + ((bits >> 16) & np.uint32(1))
    return (rounded & np.uint32(0xFFFF0000)).view(np.float32)


# ------------------------------------------------------------------ INT4

@dataclass(frozen=True)
class QuantGroup:
    codes: np.ndarray  # uint8 values in [0, 15]
    scale: float
    zero_point: float


def dequantize(g: QuantGroup) -> np.ndarray:
    codes = np.asarray(g.codes)
    if codes.size and (codes.min() < 0 or codes.max() > 15):
        raise ValueError("INT4 codes must lie in [0, 15]")
    return (codes.astype(np.float64) - g.zero_point) * g.scale


def quantize_with(values: np.ndarray, scale: float, zero_point: float) -> np.ndarray:
    """Codes for ``values`` on a fixed affine grid, clamped to [0, 15]."""
    codes = np.rint(np.asarray(values, dtype=np.float64) / scale + zero_point)
    return np.clip(codes, 0, 15).astype(np.uint8)


def quantize_group(values: np.ndarray) -> QuantGroup:
    """Min/max affine quantization of one group; scale and zero are fp16-representable."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = min(values.min(), 0.0), max(values.max(), 0.0)
    scale = float(np.float16((hi - lo) / 15.0)) or 1.0
    zero = float(np.clip(np.rint(-lo / scale), 0, 15))
    return QuantGroup(quantize_with(values, scale, zero), scale, zero)


def pack_int4(codes: np.ndarray) -> np.ndarray:
    """Two codes per byte, low nibble first."""
    codes = np.asarray(codes, dtype=np.uint8).reshape(-1)
    if codes.size % 2:
        raise ValueError("need an even number of codes to pack")
    return (codes[0::2] & 0x0F) | (codes[1::2] << 4)


def unpack_int4(packed: np.ndarray) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8).reshape(-1)
    out = np.empty(packed.size * 2, dtype=np.uint8)
    out[0::2] = packed & 0x0F
    out[1::2] = packed >> 4
    return out


@dataclass
class QuantizedMatrix:
    packed: np.ndarray  # uint8 (rows, cols // 2)
    scales: np.ndarray  # float16 (rows, cols // group)
    zeros: np.ndarray  # float16 (rows, cols // group)
    group_size: int

    @classmethod
    def from_dense(cls, w: np.ndarray, group_size: int) -> "QuantizedMatrix":
        rows, cols = w.shape
        groups = w.reshape(rows, cols // group_size, group_size).astype(np.float64)
        lo = np.minimum(groups.min(axis=2), 0.0)
        hi = np.maximum(groups.max(axis=2), 0.0)
        scales = ((hi - lo) / 15.0).astype(np.float16)
        scales[scales == 0] = 1.0
        s = scales.astype(np.float64)
        zeros = np.clip(np.rint(-lo / s), 0, 15)
        codes = np.clip(np.rint(groups / s[..., None] + zeros[..., None]), 0, 15).astype(np.uint8)
        packed = pack_int4(codes.reshape(-1)).reshape(rows, cols // 2)
        return cls(packed, scales, zeros.astype(np.float16), group_size)

    def dense(self) -> np.ndarray:
        rows = self.packed.shape[0]
        codes = unpack_int4(self.packed).reshape(rows, -1, self.group_size).astype(np.float32)
        w = (codes - self.zeros.astype(np.float32)[..., None]) * self.scales.astype(np.float32)[..., None]
        return w.reshape(rows, -1)


# ---------------------------------------------------------- matrix layout

@dataclass(frozen=True)
class MatrixMeta:
    """One streamed weight matrix as laid out in memory (row-major, whole rows)."""
    op: str  # qkv | aout | ffn1 | ffn2 | lmhead | linear
    layer: int  # -1 for the model tail
    rows: int
    cols: int  # stored row length
    dtype: str  # bf16 | fp32 | int4
    group_size: int = 0

    @property
    def row_bytes(self) -> int:
        if self.dtype == "int4":
            return self.cols // 2 + (self.cols // self.group_size) * QUANT_META_BYTES
        return self.cols * {"bf16": 2, "fp32": 4}[self.dtype]

    @property
    def nbytes(self) -> int:
        return self.rows * self.row_bytes

    @property
    def name(self) -> str:
        return f"{'tail' if self.layer < 0 else f'L{self.layer}'}.{self.op}"


def matrix_layout(model: ModelConfig) -> list[MatrixMeta]:
    """Every streamed matrix in execution order.

    ffn1 stores in/gate rows interleaved (row 2j = in_j, 2j+1 = gate_j); ffn2 is
    stored transposed so row j holds column j of the logical d_model x d_inter matrix.
    """
    d = model.d_model
    wdt = "int4" if model.quant else model.dtype
    gs = model.quant.group_size if model.quant else 0
    if model.kind == "stacked_linear":
        return [MatrixMeta("linear", l, d, d, model.dtype) for l in range(model.layers)]
    out = []
    for l in range(model.layers):
        out += [
            MatrixMeta("qkv", l, model.qkv_rows, d, wdt, gs),
            MatrixMeta("aout", l, d, d, wdt, gs),
            MatrixMeta("ffn1", l, 2 * model.d_inter, d, wdt, gs),
            MatrixMeta("ffn2", l, model.d_inter, d, wdt, gs),
        ]
    out.append(MatrixMeta("lmhead", -1, model.vocab_size, d, model.dtype))
    return out


def streamed_weight_bytes(model: ModelConfig) -> int:
    return sum(m.nbytes for m in matrix_layout(model))


def decoder_weight_bytes(model: ModelConfig) -> int:
    return sum(m.nbytes for m in matrix_layout(model) if m.layer >= 0)


def total_parameter_bytes(model: ModelConfig) -> int:
    """Streamed matrices plus norms and the embedding table."""
    total = streamed_weight_bytes(model)
    if model.kind == "llama_decoder":
        total += (2 * model.layers + 1) * model.d_model * model.dtype_bytes
        total += model.vocab_size * model.d_model * model.dtype_bytes
    return total


def kv_bytes_per_position(model: ModelConfig) -> int:
    """Bytes of one cached key (or value) row for one kv head."""
    return model.d_head * model.dtype_bytes


def kv_cache_bytes(model: ModelConfig) -> int:
    if model.kind != "llama_decoder":
        return 0
    return 2 * model.layers * model.batch * model.n_kv_heads * model.max_seq_len * kv_bytes_per_position(model)


# ---------------------------------------------------------------- KV cache

@dataclass
class KVCache:
    k: np.ndarray  # (layers, batch, n_kv, max_seq, d_head)
    v: np.ndarray
    length: np.ndarray  # (layers,) tokens cached per layer

    @classmethod
    def empty(cls, model: ModelConfig) -> "KVCache":
        shape = (model.layers, model.batch, model.n_kv_heads, model.max_seq_len, model.d_head)
        return cls(np.zeros(shape, np.float32), np.zeros(shape, np.float32), np.zeros(model.layers, np.int64))

    @property
    def max_seq_len(self) -> int:
        return self.k.shape[3]

    def copy(self) -> "KVCache":
        return KVCache(self.k.copy(), self.v.copy(), self.length.copy())


def kv_append(cache: KVCache, layer: int, k: np.ndarray, v: np.ndarray) -> None:
    """Append the current token's keys/values (batch, n_kv, d_head) for one layer."""
    if not 0 <= layer < cache.length.size:
        raise IndexError(f"layer {layer} out of range")
    i = int(cache.length[layer])
    if i >= cache.max_seq_len:
        raise CapacityError(f"KV cache full: layer {layer} already holds max_seq_len={cache.max_seq_len} tokens")
    want = cache.k.shape[1:3] + cache.k.shape[4:]
    k = np.asarray(k, np.float32).reshape(want)
    v = np.asarray(v, np.float32).reshape(want)
    cache.k[layer, :, :, i] = k
    cache.v[layer, :, :, i] = v
    cache.length[layer] = i + 1


# ------------------------------------------------------------------- store

@dataclass
class TensorStore:
    model: ModelConfig
    weights: dict[str, np.ndarray]  # dense float32 values (dequantized when quantized)
    quantized: dict[str, QuantizedMatrix] = field(default_factory=dict)
    kv: Optional[KVCache] = None

    def __post_init__(self):
        if self.kv is None and self.model.kind == "llama_decoder":
            self.kv = KVCache.empty(self.model)

    def matrix(self, meta: MatrixMeta) -> np.ndarray:
        return self.weights[meta.name]

    def layout(self) -> list[MatrixMeta]:
        return matrix_layout(self.model)

    def weight_bytes(self) -> int:
        """Bytes of all streamed matrices in their storage format."""
        return sum(m.nbytes for m in self.layout())

    def input_vector(self, token: int) -> np.ndarray:
        """Residual stream entering layer 0, shape (batch, d_model)."""
        m = self.model
        if m.kind == "stacked_linear":
            return np.random.default_rng(token).standard_normal((m.batch, m.d_model)).astype(np.float32)
        row = self.weights["embedding"][token]
        return np.repeat(row[None, :], m.batch, axis=0)

    def copy(self) -> "TensorStore":
        return TensorStore(self.model, self.weights, self.quantized, self.kv.copy() if self.kv else None)


def _round_storage(a: np.ndarray, dtype: str) -> np.ndarray:
    return round_bf16(a) if dtype == "bf16" else a.astype(np.float32)


def init_weights(model: ModelConfig, seed: int, hw: Optional[HardwareConfig] = None) -> TensorStore:
    """Seeded weights scaled by 1/sqrt(fan_in); identical seeds give identical stores."""
    hw = hw or HardwareConfig()
    need = total_parameter_bytes(model) + kv_cache_bytes(model)
    if need > hw.hbm_capacity:
        raise CapacityError(f"model needs {need} B of HBM, capacity is {hw.hbm_capacity} B")
    rng = np.random.default_rng(seed)
    weights: dict[str, np.ndarray] = {}
    quantized: dict[str, QuantizedMatrix] = {}

    def normal(shape, fan_in):
        return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(np.float32)

    for meta in matrix_layout(model):
        fan_in = model.d_inter if meta.op == "ffn2" else meta.cols
        w = normal((meta.rows, meta.cols), fan_in)
        if meta.dtype == "int4":
            qm = QuantizedMatrix.from_dense(w, meta.group_size)
            quantized[meta.name] = qm
            weights[meta.name] = qm.dense()
        else:
            weights[meta.name] = _round_storage(w, meta.dtype)

    if model.kind == "llama_decoder":
        d = model.d_model
        for l in range(model.layers):
            for name in ("attn_norm", "ffn_norm"):
                weights[f"L{l}.{name}"] = _round_storage(1.0 + 0.1 * rng.standard_normal(d), model.dtype)
        weights["tail.final_norm"] = _round_storage(1.0 + 0.1 * rng.standard_normal(d), model.dtype)
        weights["embedding"] = _round_storage(rng.standard_normal((model.vocab_size, d)), model.dtype)
    return TensorStore(model, weights, quantized)


def fill_random_prefill(store: TensorStore, prefill: int, seed: int) -> None:
    """Populate the KV cache with ``prefill`` synthetic positions in every layer."""
    kv = store.kv
    if prefill > kv.max_seq_len:
        raise CapacityError(f"prefill {prefill} exceeds max_seq_len {kv.max_seq_len}")
    rng = np.random.default_rng(seed)
    shape = kv.k.shape[:3] + (prefill,) + kv.k.shape[4:]
    kv.k[:, :, :, :prefill] = rng.standard_normal(shape)
    kv.v[:, :, :, :prefill] = rng.standard_normal(shape)
    kv.length[:] = prefill


# ------------------------------------------------------------- container

MAGIC = b"WKSTORE\0"
VERSION = 1
_ALIGN = 64


def _tensor_items(store: TensorStore) -> Iterator[tuple[str, np.ndarray]]:
    for name, arr in store.weights.items():
        if name not in store.quantized:
            yield name, arr
    for name, qm in store.quantized.items():
        yield f"{name}#packed", qm.packed
        yield f"{name}#scales", qm.scales
        yield f"{name}#zeros", qm.zeros
    if store.kv is not None:
        yield "kv#k", store.kv.k
        yield "kv#v", store.kv.v
        yield "kv#length", store.kv.length


def save_store(store: TensorStore, path) -> None:
    """Flat binary container: magic, version, JSON header (config echo + records), data."""
    records, blobs, offset = [], [], 0
    for name, arr in _tensor_items(store):
        arr = np.ascontiguousarray(arr)
        records.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += -(-len(blobs[-1]) // _ALIGN) * _ALIGN
    model = asdict(store.model)
    header = json.dumps({"model": model, "records": records}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<II", VERSION, len(header)) + header)
        f.write(b"\0" * (-f.tell() % _ALIGN))
        base = f.tell()
        for rec, blob in zip(records, blobs):
            f.seek(base + rec["offset"])
            f.write(blob)


def load_store(path) -> TensorStore:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a weight container")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    header = json.loads(raw[16:16 + hlen])
    base = 16 + hlen
    base += -base % _ALIGN
    mdict = header["model"]
    if mdict.get("quant"):
        mdict["quant"] = QuantConfig(**mdict["quant"])
    try:
        model = ModelConfig(**mdict)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None

    arrays = {}
    for rec in header["records"]:
        dt = np.dtype(rec["dtype"])
        count = int(np.prod(rec["shape"], dtype=np.int64))
        arrays[rec["name"]] = np.frombuffer(raw, dt, count, base + rec["offset"]).reshape(rec["shape"]).copy()

    weights, quantized = {}, {}
    for name in list(arrays):
        if name.endswith("#packed"):
            key = name[: -len("#packed")]
            qm = QuantizedMatrix(arrays.pop(name), arrays.pop(f"{key}#scales"), arrays.pop(f"{key}#zeros"),
                                 model.quant.group_size)
            quantized[key] = qm
            weights[key] = qm.dense()
    kv = None
    if "kv#k" in arrays:
        kv = KVCache(arrays.pop("kv#k"), arrays.pop("kv#v"), arrays.pop("kv#length"))
    weights.update(arrays)
    return TensorStore(model, weights, quantized, kv)
