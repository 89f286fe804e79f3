"""Versioned binary checkpoints.

Layout (little-endian)::

    b"DLAB" | u32 version | u32 tensor count
    per tensor: u16 name length | utf-8 name | u8 dtype | u8 rank | u32 dims... | payload

dtype 0 is float32 (parameters), dtype 1 is uint32 (metadata).  Metadata
tensors live under the ``meta.`` prefix and are written only on request, so a
plain checkpoint holds exactly the model's parameter tensors.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from dlab.model import LoraSpec, ModelConfig, TinyLmm, param_shapes

MAGIC = b"DLAB"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<u4")}
CODES = {np.dtype("<f4"): 0, np.dtype("<u4"): 1}


class FormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: TinyLmm
    step: int | None = None
    rng_state: dict | None = None


def pack_rng(state: dict) -> np.ndarray:
    """PCG64 state as ten u32 words."""
    if state.get("bit_generator") != "PCG64":
        raise ValueError("only PCG64 generator state can be stored")
    words = []
    for big in (state["state"]["state"], state["state"]["inc"]):
        words += [(big >> (32 * i)) & 0xFFFFFFFF for i in range(4)]
    words += [state["has_uint32"], state["uinteger"]]
    return np.asarray(words, dtype="<u4")


def unpack_rng(words: np.ndarray) -> dict:
    w = [int(x) for x in words]
    if len(w) != 10:
        raise FormatError("meta.rng must hold 10 words")
    big = lambda part: sum(v << (32 * i) for i, v in enumerate(part))
    return {"bit_generator": "PCG64", "state": {"state": big(w[0:4]), "inc": big(w[4:8])},
            "has_uint32": w[8], "uinteger": w[9]}


def model_tensors(model: TinyLmm) -> dict[str, np.ndarray]:
    """Named tensors for the model: canonical params first, then extras in insertion order."""
    out = {}
    for name in param_shapes(model.config):
        out[name] = model.params[name]
    for name, arr in model.params.items():
        if name not in out:
            out[name] = arr
    for name, spec in model.lora.items():
        out[name + ".lora_alpha"] = np.asarray([spec.alpha], dtype=np.float32)
    return out


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in CODES:
            raise ValueError(f"{name}: unsupported dtype {arr.dtype}")
        if arr.ndim > 3:
            raise ValueError(f"{name}: rank {arr.ndim} exceeds 3")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", CODES[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return buf.getvalue()


def decode(blob: bytes) -> dict[str, np.ndarray]:
    """Parse a whole file; any inconsistency raises FormatError and nothing is returned."""
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated checkpoint (need {n} bytes at offset {pos}, file has {len(view)})")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise FormatError("bad magic bytes; not a DLAB checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(n)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not valid utf-8") from exc
        code, rank = struct.unpack("<BB", take(2))
        if code not in DTYPES:
            raise FormatError(f"{name}: unknown dtype code {code}")
        if rank > 3:
            raise FormatError(f"{name}: rank {rank} exceeds 3")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        data = np.frombuffer(bytes(take(size)), dtype=dt).reshape(shape)
        if name in tensors:
            raise FormatError(f"duplicate tensor {name}")
        tensors[name] = data.astype(dt.newbyteorder("="))
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after the last tensor")
    return tensors


def save_checkpoint(model: TinyLmm, path, step: int | None = None, rng_state: dict | None = None,
                    with_config: bool = False) -> None:
    tensors = model_tensors(model)
    if with_config:
        tensors["meta.config"] = np.asarray(list(asdict(model.config).values()), dtype="<u4")
    if step is not None:
        tensors["meta.step"] = np.asarray([step], dtype="<u4")
    if rng_state is not None:
        tensors["meta.rng"] = pack_rng(rng_state)
    blob = encode(tensors)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def infer_config(tensors: dict[str, np.ndarray], n_heads: int | None = None) -> ModelConfig:
    """Shapes fix every dimension except the head split; default head width 8."""
    try:
        d_v = tensors["perception.w"].shape[0]
        vocab, d = tensors["embed.w"].shape
        L = sum(1 for n in tensors if n.startswith("block") and n.endswith(".wq") and ".moe." not in n)
        d_attn = tensors["block0.wq"].shape[1] if L else d
        hidden = tensors["block0.wgate"].shape[1] if L else 4 * d
    except KeyError as exc:
        raise FormatError(f"checkpoint lacks {exc.args[0]}") from exc
    if n_heads is None:
        n_heads = max(d_attn // 8, 1)
    if d_attn % n_heads:
        raise FormatError(f"attention width {d_attn} not divisible by {n_heads} heads")
    return ModelConfig(L, d, n_heads, d_attn // n_heads, hidden, vocab, ModelConfig.n_visual, d_v)


def load_checkpoint(path, config: ModelConfig | None = None) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"checkpoint {path} does not exist") from exc
    tensors = decode(blob)
    meta = {n: tensors.pop(n) for n in list(tensors) if n.startswith("meta.")}
    if config is None:
        if "meta.config" in meta:
            names = [f.name for f in fields(ModelConfig)]
            config = ModelConfig(**{k: int(v) for k, v in zip(names, meta["meta.config"])})
        else:
            config = infer_config(tensors)
    for name, shape in param_shapes(config).items():
        if name not in tensors:
            raise FormatError(f"checkpoint lacks {name}")
        if tensors[name].shape != shape or tensors[name].dtype != np.float32:
            raise FormatError(f"{name}: expected float32 {shape}, got {tensors[name].dtype} {tensors[name].shape}")
    lora = {}
    for name in [n for n in tensors if n.endswith(".lora_alpha")]:
        target = name[: -len(".lora_alpha")]
        alpha = float(tensors.pop(name)[0])
        if target + ".lora_a" not in tensors or target + ".lora_b" not in tensors:
            raise FormatError(f"adapter for {target} is incomplete")
        lora[target] = LoraSpec(tensors[target + ".lora_a"].shape[0], alpha)
    model = TinyLmm(config, tensors, lora)
    step = int(meta["meta.step"][0]) if "meta.step" in meta else None
    rng = unpack_rng(meta["meta.rng"]) if "meta.rng" in meta else None
    return Checkpoint(model, step, rng)
