"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"SLMK" | u32 version | u64 meta_len | meta (UTF-8 JSON, sorted keys)
    u32 count | count x [u32 name_len | name | u32 ndim | u64 dims... |
                         u64 payload_len | float64 payload]
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CheckpointVersionError, CorruptCheckpointError, ShapeMismatchError

MAGIC = b"SLMK"
VERSION = 1


@dataclass
class Checkpoint:
    arrays: dict
    stage: str = ""
    step: int = 0
    rng_state: Optional[dict] = None
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def params(self, prefix: str = "") -> dict:
        return {k: v for k, v in self.arrays.items() if not k.startswith("__") and k.startswith(prefix)}

    def to_bytes(self) -> bytes:
        meta = {"stage": self.stage, "step": self.step, "rng_state": self.rng_state,
                "config": self.config, "meta": self.meta}
        meta_blob = json.dumps(meta, sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<IQ", VERSION, len(meta_blob)))
        buf.write(meta_blob)
        buf.write(struct.pack("<I", len(self.arrays)))
        for name, arr in self.arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            encoded = name.encode()
            buf.write(struct.pack("<II", len(encoded), arr.ndim))
            buf.write(encoded)
            buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            payload = arr.tobytes()
            buf.write(struct.pack("<Q", len(payload)))
            buf.write(payload)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        reader = _Reader(blob)
        if reader.take(4) != MAGIC:
            raise CorruptCheckpointError("bad magic; not a checkpoint file")
        version, meta_len = reader.unpack("<IQ")
        if version != VERSION:
            raise CheckpointVersionError(f"checkpoint version {version}, expected {VERSION}")
        try:
            meta = json.loads(reader.take(meta_len).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorruptCheckpointError(f"unreadable header: {exc}") from exc
        (count,) = reader.unpack("<I")
        arrays = {}
        for _ in range(count):
            name_len, ndim = reader.unpack("<II")
            try:
                name = reader.take(name_len).decode()
            except UnicodeDecodeError as exc:
                raise CorruptCheckpointError(f"unreadable tensor name: {exc}") from exc
            shape = reader.unpack(f"<{ndim}Q")
            (payload_len,) = reader.unpack("<Q")
            expected = 8 * int(np.prod(shape, dtype=np.int64))
            if payload_len != expected:
                raise ShapeMismatchError(f"{name}: payload of {payload_len} bytes for shape {tuple(shape)}")
            arrays[name] = np.frombuffer(reader.take(payload_len), dtype="<f8").reshape(shape).astype(np.float64)
        if not reader.exhausted:
            raise CorruptCheckpointError("trailing bytes after the last entry")
        return cls(arrays, meta.get("stage", ""), meta.get("step", 0), meta.get("rng_state"),
                   meta.get("config", {}), meta.get("meta", {}))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CorruptCheckpointError("truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def exhausted(self) -> bool:
        return self.pos == len(self.blob)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


def load_into(params: dict, arrays: dict, strict: bool = True) -> None:
    """Copy arrays into same-named parameters, preserving parameter dtype."""
    missing = [n for n in params if n not in arrays]
    if strict and missing:
        raise ShapeMismatchError(f"checkpoint lacks parameters: {missing[:5]}")
    for name, p in params.items():
        if name not in arrays:
            continue
        arr = arrays[name]
        if arr.shape != p.shape:
            raise ShapeMismatchError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)
