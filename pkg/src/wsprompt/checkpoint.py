"""MPCK checkpoint files: a small versioned little-endian tensor container.

Layout::

    b"MPCK"  u32 version
    u32 metadata length, UTF-8 JSON metadata (config_hash, seed, epoch, ...)
    u32 entry count
    per entry: u16 name length, UTF-8 name, u8 dtype tag, u8 rank, rank × u32 extents,
               prod(extents) little-endian float32 values
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MPCK"
VERSION = 1
DTYPE_F32 = 1


class CheckpointError(ValueError):
    """Malformed checkpoint; ``offset`` is the byte position where reading failed."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (at byte offset {offset})")


class CheckpointVersionError(CheckpointError):
    pass


class ConfigHashWarning(UserWarning):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    @property
    def config_hash(self) -> str | None:
        return self.meta.get("config_hash")

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def size(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))


def encode(tensors: dict[str, np.ndarray], meta: dict | None = None, version: int = VERSION) -> bytes:
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", version), struct.pack("<I", len(meta_blob)), meta_blob,
             struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if arr.dtype.kind != "f":
            raise CheckpointError(f"tensor {name!r} has non-float dtype {arr.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"tensor {name!r}: name or rank too large")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what}: need {n} bytes, "
                                  f"{len(self.data) - self.pos} left", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("not an MPCK checkpoint (bad magic)", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version} is not supported "
                                     f"(this reader supports version {VERSION})", 4)
    (meta_len,) = r.unpack("<I", "metadata length")
    at = r.pos
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt metadata block: {exc}", at) from exc
    (count,) = r.unpack("<I", "entry count")
    tensors = {}
    for i in range(count):
        start = r.pos
        (n,) = r.unpack("<H", f"entry {i} name length")
        try:
            name = r.take(n, f"entry {i} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"entry {i}: name is not UTF-8", start) from exc
        tag, rank = r.unpack("<BB", f"entry {name!r} header")
        if tag != DTYPE_F32:
            raise CheckpointError(f"entry {name!r}: unknown dtype tag {tag}", r.pos - 2)
        shape = r.unpack(f"<{rank}I", f"entry {name!r} extents")
        size = int(np.prod(shape, dtype=np.int64))
        payload = r.take(4 * size, f"entry {name!r} payload")
        if name in tensors:
            raise CheckpointError(f"duplicate entry {name!r}", start)
        tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after the last entry", r.pos)
    return Checkpoint(tensors, meta, version)


def save_checkpoint(tensors: dict[str, np.ndarray], path: str | os.PathLike, meta: dict | None = None) -> Path:
    """Write atomically: a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode(tensors, meta)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path: str | os.PathLike, expected_hash: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ckpt = decode(path.read_bytes())
    if expected_hash is not None and ckpt.config_hash != expected_hash:
        warnings.warn(f"checkpoint {path.name} was written under config hash {ckpt.config_hash}, "
                      f"current config hash is {expected_hash}", ConfigHashWarning, stacklevel=2)
    return ckpt
