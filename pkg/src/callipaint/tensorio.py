"""Binary tensor container used by checkpoints.

Layout (all integers little-endian):

    magic "CPKT" | version u32 | metadata length u32 | metadata (UTF-8 JSON)
    | tensor count u32 | per tensor:
        name length u32 | name (UTF-8) | rank u8 | dims u64 each
        | dtype tag u8 (0 = f32 LE) | raw data

Round-trips are bit-exact; unknown versions and truncated files are rejected.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

__all__ = ["write_tensor_file", "read_tensor_file", "CheckpointFormatError", "FORMAT_VERSION"]

MAGIC = b"CPKT"
FORMAT_VERSION = 1
_DTYPE_F32 = 0


class CheckpointFormatError(Exception):
    """Corrupt, truncated, or unsupported checkpoint file."""


def write_tensor_file(path: str | Path, metadata: dict, tensors: dict[str, np.ndarray]) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", FORMAT_VERSION)
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(meta))
    blob += meta
    blob += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            blob += struct.pack("<Q", d)
        blob += struct.pack("<B", _DTYPE_F32)
        blob += arr.tobytes()
    Path(path).write_bytes(bytes(blob))


def read_tensor_file(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointFormatError(f"truncated file {path} (need {n} bytes at {pos})")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointFormatError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<I", take(4))
    metadata = json.loads(bytes(take(meta_len)).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = [struct.unpack("<Q", take(8))[0] for _ in range(rank)]
        (tag,) = struct.unpack("<B", take(1))
        if tag != _DTYPE_F32:
            raise CheckpointFormatError(f"unknown dtype tag {tag} for tensor {name}")
        numel = 1
        for d in dims:
            numel *= d
        raw = take(numel * 4)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    if pos != len(view):
        raise CheckpointFormatError(f"{path} has {len(view) - pos} trailing bytes")
    return metadata, tensors
