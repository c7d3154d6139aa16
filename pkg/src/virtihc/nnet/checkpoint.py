"""Binary weight checkpoints.

Layout (all integers little-endian)::

    magic     8 bytes  b"VIHCWTS\\0"
    version   uint32   (currently 1)
    count     uint32   number of tensors
    manifest  count x { name_len uint16, name utf-8, ndim uint8, dims uint32[ndim] }
    payload   float32 little-endian values of every tensor, manifest order, C order
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import DimensionError, ParseError

MAGIC = b"VIHCWTS\0"
VERSION = 1


def encode(tensors: list[tuple[str, np.ndarray]]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
    for _, arr in tensors:
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(blob: bytes, source: str = "<bytes>") -> list[tuple[str, np.ndarray]]:
    if blob[:8] != MAGIC:
        raise ParseError(f"{source}: not a weight checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", blob, 8)
        if version != VERSION:
            raise ParseError(f"{source}: unsupported checkpoint version {version}")
        pos = 16
        manifest = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            manifest.append((name, shape))
        out = []
        for name, shape in manifest:
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(blob):
                raise ParseError(f"{source}: truncated payload for {name}")
            arr = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            out.append((name, arr.astype(np.float32)))
    except (struct.error, UnicodeDecodeError) as exc:
        raise ParseError(f"{source}: corrupt checkpoint ({exc})") from exc
    if pos != len(blob):
        raise ParseError(f"{source}: {len(blob) - pos} trailing bytes")
    return out


def save(path, tensors: list[tuple[str, np.ndarray]]) -> None:
    Path(path).write_bytes(encode(tensors))


def load(path) -> list[tuple[str, np.ndarray]]:
    path = Path(path)
    return decode(path.read_bytes(), str(path))


def assign(targets: list[tuple[str, np.ndarray]], loaded: list[tuple[str, np.ndarray]], source: str = "") -> None:
    """Copy loaded tensors into ``targets`` in place after checking names and shapes."""
    if [n for n, _ in targets] != [n for n, _ in loaded]:
        raise DimensionError(f"{source}: checkpoint manifest does not match the architecture")
    for (name, dst), (_, src) in zip(targets, loaded):
        if dst.shape != src.shape:
            raise DimensionError(f"{source}: {name} has shape {src.shape}, architecture expects {dst.shape}")
    for (_, dst), (_, src) in zip(targets, loaded):
        dst[...] = src
