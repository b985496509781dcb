"""Binary checkpoint format shared by target and draft models.

Layout (little-endian)::

    b"BGLE" | u32 version | u8 role | u32 d, H, L_t, T_max, |V|
    | u32 meta_len | meta (UTF-8 JSON)
    | u32 n_tensors | per tensor: u32 name_len, name, u32 ndim, u32 dims..., f32 data
    | u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"BGLE"
VERSION = 1
ROLE_TARGET = 0
ROLE_DRAFT = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    role: int
    config: tuple[int, int, int, int, int]  # d, H, L_t, T_max, |V|
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def dumps(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<IB", VERSION, ckpt.role), struct.pack("<5I", *ckpt.config)]
    meta = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<I", len(meta)), meta, struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        raw_name = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw_name)), raw_name,
                  struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape), arr.tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def loads(raw: bytes) -> Checkpoint:
    if len(raw) < 4 + 5 + 20 + 8 or raw[:4] != MAGIC:
        raise CheckpointError("not a BGLE checkpoint")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    version, role = struct.unpack_from("<IB", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 9
    config = struct.unpack_from("<5I", body, pos)
    pos += 20
    (meta_len,) = struct.unpack_from("<I", body, pos)
    pos += 4
    meta = json.loads(body[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        name = body[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", body, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return Checkpoint(role, tuple(config), tensors, meta)


def save(path, ckpt: Checkpoint) -> bytes:
    raw = dumps(ckpt)
    with open(path, "wb") as fh:
        fh.write(raw)
    return raw


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return loads(fh.read())
