"""Binary checkpoint container.

Layout (all integers little-endian):

    magic b"NLCK" | u32 version | u64 seed | u32 meta_len | meta (UTF-8 JSON)
    u32 n_entries | entries...

    entry: u16 name_len | name (UTF-8) | u8 ndim | u32 dims... | f32 values...

Values are raw little-endian float32 in row-major order, so files are
byte-stable across platforms. The JSON meta block carries the embedded
architecture record for self-describing model checkpoints.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import ParameterSet

MAGIC = b"NLCK"
VERSION = 1


def save_checkpoint(path, params: ParameterSet, meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<IQ", VERSION, params.seed & 0xFFFFFFFFFFFFFFFF)]
    chunks.append(struct.pack("<I", len(meta_bytes)))
    chunks.append(meta_bytes)
    chunks.append(struct.pack("<I", len(params)))
    for name, t in params.items():
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        dims = t.data.shape
        chunks.append(struct.pack("<B", len(dims)))
        chunks.append(struct.pack(f"<{len(dims)}I", *dims))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[int, dict, dict[str, np.ndarray]]:
    """Returns (seed, meta, ordered name -> float32 array)."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    off = 4
    version, seed = struct.unpack_from("<IQ", buf, off)
    off += 12
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", buf, off)
    off += 4
    meta = json.loads(buf[off : off + meta_len].decode("utf-8"))
    off += meta_len
    (n_entries,) = struct.unpack_from("<I", buf, off)
    off += 4
    entries: dict[str, np.ndarray] = {}
    for _ in range(n_entries):
        (name_len,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        count = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims)
        off += 4 * count
        entries[name] = arr.astype(np.float32)
    return seed, meta, entries
