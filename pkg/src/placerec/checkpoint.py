"""Checkpoint container: one JSON manifest plus named, shape-tagged tensors.

Layout (all little-endian):

    magic   4 bytes  b"CGCK"
    version u16      currently 1
    mlen    u32      manifest byte length
    manifest: mlen bytes of UTF-8 JSON
    count   u32      number of tensors
    per tensor:
        nlen  u16, name bytes
        code  u8    0 = float32, 1 = int64
        ndim  u8
        dims  ndim * u64
        data  raw array bytes, C order

Floating tensors are stored as float32; training runs in float32 so a
save/load round trip is bitwise exact and a resumed run reproduces the
uninterrupted one.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .errors import ShapeError

_MAGIC = b"CGCK"
_VERSION = 1
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<i8")}


def _code_for(arr: np.ndarray) -> Tuple[int, np.ndarray]:
    if np.issubdtype(arr.dtype, np.floating):
        code, dt = 0, "<f4"
    elif np.issubdtype(arr.dtype, np.integer):
        code, dt = 1, "<i8"
    else:
        raise ShapeError(f"cannot store tensor of dtype {arr.dtype}")
    out = np.asarray(arr, dtype=dt)
    if out.ndim and not out.flags["C_CONTIGUOUS"]:
        out = np.ascontiguousarray(out)   # keeps 0-d arrays 0-d
    return code, out


def save_checkpoint(path, manifest: dict, tensors: Dict[str, np.ndarray]) -> None:
    path = Path(path)
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    parts = [_MAGIC, struct.pack("<HI", _VERSION, len(mbytes)), mbytes,
             struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        code, arr = _code_for(np.asarray(tensors[name]))
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ShapeError(f"{path}: not a checkpoint file")
    version, mlen = struct.unpack_from("<HI", raw, 4)
    if version != _VERSION:
        raise ShapeError(f"{path}: unsupported checkpoint version {version}")
    off = 10
    manifest = json.loads(raw[off:off + mlen].decode("utf-8"))
    off += mlen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        code, ndim = struct.unpack_from("<BB", raw, off)
        off += 2
        if code not in _CODES:
            raise ShapeError(f"{path}: unknown tensor dtype code {code}")
        shape = struct.unpack_from(f"<{ndim}Q", raw, off)
        off += 8 * ndim
        dt = _CODES[code]
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(raw, dtype=dt, count=n, offset=off).reshape(shape)
        off += n * dt.itemsize
        tensors[name] = arr.copy()
    if off != len(raw):
        raise ShapeError(f"{path}: {len(raw) - off} trailing bytes")
    return manifest, tensors
