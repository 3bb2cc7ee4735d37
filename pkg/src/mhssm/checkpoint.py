"""Binary checkpoint container with bit-exact round-tripping.

Layout (all integers little-endian):

    magic   8 bytes   b"MHSSMCK1"
    version u32       currently 1
    mlen    u64       length of the UTF-8 JSON metadata blob
    meta    mlen bytes
    count   u32       number of array entries
    entries           name_len:u16, name:utf8, dtype_len:u8, dtype:ascii,
                      ndim:u8, dims:u64*ndim, offset:u64 (into data section)
    data              raw little-endian array bytes, in entry order

Array bytes are written verbatim from little-endian buffers, so a load
followed by a save reproduces the file exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MHSSMCK1"
VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None):
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    entries = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append((name, le.dtype.str, arr.shape, offset))
        blobs.append(raw)
        offset += len(raw)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(entries)))
        for name, dtype_str, shape, off in entries:
            name_b = name.encode("utf-8")
            dtype_b = dtype_str.encode("ascii")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", len(dtype_b)))
            fh.write(dtype_b)
            fh.write(struct.pack("<B", len(shape)))
            for dim in shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(struct.pack("<Q", off))
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    pos = 8
    (version,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (mlen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    meta = json.loads(blob[pos:pos + mlen].decode("utf-8"))
    pos += mlen
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (dtype_len,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        dtype_str = blob[pos:pos + dtype_len].decode("ascii")
        pos += dtype_len
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos) if ndim else ()
        pos += 8 * ndim
        (offset,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        entries.append((name, np.dtype(dtype_str), tuple(int(s) for s in shape), offset))
    data_start = pos
    arrays = {}
    for name, dtype, shape, offset in entries:
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
        start = data_start + offset
        arr = np.frombuffer(blob[start:start + nbytes], dtype=dtype).reshape(shape)
        arrays[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    return arrays, meta
