"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes  b"MEMDRAIN"
    version    u32
    n_records  u32
    records    n_records x {
                   name_len u32, name utf-8,
                   dtype u8 (1=f4, 2=f8, 3=i8, 4=u1),
                   ndim u32, shape ndim x u64,
                   nbytes u64, raw data }
    crc32      u32 over every preceding byte

Files are written to a temporary sibling and renamed into place, so a crash
never leaves a partial checkpoint under the target name.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path
from typing import Dict

import numpy as np

from .errors import CheckpointError

MAGIC = b"MEMDRAIN"
VERSION = 1
META_KEY = "__meta__"

_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("u1")}
_TAGS = {v: k for k, v in _DTYPES.items()}


def _tag(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    for tag, d in _DTYPES.items():
        if d == dt or (d.kind == dt.kind and d.itemsize == dt.itemsize):
            return tag
    raise CheckpointError(f"unsupported dtype {arr.dtype}")


def encode(tensors: Dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    records = dict(tensors)
    if meta is not None:
        records[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    out = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for name in sorted(records):
        arr = np.asarray(records[name])
        tag = _tag(arr)
        data = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        nb = name.encode()
        out.append(struct.pack("<I", len(nb)) + nb)
        out.append(struct.pack("<BI", tag, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(struct.pack("<Q", len(data)) + data)
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(buf: bytes) -> tuple[Dict[str, np.ndarray], dict | None]:
    if len(buf) < len(MAGIC) + 12 or buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    version, n = struct.unpack_from("<II", buf, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version}, expected {VERSION}")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch (truncated or corrupted)")
    pos = len(MAGIC) + 8
    tensors: Dict[str, np.ndarray] = {}
    try:
        for _ in range(n):
            (ln,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + ln].decode()
            pos += ln
            tag, ndim = struct.unpack_from("<BI", body, pos)
            pos += 5
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            (nbytes,) = struct.unpack_from("<Q", body, pos)
            pos += 8
            if tag not in _DTYPES or pos + nbytes > len(body):
                raise CheckpointError(f"corrupt record {name!r}")
            tensors[name] = np.frombuffer(body[pos:pos + nbytes], dtype=_DTYPES[tag]).reshape(shape).copy()
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    if pos != len(body):
        raise CheckpointError("trailing bytes after last record")
    meta = None
    if META_KEY in tensors:
        meta = json.loads(tensors.pop(META_KEY).tobytes().decode())
    return tensors, meta


def save(path, tensors: Dict[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode(tensors, meta)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path) -> tuple[Dict[str, np.ndarray], dict | None]:
    with open(path, "rb") as f:
        return decode(f.read())
