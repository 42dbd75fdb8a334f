"""Versioned little-endian container of named tensors plus a JSON header.

Layout::

    magic "BLORACKP" | u32 version | u32 len + schema tag | u32 len + JSON metadata
    u32 count | count x (u32 len + name | u8 dtype | u32 ndim | ndim x u64 dim | raw data)
    u32 crc32 of everything before it
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from typing import Dict, Tuple

import numpy as np
import torch

MAGIC = b"BLORACKP"
VERSION = 1
SCHEMA = "bayeslora.toymodel"
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8"), 2: np.dtype("?"), 3: np.dtype("<f4")}
_CODES = {np.dtype("float64"): 0, np.dtype("int64"): 1, np.dtype("bool"): 2, np.dtype("float32"): 3}


class CheckpointError(ValueError):
    pass


def _blob(s: bytes) -> bytes:
    return struct.pack("<I", len(s)) + s


def encode(tensors: Dict[str, torch.Tensor], metadata: dict, schema: str = SCHEMA) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), _blob(schema.encode()),
             _blob(json.dumps(metadata, sort_keys=True).encode()), struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous().numpy()
        if arr.dtype not in _CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        code = _CODES[arr.dtype]
        parts += [_blob(name.encode()), struct.pack("<BI", code, arr.ndim),
                  struct.pack(f"<{arr.ndim}Q", *arr.shape), arr.astype(_DTYPES[code], copy=False).tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(data: bytes, schema: str = SCHEMA) -> Tuple[Dict[str, torch.Tensor], dict]:
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, body, pos)
        pos += struct.calcsize(fmt)
        return vals

    def blob() -> bytes:
        nonlocal pos
        (n,) = take("<I")
        out = body[pos : pos + n]
        pos += n
        return out

    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tag = blob().decode()
    if tag != schema:
        raise CheckpointError(f"schema {tag!r} does not match {schema!r}")
    meta = json.loads(blob().decode())
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        name = blob().decode()
        code, ndim = take("<BI")
        shape = take(f"<{ndim}Q") if ndim else ()
        dt = _DTYPES[code]
        n = int(np.prod(shape)) * dt.itemsize
        arr = np.frombuffer(body, dtype=dt, count=int(np.prod(shape)), offset=pos).reshape(shape)
        pos += n
        tensors[name] = torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=True))
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return tensors, meta


def atomic_write(path: str, data, mode: str = "wb") -> None:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: str, model, metadata: dict) -> None:
    atomic_write(path, encode(dict(model.state_dict()), metadata))


def load_checkpoint(path: str) -> Tuple[Dict[str, torch.Tensor], dict]:
    with open(path, "rb") as fh:
        return decode(fh.read())
