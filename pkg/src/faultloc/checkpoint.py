"""Binary checkpoint container.

Layout (all integers little-endian)::

    offset  size        field
    0       8           magic  b"FLTCKPT\\0"
    8       4   u32     format version (currently 1)
    12      4   u32     N = length of the config record
    16      N           UTF-8 JSON, keys sorted, no whitespace:
                        {"alpha": [...], "config": {...}}
    ...     4   u32     tensor count
    then per tensor, in ascending name order:
            2   u16     name length, followed by the UTF-8 name
            1   u8      dtype tag (0 = float32, 1 = int8)
            1   u8      ndim
            4*ndim      u32 extents
            8   f64     quant_scale (present only for int8)
            8   u64     payload length in bytes
            ...         raw element bytes, row-major

Dropping the u64 payload length, the per-tensor bytes from the dtype tag
through the payload are exactly the preimage of
:func:`faultloc.tensor.digest_tensor`, so a tensor digest can be recomputed
from the file without decoding values.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

from .model import ModelConfig, ModelState
from .tensor import DTYPE_TAGS, INT8, WeightTensor, digest_preimage_header

MAGIC = b"FLTCKPT\0"
FORMAT_VERSION = 1
_TAG_DTYPE = {v: k for k, v in DTYPE_TAGS.items()}
_NP = {"float32": "<f4", "int8": "i1"}

PathLike = Union[str, os.PathLike]


class CheckpointError(ValueError):
    pass


def config_record(m: ModelState) -> bytes:
    rec = {"config": m.config.to_dict(), "alpha": list(m.alpha)}
    return json.dumps(rec, sort_keys=True, separators=(",", ":")).encode()


def dump_bytes(m: ModelState) -> bytes:
    buf = io.BytesIO()
    write_stream(m, buf)
    return buf.getvalue()


def write_stream(m: ModelState, f: BinaryIO) -> None:
    rec = config_record(m)
    f.write(MAGIC)
    f.write(struct.pack("<II", FORMAT_VERSION, len(rec)))
    f.write(rec)
    f.write(struct.pack("<I", len(m.tensors)))
    for name in m.names():
        t = m.tensors[name]
        raw = name.encode()
        f.write(struct.pack("<H", len(raw)))
        f.write(raw)
        f.write(digest_preimage_header(t))
        f.write(struct.pack("<Q", t.data.nbytes))
        f.write(t.data.tobytes())


def save(m: ModelState, path: PathLike) -> str:
    """Write atomically; returns the whole-file SHA-256 hex digest."""
    path = Path(path)
    data = dump_bytes(m)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def _read(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint")
    return b


def read_stream(f: BinaryIO) -> ModelState:
    if _read(f, 8) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, n = struct.unpack("<II", _read(f, 8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    rec = json.loads(_read(f, n).decode())
    config = ModelConfig(**rec["config"])
    (count,) = struct.unpack("<I", _read(f, 4))
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack("<H", _read(f, 2))
        name = _read(f, ln).decode()
        tag, ndim = struct.unpack("<BB", _read(f, 2))
        if tag not in _TAG_DTYPE:
            raise CheckpointError(f"{name}: unknown dtype tag {tag}")
        dtype = _TAG_DTYPE[tag]
        shape = struct.unpack(f"<{ndim}I", _read(f, 4 * ndim))
        scale = struct.unpack("<d", _read(f, 8))[0] if dtype == INT8 else None
        (nbytes,) = struct.unpack("<Q", _read(f, 8))
        data = np.frombuffer(_read(f, nbytes), dtype=_NP[dtype])
        tensors[name] = WeightTensor(name, shape, dtype, data, scale)
    if f.read(1):
        raise CheckpointError("trailing bytes after last tensor")
    return ModelState(config, tensors, tuple(rec["alpha"]))


def load(path: PathLike) -> ModelState:
    with open(path, "rb") as f:
        return read_stream(f)


def loads(data: bytes) -> ModelState:
    return read_stream(io.BytesIO(data))


def file_digest(path: PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def state_file_digest(m: ModelState) -> str:
    """Digest the checkpoint file for ``m`` would have, without writing it."""
    return hashlib.sha256(dump_bytes(m)).hexdigest()
