"""Binary checkpoint container for named tensors.

Layout (all integers little-endian)::

    b"FCDD"  u32 version  u32 count
    count x { u32 name_len, name (UTF-8), u32 rank, rank x u64 extent,
              u8 dtype (0 = f32, 1 = f64), raw values }
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

from ..errors import LoadError

MAGIC = b"FCDD"
VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_TAGS:
            arr = arr.astype(np.float64)
        tag = _DTYPE_TAGS[arr.dtype]
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(struct.pack("<B", tag))
        buf.write(np.ascontiguousarray(arr, dtype=_TAG_DTYPES[tag]).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> Dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise LoadError("checkpoint truncated")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise LoadError("not an FCDD checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise LoadError(f"unsupported checkpoint version {version}")
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise LoadError("checkpoint tensor name is not valid UTF-8") from exc
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        (tag,) = struct.unpack("<B", take(1))
        if tag not in _TAG_DTYPES:
            raise LoadError(f"unknown dtype tag {tag} for tensor {name!r}")
        dtype = _TAG_DTYPES[tag]
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(bytes(take(n * dtype.itemsize)), dtype=dtype).reshape(shape)
        out[name] = arr.astype(dtype.newbyteorder("="))
    if pos != len(view):
        raise LoadError("trailing bytes after last checkpoint tensor")
    return out


def save(path: Union[str, Path], tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(blob)
