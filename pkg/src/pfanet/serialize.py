"""PFAT named-tensor container.

Layout (all integers little-endian u32)::

    b"PFAT" | version | count | count x record
    record = name_len | utf-8 name | rank | dims[rank] | dtype tag | raw data

dtype tag 0 is float32, 1 is float64. Data is row-major little-endian.
"""
from __future__ import annotations

import os
import struct
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"PFAT"
VERSION = 1
_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    pass


def _u32(f: BinaryIO) -> int:
    raw = f.read(4)
    if len(raw) != 4:
        raise FormatError("unexpected end of file")
    return struct.unpack("<I", raw)[0]


def dump(tensors: Mapping[str, np.ndarray], f: BinaryIO) -> None:
    f.write(MAGIC)
    f.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _TAGS:
            raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        f.write(struct.pack("<I", len(encoded)))
        f.write(encoded)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(struct.pack("<I", _TAGS[dt]))
        f.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def load(f: BinaryIO) -> dict[str, np.ndarray]:
    if f.read(4) != MAGIC:
        raise FormatError("not a PFAT file (bad magic)")
    version = _u32(f)
    if version != VERSION:
        raise FormatError(f"unsupported PFAT version {version}")
    out = {}
    for _ in range(_u32(f)):
        name = f.read(_u32(f)).decode("utf-8")
        rank = _u32(f)
        shape = tuple(_u32(f) for _ in range(rank))
        tag = _u32(f)
        if tag not in _DTYPES:
            raise FormatError(f"{name}: unknown dtype tag {tag}")
        dt = _DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        raw = f.read(nbytes)
        if len(raw) != nbytes:
            raise FormatError(f"{name}: truncated data")
        out[name] = np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    return out


def save_file(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        dump(tensors, f)
    os.replace(tmp, path)


def load_file(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return load(f)
