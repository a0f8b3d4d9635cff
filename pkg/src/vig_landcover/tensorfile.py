"""
Minimal bit-exact tensor container.

Layout (all integers little-endian)::

    b"VIGT"                      magic
    u32 version                  currently 1
    u32 count                    number of tensor records
    count x record:
        u32 name_len, name (UTF-8)
        u32 rank, rank x u64 dims
        u8 dtype code            1 = float32, 2 = float64, 3 = uint8
        raw little-endian data
"""
from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"VIGT"
VERSION = 1

DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1")}
_CODE_OF = {"f4": 1, "f8": 2, "u1": 3}


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODE_OF.get(arr.dtype.str[1:])
        if code is None:
            raise FormatError(f"unsupported dtype {arr.dtype}", tensor=name)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(struct.pack("<B", code))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes())
    return b"".join(parts)


def write_tensor_file(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write ``tensors`` (name -> array, insertion order kept) to ``path``."""
    payload = encode_tensors(tensors)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0
        self.tensor = None

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"truncated file: need {n} bytes for {what}, {len(self.buf) - self.pos} left",
                offset=self.pos, tensor=self.tensor,
            )
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_tensors(buf: bytes) -> dict:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    out = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I", "name length")
        start = r.pos
        try:
            name = r.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8", offset=start) from None
        r.tensor = name
        if name in out:
            raise FormatError("duplicate tensor name", offset=start, tensor=name)
        (rank,) = r.unpack("<I", "rank")
        dims = r.unpack(f"<{rank}Q", "dims") if rank else ()
        code_pos = r.pos
        (code,) = r.unpack("<B", "dtype code")
        if code not in DTYPE_CODES:
            raise FormatError(f"unknown dtype code {code}", offset=code_pos, tensor=name)
        dtype = DTYPE_CODES[code]
        nbytes = int(np.prod(dims, dtype=np.uint64)) * dtype.itemsize
        raw = r.take(nbytes, "tensor data")
        out[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
        r.tensor = None
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after last tensor", offset=r.pos)
    return out


def read_tensor_file(path) -> dict:
    """Read every tensor in ``path``; raises FormatError on any inconsistency."""
    with open(path, "rb") as fh:
        return decode_tensors(fh.read())
