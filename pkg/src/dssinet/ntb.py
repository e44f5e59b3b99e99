"""Named-tensor binary ("NTB1") reader and writer.

Layout, all little-endian::

    b"NTB1" | u32 count | count x (u32 name_len | name utf-8 | u32 rank | rank x u32 dim | prod(dims) x f64)
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"NTB1"


def encode_ntb(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_ntb(buf: bytes, path=None) -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated payload reading {what}", pos, path)
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic", 0, path)
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        start = pos
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("name is not valid UTF-8", start, path) from None
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}", start, path)
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(8 * size, f"values of {name!r}"), dtype="<f8")
        out[name] = data.astype(np.float64).reshape(dims)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes", pos, path)
    return out


def write_ntb(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_ntb(tensors))


def read_ntb(path) -> dict[str, np.ndarray]:
    return decode_ntb(Path(path).read_bytes(), path)
