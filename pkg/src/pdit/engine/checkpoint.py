"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"PDIT"  u32 version
    repeated until EOF:
        u32 name_len, name (UTF-8)
        u32 rank, rank x u64 extents
        u8  element width (4 or 8)
        payload: prod(extents) little-endian floats
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"PDIT"
VERSION = 1
_WIDTH_DTYPE = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def encode_checkpoint(params: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name in params:
        arr = np.asarray(getattr(params[name], "data", params[name]))
        width = arr.dtype.itemsize
        if arr.dtype.kind != "f" or width not in _WIDTH_DTYPE:
            raise CheckpointError(f"parameter {name!r} has unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(struct.pack("<B", width))
        chunks.append(np.ascontiguousarray(arr, dtype=_WIDTH_DTYPE[width]).tobytes())
    return b"".join(chunks)


def decode_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a PDIT checkpoint (bad magic)")
    if len(blob) < 8:
        raise CheckpointError("truncated checkpoint header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    while pos < len(blob):
        (n,) = take("<I")
        if pos + n > len(blob):
            raise CheckpointError("truncated checkpoint")
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = take("<I")
        shape = take(f"<{rank}Q") if rank else ()
        (width,) = take("<B")
        if width not in _WIDTH_DTYPE:
            raise CheckpointError(f"bad element width {width} for {name!r}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * width
        if pos + nbytes > len(blob):
            raise CheckpointError(f"truncated payload for {name!r}")
        arr = np.frombuffer(blob, dtype=_WIDTH_DTYPE[width], count=nbytes // width, offset=pos)
        pos += nbytes
        out[name] = arr.reshape(shape).astype(_WIDTH_DTYPE[width].newbyteorder("="))
    return out


def save_checkpoint(params: Mapping[str, np.ndarray], path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(params))


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
