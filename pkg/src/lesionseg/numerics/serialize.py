"""LSEG1 weight container.

Layout (all integers little-endian)::

    b"LSEG1"
    repeated until EOF:
        uint32  name length in bytes
        bytes   UTF-8 name
        uint32  rank
        int64   dims[rank]
        float32 values[prod(dims)]
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"LSEG1"


class WeightFormatError(ValueError):
    """Raised for malformed or truncated LSEG1 files."""


def dump_weights(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def parse_weights(buf: bytes) -> dict[str, np.ndarray]:
    if buf[: len(MAGIC)] != MAGIC:
        raise WeightFormatError("missing LSEG1 magic header")
    out: dict[str, np.ndarray] = {}
    pos = len(MAGIC)

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise WeightFormatError(f"truncated file while reading {what} at byte {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}q", take(8 * rank, f"dims of {name}"))
        if any(d < 0 for d in dims):
            raise WeightFormatError(f"negative dimension in {name}: {dims}")
        count = int(np.prod(dims, dtype=np.int64))
        values = np.frombuffer(take(4 * count, f"values of {name}"), dtype="<f4")
        if name in out:
            raise WeightFormatError(f"duplicate record {name}")
        out[name] = values.astype(np.float32).reshape(dims)
    return out


def save_weights_file(arrays: Mapping[str, np.ndarray], path) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(dump_weights(arrays))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_weights_file(path) -> dict[str, np.ndarray]:
    return parse_weights(Path(path).read_bytes())
