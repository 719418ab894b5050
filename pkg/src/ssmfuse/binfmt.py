"""Little-endian binary container shared by datasets and checkpoints.

Layout::

    magic (4 bytes) | version u32 | hash length u32 | hash (ascii) | count u32
    then per entry:
    name length u32 | name (utf-8) | dtype u8 | ndim u32 | dims u64 * ndim | payload

dtype 0 is float64 and 1 is int64, both little-endian.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import SchemaError

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}


def _code(arr: np.ndarray) -> int:
    if arr.dtype.kind == "f":
        return 0
    if arr.dtype.kind in "iub":
        return 1
    raise SchemaError(f"unsupported dtype {arr.dtype}")


def pack(magic: bytes, version: int, config_hash: str, arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    h = config_hash.encode("ascii")
    buf.write(magic)
    buf.write(struct.pack("<II", version, len(h)))
    buf.write(h)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _code(arr)
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BI", code, data.ndim))
        buf.write(struct.pack(f"<{data.ndim}Q", *data.shape))
        buf.write(data.tobytes())
    return buf.getvalue()


def unpack(blob: bytes, magic: bytes) -> tuple[int, str, dict[str, np.ndarray]]:
    """Inverse of :func:`pack`; returns (version, config_hash, arrays)."""
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise SchemaError("truncated file")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != magic:
        raise SchemaError(f"bad magic bytes, expected {magic!r}")
    version, hlen = struct.unpack("<II", take(8))
    config_hash = bytes(take(hlen)).decode("ascii")
    (count,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        code, ndim = struct.unpack("<BI", take(5))
        if code not in _DTYPES:
            raise SchemaError(f"entry {name!r}: unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dtype = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arrays[name] = np.frombuffer(take(n * dtype.itemsize), dtype=dtype).reshape(shape).copy()
    if pos != len(view):
        raise SchemaError("trailing bytes after last entry")
    return version, config_hash, arrays


def write(path: str | Path, blob: bytes) -> None:
    Path(path).write_bytes(blob)


def read(path: str | Path) -> bytes:
    return Path(path).read_bytes()
