"""Binary tensor container used for checkpoints and critic weights.

Layout (all integers little-endian)::

    b"FILM" | version u32 | entry count u64
    per entry: name length u16 | UTF-8 name | dtype code u8 | rank u8
               | extents u64 * rank | raw little-endian values

Entries are written sorted by name, so equal contents give equal bytes.
"""

from __future__ import annotations

import io
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"FILM"
VERSION = 1

_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("u1"): 2,
    np.dtype("<i8"): 3,
}
_DTYPES = {v: k for k, v in _CODES.items()}


class CorruptCheckpointError(ValueError):
    pass


def dumps(entries: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", VERSION, len(entries)))
    for name in sorted(entries):
        arr = np.asarray(entries[name])
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in _CODES:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"entry name too long: {name[:40]}...")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", _CODES[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt.newbyteorder("<")).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CorruptCheckpointError("truncated container")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CorruptCheckpointError("bad magic; not a checkpoint container")
    version, count = struct.unpack("<IQ", take(12))
    if version != VERSION:
        raise CorruptCheckpointError(f"unsupported container version {version}")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(n)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptCheckpointError("entry name is not UTF-8") from exc
        code, rank = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CorruptCheckpointError(f"{name}: unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(take(nbytes), dtype=dt).reshape(shape).copy()
        if name in entries:
            raise CorruptCheckpointError(f"duplicate entry {name}")
        entries[name] = arr
    if pos != len(view):
        raise CorruptCheckpointError(f"{len(view) - pos} trailing bytes after last entry")
    return entries


def save_container(path, entries: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(entries))
    os.replace(tmp, path)


def load_container(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def text_entry(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def entry_text(arr: np.ndarray) -> str:
    return arr.astype(np.uint8).tobytes().decode("utf-8")
