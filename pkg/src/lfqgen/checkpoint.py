"""Binary checkpoint format.

Layout (little-endian)::

    b"LFQG" | u32 version | u64 config length | config text (UTF-8)
    | u32 record count
    | records: u32 name length | name | u8 dtype tag | u8 rank | u64 dims[rank] | payload

Records are written in sorted name order so that identical state always
produces identical bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .data import atomic_write

MAGIC = b"LFQG"
VERSION = 1

_DTYPE_TAGS = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
    np.dtype("<i4"): 3,
    np.dtype("u1"): 4,
}
_TAG_DTYPES = {tag: dt for dt, tag in _DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    """Corrupt, truncated or incompatible checkpoint."""


def encode_checkpoint(config_text: str, records: dict[str, np.ndarray]) -> bytes:
    blob = config_text.encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(blob)), blob, struct.pack("<I", len(records))]
    for name in sorted(records):
        arr = np.asarray(records[name])
        dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
        if dt not in _DTYPE_TAGS:
            raise CheckpointError(f"record {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", _DTYPE_TAGS[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, payload: bytes):
        self.buf = memoryview(payload)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint: needed {n} bytes at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n].tobytes()
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(payload: bytes) -> tuple[str, dict[str, np.ndarray]]:
    r = _Reader(payload)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, blob_len = r.unpack("<IQ")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})")
    try:
        config_text = r.take(blob_len).decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError("config text is not valid UTF-8") from None
    (count,) = r.unpack("<I")
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8", errors="strict")
        tag, rank = r.unpack("<BB")
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"record {name!r}: unknown dtype tag {tag}")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        dt = _TAG_DTYPES[tag]
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(dims).copy()
        records[name] = arr
    if r.pos != len(r.buf):
        raise CheckpointError(f"{len(r.buf) - r.pos} trailing bytes after last record")
    return config_text, records


def save_checkpoint(path, config_text: str, records: dict[str, np.ndarray]) -> None:
    atomic_write(path, encode_checkpoint(config_text, records))


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    return decode_checkpoint(Path(path).read_bytes())
