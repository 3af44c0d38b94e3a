"""Raster images, dataset manifests, token files and synthetic textures.

Raster file (little-endian)::

    b"LFQI" | u32 version=1 | u32 width | u32 height | u32 channels | u8 pixels (row-major, channel-last)

Token file (little-endian)::

    b"LFQT" | u32 version=1 | u32 bits | u32 rows | u32 cols | u32 count | u32 indices[count*rows*cols]

A manifest is a text file of ``relative/path<TAB>class_id`` lines.
"""

from __future__ import annotations

import os
import queue
import struct
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

RASTER_MAGIC = b"LFQI"
TOKEN_MAGIC = b"LFQT"
FORMAT_VERSION = 1


class DataError(ValueError):
    """Malformed, missing or mismatched data file; ``path`` names the culprit."""

    def __init__(self, path, message: str):
        self.path = str(path)
        super().__init__(f"{path}: {message}")


def atomic_write(path, payload: bytes) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- pixels ------------------------------------------------------------------------

def to_unit_range(pixels: np.ndarray) -> np.ndarray:
    """u8 [0, 255] -> float [-1, 1]."""
    return pixels.astype(np.float64) / 127.5 - 1.0


def to_uint8(images: np.ndarray) -> np.ndarray:
    """float [-1, 1] -> u8 with rounding and clipping."""
    return np.clip(np.round((np.asarray(images) + 1.0) * 127.5), 0, 255).astype(np.uint8)


# -- raster files ------------------------------------------------------------------

def encode_raster(pixels: np.ndarray) -> bytes:
    """``pixels`` is [H, W, C] u8."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.dtype != np.uint8:
        raise ValueError(f"raster pixels must be [H, W, C] uint8, got {pixels.shape} {pixels.dtype}")
    h, w, c = pixels.shape
    header = RASTER_MAGIC + struct.pack("<IIII", FORMAT_VERSION, w, h, c)
    return header + np.ascontiguousarray(pixels).tobytes()


def decode_raster(payload: bytes, path="<bytes>") -> np.ndarray:
    if len(payload) < 20 or payload[:4] != RASTER_MAGIC:
        raise DataError(path, "not a raster file (bad magic or header)")
    version, w, h, c = struct.unpack("<IIII", payload[4:20])
    if version != FORMAT_VERSION:
        raise DataError(path, f"unsupported raster version {version}")
    body = payload[20:]
    if len(body) != w * h * c:
        raise DataError(path, f"expected {w * h * c} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, c).copy()


def write_raster(path, pixels: np.ndarray) -> None:
    atomic_write(path, encode_raster(pixels))


def read_raster(path) -> np.ndarray:
    try:
        payload = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(path, f"cannot read ({exc.strerror})") from None
    return decode_raster(payload, path)


def write_image(path, image: np.ndarray) -> None:
    """Write a [C, H, W] float image in [-1, 1]."""
    write_raster(path, to_uint8(image).transpose(1, 2, 0))


def read_image(path) -> np.ndarray:
    return to_unit_range(read_raster(path)).transpose(2, 0, 1)


# -- manifests ----------------------------------------------------------------------

@dataclass
class DatasetManifest:
    root: Path
    records: list[tuple[str, int]]
    image_size: int | None = None
    channels: int = 3


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(path, f"cannot read manifest ({exc.strerror})") from None
    records = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(path, f"line {lineno}: expected 'path<TAB>class_id'")
        try:
            cls = int(parts[1])
        except ValueError:
            raise DataError(path, f"line {lineno}: class id {parts[1]!r} is not an integer") from None
        records.append((parts[0], cls))
    return DatasetManifest(root=path.parent, records=records)


def write_manifest(path, records: Iterable[tuple[str, int]]) -> None:
    text = "".join(f"{rel}\t{cls}\n" for rel, cls in records)
    atomic_write(path, text.encode("utf-8"))


class ImageDataset:
    """In-memory images [N, C, H, W] in [-1, 1] with integer labels."""

    def __init__(self, images: np.ndarray, labels: np.ndarray):
        self.images = np.asarray(images)
        self.labels = np.asarray(labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[tuple[np.ndarray, int]]:
        return self.iter_epoch(None)

    def iter_epoch(self, seed: int | None = None) -> Iterator[tuple[np.ndarray, int]]:
        order = np.arange(len(self)) if seed is None else np.random.default_rng(seed).permutation(len(self))
        for i in order:
            yield self.images[i], int(self.labels[i])


def load_dataset(manifest_path, image_size: int | None = None, channels: int = 3) -> ImageDataset:
    """Read every raster named by the manifest and map its pixels to [-1, 1]."""
    manifest = read_manifest(manifest_path)
    images, labels = [], []
    expect = None if image_size is None else (image_size, image_size, channels)
    for rel, cls in manifest.records:
        path = manifest.root / rel
        pixels = read_raster(path)
        if expect is None:
            expect = pixels.shape
        if pixels.shape != expect:
            raise DataError(path, f"size {pixels.shape} differs from declared {expect}")
        images.append(to_unit_range(pixels).transpose(2, 0, 1))
        labels.append(cls)
    if not images:
        c = channels
        s = image_size or 0
        return ImageDataset(np.zeros((0, c, s, s)), np.zeros(0, dtype=np.int64))
    return ImageDataset(np.stack(images), np.array(labels))


def save_dataset(directory, images: np.ndarray, labels: Iterable[int], manifest_name: str = "manifest.tsv") -> Path:
    """Write images as rasters plus a manifest; returns the manifest path."""
    directory = Path(directory)
    records = []
    for i, (img, cls) in enumerate(zip(images, labels)):
        rel = f"{i:05d}.lfqi"
        write_image(directory / rel, img)
        records.append((rel, int(cls)))
    manifest = directory / manifest_name
    write_manifest(manifest, records)
    return manifest


def prefetch(items: Iterable, depth: int = 2) -> Iterator:
    """Produce ``items`` on a helper thread through a bounded queue."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()
    failure: list[BaseException] = []

    def worker():
        try:
            for item in items:
                q.put(item)
        except BaseException as exc:  # surfaced on the consumer side
            failure.append(exc)
        finally:
            q.put(done)

    threading.Thread(target=worker, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            if failure:
                raise failure[0]
            return
        yield item


# -- token files ---------------------------------------------------------------------

def encode_tokens(grids: np.ndarray, bits: int) -> bytes:
    grids = np.asarray(grids)
    if grids.ndim != 3:
        raise ValueError(f"token grids must be [count, rows, cols], got {grids.shape}")
    if grids.size and (grids.min() < 0 or grids.max() >= (1 << bits)):
        raise ValueError(f"token indices must lie in [0, {1 << bits})")
    count, rows, cols = grids.shape
    header = TOKEN_MAGIC + struct.pack("<IIIII", FORMAT_VERSION, bits, rows, cols, count)
    return header + grids.astype("<u4").tobytes()


def decode_tokens(payload: bytes, path="<bytes>") -> tuple[np.ndarray, int]:
    if len(payload) < 24 or payload[:4] != TOKEN_MAGIC:
        raise DataError(path, "not a token file (bad magic or header)")
    version, bits, rows, cols, count = struct.unpack("<IIIII", payload[4:24])
    if version != FORMAT_VERSION:
        raise DataError(path, f"unsupported token file version {version}")
    need = 4 * count * rows * cols
    if len(payload) - 24 != need:
        raise DataError(path, f"expected {need} index bytes, found {len(payload) - 24}")
    grids = np.frombuffer(payload[24:], dtype="<u4").reshape(count, rows, cols).astype(np.int64)
    return grids, bits


def write_tokens(path, grids: np.ndarray, bits: int) -> None:
    atomic_write(path, encode_tokens(grids, bits))


def read_tokens(path) -> tuple[np.ndarray, int]:
    try:
        payload = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(path, f"cannot read ({exc.strerror})") from None
    return decode_tokens(payload, path)


# -- synthetic textures ------------------------------------------------------------

def synthetic_textures(n: int, size: int = 32, seed: int = 0, components: int = 3) -> np.ndarray:
    """Colored sums of oriented sinusoidal gratings, [n, 3, size, size] in [-1, 1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    out = np.zeros((n, 3, size, size))
    for i in range(n):
        img = np.zeros((3, size, size))
        base = rng.uniform(-0.5, 0.5, size=3)
        for _ in range(components):
            angle = rng.uniform(0, np.pi)
            freq = rng.uniform(0.5, 4.0) * 2 * np.pi / size
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.sin(freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
            color = rng.uniform(-1, 1, size=3)
            img += color[:, None, None] * wave
        img = img / components + base[:, None, None]
        out[i] = np.clip(img, -1.0, 1.0)
    return out
