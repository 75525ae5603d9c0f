"""
VPCK checkpoint container.

Layout (little-endian):

    "VPCK"  u32 version (= 1)  u32 entry count
    per entry:
        u16 name length, UTF-8 name,
        u8 rank, rank × u64 dims,
        u8 dtype tag (0 = f32, 1 = i64),
        product(dims) × itemsize bytes of payload

Names follow the parameter registries' dotted scheme. Optimizer moments and
run metadata live beside the parameters under `optim.*` and `meta.*`. Integer
arrays (step counters) are stored as i64 so they stay exact past 2**24;
everything else is stored as f32.
"""

from __future__ import annotations

import logging
import os
import struct
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .utils import DMLError, ensure_directory

logger = logging.getLogger(__name__)

MAGIC = b"VPCK"
VERSION = 1
DTYPE_F32 = 0
DTYPE_I64 = 1
DTYPE_NAMES = {DTYPE_F32: "f32", DTYPE_I64: "i64"}
_NUMPY_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_I64: np.dtype("<i8")}
_TAGS = {name: tag for tag, name in DTYPE_NAMES.items()}


class CheckpointError(DMLError):
    """Raised when a checkpoint cannot be written, read or matched to a model."""


@dataclass
class CheckpointEntry:
    name: str
    shape: tuple[int, ...]
    dtype: str
    nbytes: int
    offset: int


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, size: int, what: str) -> bytes:
        if self.pos + size > len(self.data):
            raise CheckpointError(
                f"Truncated checkpoint at offset {self.pos}: expected {size} bytes "
                f"for {what}, {len(self.data) - self.pos} left"
            )
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple[int, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    """
    Write every tensor in the given order: integer arrays as i64, the rest as f32.

    The file is written next to its destination and renamed into place, so an
    interrupted save never leaves a half-written checkpoint behind.

    Raises:
        CheckpointError: On a name longer than 65535 bytes or an I/O failure
    """
    target = Path(path)
    ensure_directory(target.parent)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"Entry name too long: {name[:40]}...")
        tag = DTYPE_I64 if np.issubdtype(np.asarray(value).dtype, np.integer) else DTYPE_F32
        array = np.ascontiguousarray(value, dtype=_NUMPY_DTYPES[tag])
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        chunks.append(struct.pack("<B", tag))
        chunks.append(array.tobytes())

    temporary = target.with_name(target.name + ".tmp")
    try:
        with open(temporary, "wb") as f:
            for chunk in chunks:
                f.write(chunk)
        os.replace(temporary, target)
    except OSError as e:
        raise CheckpointError(f"Cannot write checkpoint {target}: {e}") from e
    logger.info("Saved %d tensors to %s", len(tensors), target)


def _read_entries(path: str | Path) -> tuple[bytes, list[CheckpointEntry]]:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e

    reader = _Reader(data)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"Bad magic {magic!r} at offset 0 (expected {MAGIC!r})")
    version, count = reader.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version} at offset 4")

    entries: list[CheckpointEntry] = []
    for index in range(count):
        (name_length,) = reader.unpack("<H", f"name length of entry {index}")
        raw_name = reader.take(name_length, f"name of entry {index}")
        try:
            name = raw_name.decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(
                f"Entry {index} name is not UTF-8 at offset {reader.pos - name_length}"
            ) from None
        (rank,) = reader.unpack("<B", f"rank of {name}")
        shape = reader.unpack(f"<{rank}Q", f"dims of {name}") if rank else ()
        tag_offset = reader.pos
        (tag,) = reader.unpack("<B", f"dtype of {name}")
        if tag not in DTYPE_NAMES:
            raise CheckpointError(f"Unknown dtype tag {tag} for {name} at offset {tag_offset}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * _NUMPY_DTYPES[tag].itemsize
        offset = reader.pos
        reader.take(nbytes, f"payload of {name}")
        entries.append(CheckpointEntry(name, tuple(shape), DTYPE_NAMES[tag], nbytes, offset))
    if reader.pos != len(data):
        raise CheckpointError(
            f"Trailing {len(data) - reader.pos} bytes after the last entry at offset {reader.pos}"
        )
    return data, entries


def inspect_checkpoint(path: str | Path) -> list[CheckpointEntry]:
    """List every entry without materializing payloads."""
    return _read_entries(path)[1]


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    """
    Read every tensor in file order: f32 entries as float32, i64 entries as int64.

    Raises:
        CheckpointError: On bad magic, unsupported version or truncation; the
            message names the byte offset
    """
    data, entries = _read_entries(path)
    tensors: dict[str, np.ndarray] = {}
    for entry in entries:
        dtype = _NUMPY_DTYPES[_TAGS[entry.dtype]]
        array = np.frombuffer(data, dtype=dtype, count=entry.nbytes // dtype.itemsize,
                              offset=entry.offset)
        tensors[entry.name] = array.reshape(entry.shape).astype(dtype.newbyteorder("="))
    logger.debug("Loaded %d tensors from %s", len(tensors), path)
    return tensors
