"""Raw disk images: open/copy, MBR partition tables."""

import hashlib
import os
import struct
from dataclasses import dataclass
from typing import Optional

from .common import (
    SECTOR_SIZE,
    MisalignedImage,
    NoPartitionTable,
    NotFound,
    OverlappingPartitions,
    PartitionOutOfBounds,
    UnsupportedFilesystem,
)

MBR_TABLE_OFFSET = 446
MBR_ENTRY_SIZE = 16
MBR_SIGNATURE_OFFSET = 510
MBR_SIGNATURE = b"\x55\xaa"
GPT_PROTECTIVE_TYPE = 0xEE

_HASH_CHUNK = 4 * 1024 * 1024


class DiskImage:
    """A raw (flat) image file addressed in 512-byte sectors.

    The content hash is computed on demand and cached; any write through
    this handle invalidates it.
    """

    def __init__(self, path: str, writable: bool):
        self.source = os.fspath(path)
        self.writable = writable
        self._fh = open(self.source, "r+b" if writable else "rb")
        self.byte_length = os.fstat(self._fh.fileno()).st_size
        self.sector_size = SECTOR_SIZE
        self._content_hash: Optional[str] = None

    @property
    def sector_count(self) -> int:
        return self.byte_length // self.sector_size

    @property
    def content_hash(self) -> str:
        if self._content_hash is None:
            h = hashlib.sha256()
            self._fh.seek(0)
            while True:
                chunk = self._fh.read(_HASH_CHUNK)
                if not chunk:
                    break
                h.update(chunk)
            self._content_hash = h.hexdigest()
        return self._content_hash

    def read_at(self, offset: int, length: int) -> bytes:
        if offset < 0 or offset + length > self.byte_length:
            raise ValueError(f"read out of image bounds: {offset}+{length}")
        self._fh.seek(offset)
        data = self._fh.read(length)
        if len(data) < length:
            data += b"\x00" * (length - len(data))  # sparse tail reads short on some fs
        return data

    def write_at(self, offset: int, data: bytes) -> None:
        if not self.writable:
            raise PermissionError(f"image opened read-only: {self.source}")
        if offset < 0 or offset + len(data) > self.byte_length:
            raise ValueError(f"write out of image bounds: {offset}+{len(data)}")
        self._fh.seek(offset)
        self._fh.write(data)
        self._content_hash = None

    def flush(self) -> None:
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def reopen(self) -> None:
        """Re-attach to the path after the file was atomically replaced."""
        self._fh.close()
        self._fh = open(self.source, "r+b" if self.writable else "rb")
        self.byte_length = os.fstat(self._fh.fileno()).st_size
        self._content_hash = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class PartitionEntry:
    index: int
    start_lba: int
    sector_count: int
    type_code: int
    bootable: bool

    @property
    def byte_offset(self) -> int:
        return self.start_lba * SECTOR_SIZE

    @property
    def byte_length(self) -> int:
        return self.sector_count * SECTOR_SIZE


def open_image(path: str, mode: str = "ro") -> DiskImage:
    """Open a raw image; length must be a whole number of 512-byte sectors."""
    if mode not in ("ro", "rw"):
        raise ValueError(f"mode must be 'ro' or 'rw', got {mode!r}")
    if not os.path.isfile(path):
        raise NotFound(f"no such image: {path}")
    size = os.path.getsize(path)
    if size % SECTOR_SIZE != 0:
        raise MisalignedImage(f"{path}: {size} bytes is not a multiple of {SECTOR_SIZE}")
    return DiskImage(path, writable=(mode == "rw"))


def create_image(path: str, byte_length: int) -> DiskImage:
    """Create a sparse zero-filled image of the given sector-aligned size."""
    if byte_length % SECTOR_SIZE != 0:
        raise MisalignedImage(f"{byte_length} bytes is not a multiple of {SECTOR_SIZE}")
    with open(path, "wb") as fh:
        fh.truncate(byte_length)
    return DiskImage(path, writable=True)


def parse_partitions(img: DiskImage) -> list[PartitionEntry]:
    """Read the MBR table at offset 446; entries with type code 0 are omitted."""
    if img.sector_count < 1:
        raise NoPartitionTable(f"{img.source}: image has no sectors")
    sector0 = img.read_at(0, SECTOR_SIZE)
    if sector0[MBR_SIGNATURE_OFFSET:MBR_SIGNATURE_OFFSET + 2] != MBR_SIGNATURE:
        raise NoPartitionTable(f"{img.source}: missing 0x55AA boot signature")
    entries = []
    for i in range(4):
        raw = sector0[MBR_TABLE_OFFSET + i * MBR_ENTRY_SIZE:MBR_TABLE_OFFSET + (i + 1) * MBR_ENTRY_SIZE]
        status, _, type_code, _, start_lba, count = struct.unpack("<B3sB3sII", raw)
        if type_code == 0:
            continue
        if type_code == GPT_PROTECTIVE_TYPE:
            raise UnsupportedFilesystem(f"{img.source}: GPT protective MBR (only plain MBR is supported)")
        entry = PartitionEntry(index=i, start_lba=start_lba, sector_count=count,
                               type_code=type_code, bootable=bool(status & 0x80))
        if entry.start_lba + entry.sector_count > img.sector_count:
            raise PartitionOutOfBounds(
                f"partition {i} ends at sector {entry.start_lba + entry.sector_count}, "
                f"image has {img.sector_count}")
        entries.append(entry)
    spans = sorted((e.start_lba, e.start_lba + e.sector_count, e.index) for e in entries)
    for (s1, e1, i1), (s2, e2, i2) in zip(spans, spans[1:]):
        if s2 < e1:
            raise OverlappingPartitions(f"partitions {i1} and {i2} overlap")
    return entries


def write_mbr(img: DiskImage, partitions: list[PartitionEntry]) -> None:
    """Write a minimal MBR: table entries plus the 0x55AA signature."""
    sector = bytearray(SECTOR_SIZE)
    for part in partitions:
        raw = struct.pack("<B3sB3sII",
                          0x80 if part.bootable else 0x00, b"\xfe\xff\xff",
                          part.type_code, b"\xfe\xff\xff",
                          part.start_lba, part.sector_count)
        sector[MBR_TABLE_OFFSET + part.index * MBR_ENTRY_SIZE:
               MBR_TABLE_OFFSET + (part.index + 1) * MBR_ENTRY_SIZE] = raw
    sector[MBR_SIGNATURE_OFFSET:MBR_SIGNATURE_OFFSET + 2] = MBR_SIGNATURE
    img.write_at(0, bytes(sector))


def partition_table_digest(img: DiskImage) -> str:
    """SHA-256 over the 64-byte MBR table region (geometry identity)."""
    if img.byte_length < SECTOR_SIZE:
        return hashlib.sha256(b"").hexdigest()
    return hashlib.sha256(img.read_at(MBR_TABLE_OFFSET, 64)).hexdigest()


def sparse_copy(src_path: str, dst_path: str) -> None:
    """Copy an image preserving holes (hole-aware seek walk)."""
    size = os.path.getsize(src_path)
    with open(src_path, "rb") as src, open(dst_path, "wb") as dst:
        dst.truncate(size)
        offset = 0
        while offset < size:
            try:
                data_start = os.lseek(src.fileno(), offset, os.SEEK_DATA)
            except OSError:
                break  # no more data, rest is hole
            hole_start = os.lseek(src.fileno(), data_start, os.SEEK_HOLE)
            src.seek(data_start)
            dst.seek(data_start)
            remaining = hole_start - data_start
            while remaining > 0:
                chunk = src.read(min(_HASH_CHUNK, remaining))
                dst.write(chunk)
                remaining -= len(chunk)
            offset = hole_start
