"""Disk image access: MBR partitions plus FAT32 (rw) and ext2 (ro) volumes."""

from typing import Optional, Union

from .common import (
    SECTOR_SIZE,
    BrokenChain,
    CorruptBootSector,
    CorruptDirectory,
    DirectoryNotEmpty,
    ExtentMap,
    FileAttrs,
    FileMeta,
    FsEntry,
    ImgFsError,
    InvalidPath,
    IsDirectory,
    MisalignedImage,
    NoPartitionTable,
    NotFound,
    OverlappingPartitions,
    PartitionOutOfBounds,
    PartitionTooSmall,
    ReadOnlyVolume,
    UnsupportedFilesystem,
    VolumeFull,
    canon_path,
    fold_path,
    split_path,
    truncate_atime,
    truncate_ctime,
    truncate_mtime,
)
from .ext2 import EXT2_MAGIC, Ext2Volume
from .fat32 import Fat32Volume, format_fat32, looks_like_fat32
from .image import (
    DiskImage,
    PartitionEntry,
    create_image,
    open_image,
    parse_partitions,
    partition_table_digest,
    sparse_copy,
    write_mbr,
)

FsVolume = Union[Fat32Volume, Ext2Volume]


def mount_volume(img: DiskImage, part: PartitionEntry) -> FsVolume:
    """Mount a partition: FAT32 via its boot sector, ext2 via its superblock."""
    offset, length = part.byte_offset, part.byte_length
    if offset + length > img.byte_length:
        raise PartitionOutOfBounds(f"partition {part.index} exceeds the image")
    if length >= SECTOR_SIZE and looks_like_fat32(img.read_at(offset, SECTOR_SIZE)):
        return Fat32Volume(img, offset, length)
    if length >= 1024 + 1024:
        magic = img.read_at(offset + 1024 + 56, 2)
        if int.from_bytes(magic, "little") == EXT2_MAGIC:
            return Ext2Volume(img, offset, length)
    raise UnsupportedFilesystem(f"partition {part.index}: neither FAT32 nor ext2")


def list_entries(vol: FsVolume, errors: Optional[list] = None) -> list[FsEntry]:
    return vol.list_entries(errors=errors)


def read_file(vol: FsVolume, path: str) -> bytes:
    return vol.read_file(path)


def file_extents(vol: FsVolume, path: str) -> ExtentMap:
    return vol.file_extents(path)


def write_file(vol: FsVolume, path: str, content: bytes, meta: FileMeta) -> FsEntry:
    return vol.write_file(path, content, meta)


def make_dir(vol: FsVolume, path: str, meta: FileMeta) -> FsEntry:
    return vol.make_dir(path, meta)


def delete_entry(vol: FsVolume, path: str) -> None:
    vol.delete_entry(path)


def set_metadata(vol: FsVolume, path: str, meta: FileMeta) -> FsEntry:
    return vol.set_metadata(path, meta)


def unallocated_extents(vol: FsVolume) -> list[tuple[int, int]]:
    return vol.unallocated_extents()


def format_fixture(img: DiskImage, part: PartitionEntry,
                   cluster_size: int = 4096, label: str = "") -> Fat32Volume:
    """Format the partition as FAT32 and hand back the mounted volume."""
    if not img.writable:
        raise ReadOnlyVolume("image opened read-only")
    if part.byte_offset + part.byte_length > img.byte_length:
        raise PartitionOutOfBounds(f"partition {part.index} exceeds the image")
    format_fat32(img, part.byte_offset, part.byte_length,
                 cluster_size=cluster_size, label=label)
    return Fat32Volume(img, part.byte_offset, part.byte_length)
