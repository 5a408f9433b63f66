"""Read-only ext2 volume driver (superblock, group descriptors, inodes)."""

import struct
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Optional

from .common import (
    BrokenChain,
    CorruptBootSector,
    CorruptDirectory,
    ExtentMap,
    FileAttrs,
    FileMeta,
    FsEntry,
    IsDirectory,
    NotFound,
    ReadOnlyVolume,
    canon_path,
    split_path,
)

EXT2_MAGIC = 0xEF53
SUPERBLOCK_OFFSET = 1024
ROOT_INODE = 2
INCOMPAT_FILETYPE = 0x0002

S_IFMT = 0xF000
S_IFDIR = 0x4000
S_IFREG = 0x8000


def _epoch(ts: int) -> Optional[datetime]:
    if ts == 0:
        return None
    return datetime.fromtimestamp(ts, tz=timezone.utc).replace(tzinfo=None)


@dataclass
class _Inode:
    number: int
    mode: int
    size: int
    atime: Optional[datetime]
    ctime: Optional[datetime]
    mtime: Optional[datetime]
    blocks: list[int]  # i_block[15]

    @property
    def is_dir(self) -> bool:
        return self.mode & S_IFMT == S_IFDIR

    @property
    def is_file(self) -> bool:
        return self.mode & S_IFMT == S_IFREG


class Ext2Volume:
    """Mounted ext2 filesystem; every mutating entry point refuses."""

    fs_kind = "EXT2"

    def __init__(self, img, volume_offset: int, volume_length: int):
        self.img = img
        self.volume_offset = volume_offset
        self.volume_length = volume_length
        sb = self._read(SUPERBLOCK_OFFSET, 1024)
        magic = struct.unpack_from("<H", sb, 56)[0]
        if magic != EXT2_MAGIC:
            raise CorruptBootSector(f"ext2 magic missing (got {magic:#x})")
        self.inode_count = struct.unpack_from("<I", sb, 0)[0]
        self.block_count = struct.unpack_from("<I", sb, 4)[0]
        self.free_block_count = struct.unpack_from("<I", sb, 12)[0]
        self.first_data_block = struct.unpack_from("<I", sb, 20)[0]
        log_block_size = struct.unpack_from("<I", sb, 24)[0]
        self.block_size = 1024 << log_block_size
        self.blocks_per_group = struct.unpack_from("<I", sb, 32)[0]
        self.inodes_per_group = struct.unpack_from("<I", sb, 40)[0]
        rev_level = struct.unpack_from("<I", sb, 76)[0]
        self.inode_size = struct.unpack_from("<H", sb, 88)[0] if rev_level >= 1 else 128
        incompat = struct.unpack_from("<I", sb, 96)[0] if rev_level >= 1 else 0
        self._dirent_has_filetype = bool(incompat & INCOMPAT_FILETYPE)
        self.label = sb[120:136].split(b"\x00")[0].decode("ascii", "replace")
        if self.block_count * self.block_size > volume_length:
            raise CorruptBootSector("superblock claims more blocks than the partition holds")
        if self.blocks_per_group == 0 or self.inodes_per_group == 0:
            raise CorruptBootSector("zero blocks/inodes per group")
        self.group_count = -(-(self.block_count - self.first_data_block) // self.blocks_per_group)
        self._group_desc = self._read_group_descriptors()

    # volume surface mirrors the FAT32 driver's field names
    @property
    def cluster_size(self) -> int:
        return self.block_size

    @property
    def total_clusters(self) -> int:
        return self.block_count

    @property
    def free_clusters(self) -> int:
        return self.free_block_count

    @property
    def writable(self) -> bool:
        return False

    def _read(self, offset: int, length: int) -> bytes:
        if offset < 0 or offset + length > self.volume_length:
            raise ValueError(f"read outside volume window: {offset}+{length}")
        return self.img.read_at(self.volume_offset + offset, length)

    def _read_group_descriptors(self) -> list[tuple[int, int, int]]:
        table_block = self.first_data_block + 1
        raw = self._read(table_block * self.block_size, self.group_count * 32)
        descs = []
        for i in range(self.group_count):
            block_bitmap, inode_bitmap, inode_table = struct.unpack_from("<III", raw, i * 32)
            descs.append((block_bitmap, inode_bitmap, inode_table))
        return descs

    def _inode(self, number: int) -> _Inode:
        if not 1 <= number <= self.inode_count:
            raise BrokenChain(f"inode {number} out of range")
        group, index = divmod(number - 1, self.inodes_per_group)
        _, _, table = self._group_desc[group]
        raw = self._read(table * self.block_size + index * self.inode_size, 128)
        mode, _uid, size, atime, ctime, mtime = struct.unpack_from("<HHIIII", raw, 0)
        blocks = list(struct.unpack_from("<15I", raw, 40))
        return _Inode(number, mode, size, _epoch(atime), _epoch(ctime), _epoch(mtime), blocks)

    def _block_pointers(self, inode: _Inode) -> list[int]:
        """Flattened data block list; 0 entries mark holes."""
        needed = -(-inode.size // self.block_size)
        out: list[int] = []
        per_block = self.block_size // 4

        def indirect(block: int, depth: int):
            if len(out) >= needed:
                return
            if block == 0:
                out.extend([0] * min(per_block ** depth, needed - len(out)))
                return
            if depth == 0:
                out.append(block)
                return
            raw = self._read(block * self.block_size, self.block_size)
            for ptr in struct.unpack(f"<{per_block}I", raw):
                if len(out) >= needed:
                    return
                indirect(ptr, depth - 1)

        for b in inode.blocks[:12]:
            if len(out) >= needed:
                break
            out.append(b)
        for slot, depth in ((12, 1), (13, 2), (14, 3)):
            if len(out) < needed:
                indirect(inode.blocks[slot], depth)
        return out[:needed]

    def _read_inode_data(self, inode: _Inode) -> bytes:
        chunks = []
        remaining = inode.size
        for block in self._block_pointers(inode):
            take = min(self.block_size, remaining)
            if block == 0:
                chunks.append(b"\x00" * take)
            else:
                chunks.append(self._read(block * self.block_size, take))
            remaining -= take
        if remaining:
            raise BrokenChain(f"inode {inode.number}: block map ends {remaining} bytes short")
        return b"".join(chunks)

    def _dir_entries(self, inode: _Inode):
        data = self._read_inode_data(inode)
        offset = 0
        while offset + 8 <= len(data):
            ino, rec_len, name_len, file_type = struct.unpack_from("<IHBB", data, offset)
            if rec_len < 8 or offset + rec_len > len(data):
                raise CorruptDirectory(f"inode {inode.number}", f"bad rec_len {rec_len}")
            if ino != 0:
                name = data[offset + 8:offset + 8 + name_len].decode("utf-8", "replace")
                if not self._dirent_has_filetype:
                    file_type = 0
                yield ino, name, file_type
            offset += rec_len

    def _entry_from_inode(self, path: str, name: str, inode: _Inode) -> FsEntry:
        kind = "dir" if inode.is_dir else "file"
        meta = FileMeta(mtime=inode.mtime or datetime(1970, 1, 1),
                        ctime=inode.ctime, atime=inode.atime, attrs=FileAttrs(0))
        return FsEntry(path=path, kind=kind, size=0 if inode.is_dir else inode.size,
                       meta=meta, first_cluster=None)

    def list_entries(self, errors: Optional[list] = None) -> list[FsEntry]:
        results: list[FsEntry] = []
        problems = errors if errors is not None else []
        visited = {ROOT_INODE}

        def walk(inode: _Inode, prefix: str):
            try:
                children = list(self._dir_entries(inode))
            except (BrokenChain, CorruptDirectory) as exc:
                problems.append(CorruptDirectory(prefix or "/", str(exc)))
                return
            for ino, name, _ft in children:
                if name in (".", ".."):
                    continue
                path = f"{prefix}/{name}"
                try:
                    child = self._inode(ino)
                except BrokenChain as exc:
                    problems.append(CorruptDirectory(path, str(exc)))
                    continue
                if not (child.is_dir or child.is_file):
                    continue  # devices/symlinks are out of scope
                results.append(self._entry_from_inode(path, name, child))
                if child.is_dir:
                    if ino in visited:
                        problems.append(CorruptDirectory(path, "directory loop"))
                        continue
                    visited.add(ino)
                    walk(child, path)

        walk(self._inode(ROOT_INODE), "")
        results.sort(key=lambda e: e.path.encode("utf-8"))
        return results

    def _resolve(self, path: str) -> _Inode:
        parts = split_path(path)
        inode = self._inode(ROOT_INODE)
        for component in parts:
            if not inode.is_dir:
                raise NotFound(f"not a directory on the way to {path!r}")
            found = None
            for ino, name, _ft in self._dir_entries(inode):
                if name == component:
                    found = ino
                    break
            if found is None:
                raise NotFound(f"no such path: {path!r}")
            inode = self._inode(found)
        return inode

    def get_entry(self, path: str) -> FsEntry:
        path = canon_path(path)
        inode = self._resolve(path)
        return self._entry_from_inode(path, path.rsplit("/", 1)[-1], inode)

    def read_file(self, path: str) -> bytes:
        inode = self._resolve(path)
        if inode.is_dir:
            raise IsDirectory(f"not a file: {path!r}")
        return self._read_inode_data(inode)

    def file_extents(self, path: str) -> ExtentMap:
        inode = self._resolve(path)
        extents: list[tuple[int, int]] = []
        allocated = 0
        for block in self._block_pointers(inode):
            if block == 0:
                continue
            allocated += 1
            off = self.volume_offset + block * self.block_size
            if extents and extents[-1][0] + extents[-1][1] == off:
                extents[-1] = (extents[-1][0], extents[-1][1] + self.block_size)
            else:
                extents.append((off, self.block_size))
        slack = 0
        if inode.is_file and allocated:
            tail = inode.size % self.block_size
            slack = (self.block_size - tail) if tail else 0
        return ExtentMap(extents=extents, slack_length=slack)

    def content_runs(self, path: str) -> list[tuple[int, int, int]]:
        """(file_offset, image_offset, length); holes produce no run."""
        inode = self._resolve(path)
        if inode.is_dir:
            raise IsDirectory(f"not a file: {path!r}")
        runs = []
        file_off = 0
        remaining = inode.size
        for block in self._block_pointers(inode):
            take = min(self.block_size, remaining)
            if block != 0:
                runs.append((file_off, self.volume_offset + block * self.block_size, take))
            file_off += take
            remaining -= take
        return runs

    def unallocated_extents(self) -> list[tuple[int, int]]:
        extents: list[tuple[int, int]] = []
        for group, (block_bitmap, _, _) in enumerate(self._group_desc):
            bitmap = self._read(block_bitmap * self.block_size, self.block_size)
            base = self.first_data_block + group * self.blocks_per_group
            count = min(self.blocks_per_group, self.block_count - base)
            for i in range(count):
                if bitmap[i // 8] & (1 << (i % 8)):
                    continue
                off = self.volume_offset + (base + i) * self.block_size
                if extents and extents[-1][0] + extents[-1][1] == off:
                    extents[-1] = (extents[-1][0], extents[-1][1] + self.block_size)
                else:
                    extents.append((off, self.block_size))
        return extents

    # -- write refusals ------------------------------------------------------

    def write_file(self, path, content, meta):
        raise ReadOnlyVolume("ext2 volumes are read-only")

    def make_dir(self, path, meta):
        raise ReadOnlyVolume("ext2 volumes are read-only")

    def delete_entry(self, path):
        raise ReadOnlyVolume("ext2 volumes are read-only")

    def set_metadata(self, path, meta):
        raise ReadOnlyVolume("ext2 volumes are read-only")
