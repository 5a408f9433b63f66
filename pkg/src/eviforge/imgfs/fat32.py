"""FAT32 volume driver: mount, walk, read, write, format.

Layout references are the standard FAT on-disk structures: BPB boot sector,
FSINFO sector, mirrored allocation tables, and 32-byte directory entries
with VFAT long-name continuation slots.
"""

import logging
import struct
import zlib
from contextlib import contextmanager
from dataclasses import dataclass
from datetime import datetime
from typing import Optional

import numpy as np

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
    InvalidPath,
    IsDirectory,
    NotFound,
    PartitionTooSmall,
    ReadOnlyVolume,
    VolumeFull,
    canon_path,
    decode_ctime,
    decode_fat_datetime,
    encode_ctime,
    encode_fat_date,
    encode_fat_time,
    split_path,
    truncate_mtime,
    validate_component,
)

logger = logging.getLogger(__name__)

FAT_ENTRY_MASK = 0x0FFFFFFF
FAT_EOC = 0x0FFFFFF8  # values >= this terminate a chain
FAT_BAD = 0x0FFFFFF7
FAT32_MIN_CLUSTERS = 65525

DIR_ENTRY_SIZE = 32
ATTR_READ_ONLY = 0x01
ATTR_HIDDEN = 0x02
ATTR_SYSTEM = 0x04
ATTR_VOLUME_ID = 0x08
ATTR_DIRECTORY = 0x10
ATTR_ARCHIVE = 0x20
ATTR_LONG_NAME = 0x0F
LAST_LONG_ENTRY = 0x40

# NT reserved byte: short name stored uppercase but displayed lowercase.
NT_LOWER_BASE = 0x08
NT_LOWER_EXT = 0x10

_SHORT_ENTRY = struct.Struct("<11sBBBHHHHHHHI")
_LFN_ENTRY = struct.Struct("<B10sBBB12sH4s")

# Characters valid in a stored 8.3 name (beyond letters/digits).
_SHORT_OK = set(b"!#$%&'()-@^_`{}~")

FSINFO_LEAD = 0x41615252
FSINFO_STRUCT = 0x61417272
FSINFO_TRAIL = 0xAA550000


def lfn_checksum(short11: bytes) -> int:
    s = 0
    for c in short11:
        s = (((s & 1) << 7) + (s >> 1) + c) & 0xFF
    return s


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def _cluster_runs(clusters: list[int]):
    """Collapse an ordered cluster list into (start, count) runs."""
    i = 0
    while i < len(clusters):
        j = i
        while j + 1 < len(clusters) and clusters[j + 1] == clusters[j] + 1:
            j += 1
        yield clusters[i], j - i + 1
        i = j + 1


@dataclass
class _BootParams:
    sectors_per_cluster: int
    reserved_sectors: int
    num_fats: int
    total_sectors: int
    fat_sectors: int
    root_cluster: int
    fsinfo_sector: int
    backup_boot_sector: int
    volume_label: str


def _parse_boot_sector(raw: bytes) -> _BootParams:
    if len(raw) < SECTOR_SIZE or raw[510:512] != b"\x55\xaa":
        raise CorruptBootSector("missing boot sector signature")
    bps = struct.unpack_from("<H", raw, 11)[0]
    spc = raw[13]
    reserved = struct.unpack_from("<H", raw, 14)[0]
    num_fats = raw[16]
    root_entries = struct.unpack_from("<H", raw, 17)[0]
    totsec16 = struct.unpack_from("<H", raw, 19)[0]
    fatsz16 = struct.unpack_from("<H", raw, 22)[0]
    totsec32 = struct.unpack_from("<I", raw, 32)[0]
    fatsz32 = struct.unpack_from("<I", raw, 36)[0]
    root_cluster = struct.unpack_from("<I", raw, 44)[0]
    fsinfo = struct.unpack_from("<H", raw, 48)[0]
    backup = struct.unpack_from("<H", raw, 50)[0]
    label = raw[71:82].decode("ascii", "replace").rstrip(" \x00")

    if bps != SECTOR_SIZE:
        raise CorruptBootSector(f"bytes per sector {bps}, only {SECTOR_SIZE} supported")
    if not _is_pow2(spc) or spc > 128:
        raise CorruptBootSector(f"bad sectors per cluster {spc}")
    if reserved == 0 or num_fats not in (1, 2):
        raise CorruptBootSector("bad reserved sector or FAT count")
    if root_entries != 0 or fatsz16 != 0 or fatsz32 == 0:
        raise CorruptBootSector("not a FAT32 BPB (FAT12/16 geometry fields set)")
    total = totsec32 if totsec32 else totsec16
    if total == 0:
        raise CorruptBootSector("zero total sectors")
    if root_cluster < 2:
        raise CorruptBootSector(f"bad root cluster {root_cluster}")
    return _BootParams(spc, reserved, num_fats, total, fatsz32, root_cluster,
                       fsinfo, backup, label)


def looks_like_fat32(raw: bytes) -> bool:
    """Cheap detector used by mount dispatch before full validation."""
    if len(raw) < SECTOR_SIZE or raw[510:512] != b"\x55\xaa":
        return False
    if raw[82:90] == b"FAT32   ":
        return True
    bps = struct.unpack_from("<H", raw, 11)[0]
    fatsz16 = struct.unpack_from("<H", raw, 22)[0]
    fatsz32 = struct.unpack_from("<I", raw, 36)[0]
    root_entries = struct.unpack_from("<H", raw, 17)[0]
    return bps == SECTOR_SIZE and fatsz16 == 0 and fatsz32 > 0 and root_entries == 0


@dataclass
class _RawEntry:
    """A parsed 8.3 directory entry plus its on-disk slot locations."""

    name: str
    short_name: str
    short11: bytes
    attr: int
    first_cluster: int
    size: int
    mtime: Optional[datetime]
    ctime: Optional[datetime]
    atime: Optional[datetime]
    slot_offsets: list[int]  # volume-relative, LFN slots first, short entry last

    @property
    def is_dir(self) -> bool:
        return bool(self.attr & ATTR_DIRECTORY)

    def meta(self) -> FileMeta:
        return FileMeta(
            mtime=self.mtime or datetime(1980, 1, 1),
            ctime=self.ctime,
            atime=self.atime,
            attrs=FileAttrs(self.attr & (ATTR_READ_ONLY | ATTR_HIDDEN | ATTR_SYSTEM | ATTR_ARCHIVE)),
        )


class Fat32Volume:
    """Read/write access to one FAT32 volume inside a raw image.

    All offsets handed to the image are bounds-checked against the volume
    window, so no operation can touch bytes outside its partition. Mutating
    operations run inside a journal and roll back completely on error.
    Handles are single-writer: callers serialize mutations.
    """

    fs_kind = "FAT32"

    def __init__(self, img, volume_offset: int, volume_length: int):
        self.img = img
        self.volume_offset = volume_offset
        self.volume_length = volume_length
        raw = self._read(0, SECTOR_SIZE)
        bp = _parse_boot_sector(raw)
        if bp.total_sectors * SECTOR_SIZE > volume_length:
            raise CorruptBootSector(
                f"volume claims {bp.total_sectors} sectors, partition has "
                f"{volume_length // SECTOR_SIZE}")
        self._bp = bp
        self.first_data_sector = bp.reserved_sectors + bp.num_fats * bp.fat_sectors
        if self.first_data_sector >= bp.total_sectors:
            raise CorruptBootSector("metadata overruns the volume")
        self.cluster_size = bp.sectors_per_cluster * SECTOR_SIZE
        self.total_clusters = (bp.total_sectors - self.first_data_sector) // bp.sectors_per_cluster
        if self.total_clusters < 1:
            raise CorruptBootSector("no data clusters")
        if not (2 <= bp.root_cluster < self.total_clusters + 2):
            raise CorruptBootSector(f"root cluster {bp.root_cluster} out of range")
        self._fat_offsets = [
            (bp.reserved_sectors + i * bp.fat_sectors) * SECTOR_SIZE
            for i in range(bp.num_fats)
        ]
        self._fat = bytearray(self._read(self._fat_offsets[0], bp.fat_sectors * SECTOR_SIZE))
        self._journal: Optional[list] = None
        self.free_clusters = self._scan_free_count()
        self.label = self._read_label()

    # -- raw access ---------------------------------------------------------

    def _read(self, offset: int, length: int) -> bytes:
        if offset < 0 or offset + length > self.volume_length:
            raise ValueError(f"read outside volume window: {offset}+{length}")
        return self.img.read_at(self.volume_offset + offset, length)

    def _write(self, offset: int, data: bytes) -> None:
        if not self.writable:
            raise ReadOnlyVolume(f"volume at {self.volume_offset} is read-only")
        if offset < 0 or offset + len(data) > self.volume_length:
            raise ValueError(f"write outside volume window: {offset}+{len(data)}")
        if self._journal is not None:
            self._journal.append((offset, self._read(offset, len(data))))
        self.img.write_at(self.volume_offset + offset, data)

    @property
    def writable(self) -> bool:
        return self.img.writable

    @contextmanager
    def _transaction(self):
        """Roll back every write (and in-memory FAT state) on failure."""
        if self._journal is not None:
            yield  # nested call: the outermost transaction owns rollback
            return
        journal: list = []
        self._journal = journal
        try:
            yield
        except BaseException:
            self._journal = None
            logger.debug("rolling back %d journaled writes", len(journal))
            for offset, old in reversed(journal):
                self.img.write_at(self.volume_offset + offset, old)
            self._fat = bytearray(self._read(self._fat_offsets[0],
                                             self._bp.fat_sectors * SECTOR_SIZE))
            self.free_clusters = self._scan_free_count()
            raise
        finally:
            self._journal = None

    # -- FAT ----------------------------------------------------------------

    def _fat_view(self) -> np.ndarray:
        return np.frombuffer(self._fat, dtype="<u4")

    def _scan_free_count(self) -> int:
        view = self._fat_view()[2:self.total_clusters + 2]
        return int(np.count_nonzero((view & FAT_ENTRY_MASK) == 0))

    def fat_entry(self, cluster: int) -> int:
        return struct.unpack_from("<I", self._fat, cluster * 4)[0] & FAT_ENTRY_MASK

    def _set_fat_entries(self, updates: list[tuple[int, int]]) -> None:
        """Apply (cluster, value) updates to the cache and every FAT copy.

        Consecutive clusters are coalesced into single writes.
        """
        updates = sorted(updates)
        runs: list[tuple[int, bytearray]] = []
        for cluster, value in updates:
            old = struct.unpack_from("<I", self._fat, cluster * 4)[0]
            word = (old & ~FAT_ENTRY_MASK) | (value & FAT_ENTRY_MASK)
            packed = struct.pack("<I", word)
            struct.pack_into("<I", self._fat, cluster * 4, word)
            if runs and runs[-1][0] + len(runs[-1][1]) == cluster * 4:
                runs[-1][1].extend(packed)
            else:
                runs.append((cluster * 4, bytearray(packed)))
        for rel, data in runs:
            for base in self._fat_offsets:
                self._write(base + rel, bytes(data))

    def chain(self, first_cluster: int) -> list[int]:
        """Follow a cluster chain; raises BrokenChain on cycles or bad links."""
        clusters = []
        seen = set()
        cur = first_cluster
        while True:
            if cur < 2 or cur >= self.total_clusters + 2:
                raise BrokenChain(f"cluster {cur} out of range")
            if cur in seen:
                raise BrokenChain(f"cluster chain cycles at {cur}")
            seen.add(cur)
            clusters.append(cur)
            nxt = self.fat_entry(cur)
            if nxt >= FAT_EOC:
                return clusters
            if nxt == FAT_BAD or nxt == 0:
                raise BrokenChain(f"chain hits {'bad' if nxt else 'free'} cluster after {cur}")
            cur = nxt

    def _alloc_clusters(self, count: int) -> list[int]:
        """First-fit ascending allocation; links the new chain and ends it."""
        if count == 0:
            return []
        view = self._fat_view()[:self.total_clusters + 2]
        free = np.flatnonzero((view & FAT_ENTRY_MASK) == 0)
        free = free[free >= 2]
        if len(free) < count:
            raise VolumeFull(f"need {count} clusters, {len(free)} free")
        picked = [int(c) for c in free[:count]]
        updates = [(picked[i], picked[i + 1]) for i in range(count - 1)]
        updates.append((picked[-1], 0x0FFFFFFF))
        self._set_fat_entries(updates)
        self.free_clusters -= count
        self._write_fsinfo()
        return picked

    def _free_chain(self, first_cluster: int) -> None:
        clusters = self.chain(first_cluster)
        self._set_fat_entries([(c, 0) for c in clusters])
        self.free_clusters += len(clusters)
        self._write_fsinfo()

    def _write_fsinfo(self) -> None:
        if self._bp.fsinfo_sector == 0:
            return
        view = self._fat_view()[2:self.total_clusters + 2]
        free_np = np.flatnonzero((view & FAT_ENTRY_MASK) == 0)
        next_free = int(free_np[0]) + 2 if len(free_np) else 0xFFFFFFFF
        base = self._bp.fsinfo_sector * SECTOR_SIZE
        self._write(base + 488, struct.pack("<II", self.free_clusters, next_free))

    def cluster_offset(self, cluster: int) -> int:
        """Volume-relative byte offset of a data cluster."""
        return (self.first_data_sector + (cluster - 2) * self._bp.sectors_per_cluster) * SECTOR_SIZE

    def cluster_image_offset(self, cluster: int) -> int:
        return self.volume_offset + self.cluster_offset(cluster)

    # -- directory parsing ----------------------------------------------------

    def _dir_slots(self, first_cluster: int):
        """Yield (volume_offset, raw 32 bytes) for each slot, in chain order."""
        for cluster in self.chain(first_cluster):
            base = self.cluster_offset(cluster)
            data = self._read(base, self.cluster_size)
            for i in range(0, self.cluster_size, DIR_ENTRY_SIZE):
                yield base + i, data[i:i + DIR_ENTRY_SIZE]

    def _parse_dir(self, first_cluster: int) -> list[_RawEntry]:
        entries = []
        lfn_parts: dict[int, bytes] = {}
        lfn_checksum_val = None
        lfn_slots: list[int] = []
        for offset, raw in self._dir_slots(first_cluster):
            first = raw[0]
            if first == 0x00:
                break
            if first == 0xE5:
                lfn_parts, lfn_checksum_val, lfn_slots = {}, None, []
                continue
            attr = raw[11]
            if attr & 0x3F == ATTR_LONG_NAME:
                ord_, n1, _, _, chk, n2, _, n3 = _LFN_ENTRY.unpack(raw)
                seq = ord_ & 0x1F
                if ord_ & LAST_LONG_ENTRY:
                    lfn_parts, lfn_slots = {}, []
                    lfn_checksum_val = chk
                if chk != lfn_checksum_val or seq == 0:
                    lfn_parts, lfn_checksum_val, lfn_slots = {}, None, []
                    continue
                lfn_parts[seq] = n1 + n2 + n3
                lfn_slots.append(offset)
                continue
            if attr & ATTR_VOLUME_ID:
                lfn_parts, lfn_checksum_val, lfn_slots = {}, None, []
                continue
            entry = self._decode_short_entry(raw, offset, lfn_parts, lfn_checksum_val, lfn_slots)
            lfn_parts, lfn_checksum_val, lfn_slots = {}, None, []
            if entry.name in (".", ".."):
                continue
            entries.append(entry)
        return entries

    def _decode_short_entry(self, raw, offset, lfn_parts, lfn_chk, lfn_slots) -> _RawEntry:
        (name11, attr, nt_flags, crt_tenths, crt_time, crt_date, acc_date,
         clus_hi, wrt_time, wrt_date, clus_lo, size) = _SHORT_ENTRY.unpack(raw)
        if name11[0] == 0x05:
            name11 = b"\xe5" + name11[1:]
        base = name11[:8].rstrip(b" ")
        ext = name11[8:].rstrip(b" ")
        base_s = base.decode("ascii", "replace")
        ext_s = ext.decode("ascii", "replace")
        if nt_flags & NT_LOWER_BASE:
            base_s = base_s.lower()
        if nt_flags & NT_LOWER_EXT:
            ext_s = ext_s.lower()
        short_name = base_s + ("." + ext_s if ext_s else "")

        name = short_name
        if lfn_parts and lfn_chk == lfn_checksum(name11):
            seqs = sorted(lfn_parts)
            if seqs == list(range(1, len(seqs) + 1)):
                blob = b"".join(lfn_parts[s] for s in seqs)
                text = blob.decode("utf-16le", "replace")
                for stop in ("\x00", "￿"):
                    idx = text.find(stop)
                    if idx != -1:
                        text = text[:idx]
                if text:
                    name = text
        plain_base = name11[:8].rstrip(b" ").decode("ascii", "replace")
        plain_ext = name11[8:].rstrip(b" ").decode("ascii", "replace")
        return _RawEntry(
            name=name,
            short_name=plain_base + ("." + plain_ext if plain_ext else ""),
            short11=name11,
            attr=attr,
            first_cluster=(clus_hi << 16) | clus_lo,
            size=size,
            mtime=decode_fat_datetime(wrt_date, wrt_time),
            ctime=decode_ctime(crt_tenths, crt_time, crt_date),
            atime=decode_fat_datetime(acc_date, 0),
            slot_offsets=lfn_slots + [offset],
        )

    def _read_label(self) -> str:
        try:
            for _, raw in self._dir_slots(self._bp.root_cluster):
                if raw[0] == 0x00:
                    break
                if raw[0] != 0xE5 and raw[11] & 0x3F != ATTR_LONG_NAME and raw[11] & ATTR_VOLUME_ID:
                    return raw[:11].decode("ascii", "replace").rstrip(" \x00")
        except BrokenChain:
            pass
        return self._bp.volume_label

    # -- lookup ---------------------------------------------------------------

    def _find_in_dir(self, dir_cluster: int, component: str) -> Optional[_RawEntry]:
        want = component.upper()
        for entry in self._parse_dir(dir_cluster):
            if entry.name.upper() == want or entry.short_name.upper() == want:
                return entry
        return None

    def _resolve(self, path: str) -> tuple[Optional[_RawEntry], int]:
        """Return (entry, parent_dir_cluster); entry is None for the root."""
        parts = split_path(path)
        if not parts:
            return None, self._bp.root_cluster
        dir_cluster = self._bp.root_cluster
        for component in parts[:-1]:
            entry = self._find_in_dir(dir_cluster, component)
            if entry is None or not entry.is_dir:
                raise NotFound(f"no such directory: {component!r} in {path!r}")
            dir_cluster = entry.first_cluster
        entry = self._find_in_dir(dir_cluster, parts[-1])
        if entry is None:
            raise NotFound(f"no such path: {path!r}")
        return entry, dir_cluster

    # -- public operations ------------------------------------------------------

    def list_entries(self, errors: Optional[list] = None) -> list[FsEntry]:
        """Depth-first listing, canonical paths, sorted byte-wise.

        Corrupt subtrees are skipped; their CorruptDirectory errors land in
        `errors` when a list is supplied (they are silently counted otherwise).
        """
        results: list[FsEntry] = []
        problems = errors if errors is not None else []
        visited = {self._bp.root_cluster}

        def walk(dir_cluster: int, prefix: str):
            try:
                entries = self._parse_dir(dir_cluster)
            except BrokenChain as exc:
                problems.append(CorruptDirectory(prefix or "/", str(exc)))
                return
            for entry in entries:
                path = f"{prefix}/{entry.name}"
                if entry.is_dir:
                    results.append(FsEntry(path=path, kind="dir", size=0,
                                           meta=entry.meta(),
                                           first_cluster=entry.first_cluster or None))
                    if entry.first_cluster in visited:
                        problems.append(CorruptDirectory(path, "directory cluster chain loops"))
                        continue
                    if not (2 <= entry.first_cluster < self.total_clusters + 2):
                        problems.append(CorruptDirectory(path, f"bad first cluster {entry.first_cluster}"))
                        continue
                    visited.add(entry.first_cluster)
                    walk(entry.first_cluster, path)
                else:
                    results.append(FsEntry(path=path, kind="file", size=entry.size,
                                           meta=entry.meta(),
                                           first_cluster=entry.first_cluster or None))

        walk(self._bp.root_cluster, "")
        results.sort(key=lambda e: e.path.encode("utf-8"))
        return results

    def get_entry(self, path: str) -> FsEntry:
        entry, _ = self._resolve(path)
        if entry is None:
            raise IsDirectory("root directory has no entry")
        return FsEntry(path=canon_path(path), kind="dir" if entry.is_dir else "file",
                       size=entry.size, meta=entry.meta(),
                       first_cluster=entry.first_cluster or None)

    def read_file(self, path: str) -> bytes:
        entry, _ = self._resolve(path)
        if entry is None or entry.is_dir:
            raise IsDirectory(f"not a file: {path!r}")
        if entry.size == 0:
            return b""
        if entry.first_cluster == 0:
            raise BrokenChain(f"{path!r}: size {entry.size} but no clusters")
        chunks = []
        remaining = entry.size
        for cluster in self.chain(entry.first_cluster):
            take = min(self.cluster_size, remaining)
            chunks.append(self._read(self.cluster_offset(cluster), take))
            remaining -= take
            if remaining == 0:
                break
        if remaining:
            raise BrokenChain(f"{path!r}: chain ends {remaining} bytes short")
        return b"".join(chunks)

    def file_extents(self, path: str) -> ExtentMap:
        """Cluster runs as absolute image offsets, adjacent runs coalesced."""
        entry, _ = self._resolve(path)
        if entry is None:
            raise IsDirectory("root directory has no extents")
        if entry.first_cluster == 0:
            return ExtentMap(extents=[], slack_length=0)
        clusters = self.chain(entry.first_cluster)
        extents = self._coalesce_clusters(clusters)
        slack = 0
        if not entry.is_dir:
            slack = len(clusters) * self.cluster_size - entry.size
        return ExtentMap(extents=extents, slack_length=slack)

    def _coalesce_clusters(self, clusters: list[int]) -> list[tuple[int, int]]:
        extents: list[tuple[int, int]] = []
        for c in clusters:
            off = self.cluster_image_offset(c)
            if extents and extents[-1][0] + extents[-1][1] == off:
                extents[-1] = (extents[-1][0], extents[-1][1] + self.cluster_size)
            else:
                extents.append((off, self.cluster_size))
        return extents

    def content_runs(self, path: str) -> list[tuple[int, int, int]]:
        """(file_offset, image_offset, length) runs covering exactly the file bytes."""
        entry, _ = self._resolve(path)
        if entry is None or entry.is_dir:
            raise IsDirectory(f"not a file: {path!r}")
        runs = []
        file_off = 0
        remaining = entry.size
        if remaining == 0:
            return runs
        for img_off, length in self.file_extents(path).extents:
            take = min(length, remaining)
            runs.append((file_off, img_off, take))
            file_off += take
            remaining -= take
            if remaining == 0:
                break
        return runs

    def unallocated_extents(self) -> list[tuple[int, int]]:
        """Absolute image extents of all free clusters, coalesced, ascending."""
        view = self._fat_view()[2:self.total_clusters + 2]
        free = np.flatnonzero((view & FAT_ENTRY_MASK) == 0) + 2
        return self._coalesce_clusters([int(c) for c in free])

    # -- mutation ---------------------------------------------------------------

    def write_file(self, path: str, content: bytes, meta: FileMeta) -> FsEntry:
        """Create or overwrite a file; parent directories appear on demand."""
        if not self.writable:
            raise ReadOnlyVolume("write_file on read-only volume")
        path = canon_path(path)
        parts = split_path(path)
        if not parts:
            raise InvalidPath("cannot write the root directory")
        for component in parts:
            validate_component(component)
        with self._transaction():
            dir_cluster = self._ensure_dirs(parts[:-1], meta)
            name = parts[-1]
            existing = self._find_in_dir(dir_cluster, name)
            if existing is not None and existing.is_dir:
                raise IsDirectory(f"directory exists at {path!r}")
            if existing is not None and existing.first_cluster:
                self._free_chain(existing.first_cluster)
            need = -(-len(content) // self.cluster_size)
            clusters = self._alloc_clusters(need)
            pos = 0
            for run_start, run_len in _cluster_runs(clusters):
                chunk = content[pos:pos + run_len * self.cluster_size]
                self._write(self.cluster_offset(run_start), chunk)
                pos += len(chunk)
            first = clusters[0] if clusters else 0
            if existing is not None:
                self._rewrite_short_entry(existing, first, len(content), meta)
            else:
                self._insert_entry(dir_cluster, name, 0, first, len(content), meta)
        return self.get_entry(path)

    def make_dir(self, path: str, meta: FileMeta) -> FsEntry:
        """Create a directory (and any missing parents)."""
        if not self.writable:
            raise ReadOnlyVolume("make_dir on read-only volume")
        parts = split_path(path)
        if not parts:
            raise InvalidPath("root already exists")
        for component in parts:
            validate_component(component)
        with self._transaction():
            parent = self._ensure_dirs(parts[:-1], meta)
            existing = self._find_in_dir(parent, parts[-1])
            if existing is not None:
                if not existing.is_dir:
                    raise InvalidPath(f"file exists at {canon_path(path)!r}")
            else:
                self._create_dir(parent, parts[-1], meta)
        return self.get_entry(path)

    def _ensure_dirs(self, components: list[str], meta: FileMeta) -> int:
        # on-demand parents inherit the triggering timestamps but no attr bits
        dir_meta = FileMeta(mtime=meta.mtime, ctime=meta.ctime, atime=meta.atime)
        cluster = self._bp.root_cluster
        for component in components:
            entry = self._find_in_dir(cluster, component)
            if entry is None:
                cluster = self._create_dir(cluster, component, dir_meta)
            elif entry.is_dir:
                cluster = entry.first_cluster
            else:
                raise InvalidPath(f"file blocks directory path at {component!r}")
        return cluster

    def _create_dir(self, parent_cluster: int, name: str, meta: FileMeta) -> int:
        cluster = self._alloc_clusters(1)[0]
        self._write(self.cluster_offset(cluster), b"\x00" * self.cluster_size)
        dot = self._pack_short_entry(b".          ", ATTR_DIRECTORY, cluster, 0, meta)
        dotdot_cluster = 0 if parent_cluster == self._bp.root_cluster else parent_cluster
        dotdot = self._pack_short_entry(b"..         ", ATTR_DIRECTORY, dotdot_cluster, 0, meta)
        self._write(self.cluster_offset(cluster), dot + dotdot)
        self._insert_entry(parent_cluster, name, ATTR_DIRECTORY, cluster, 0, meta)
        return cluster

    def delete_entry(self, path: str) -> None:
        """Mark directory slots deleted (0xE5) and free the cluster chain."""
        if not self.writable:
            raise ReadOnlyVolume("delete_entry on read-only volume")
        entry, _ = self._resolve(path)
        if entry is None:
            raise InvalidPath("cannot delete the root directory")
        with self._transaction():
            if entry.is_dir:
                if entry.first_cluster and self._parse_dir(entry.first_cluster):
                    raise DirectoryNotEmpty(f"{canon_path(path)!r} is not empty")
            if entry.first_cluster:
                self._free_chain(entry.first_cluster)
            for offset in entry.slot_offsets:
                self._write(offset, b"\xe5")

    def set_metadata(self, path: str, meta: FileMeta) -> FsEntry:
        """Rewrite timestamp/attribute fields in place; content untouched."""
        if not self.writable:
            raise ReadOnlyVolume("set_metadata on read-only volume")
        entry, _ = self._resolve(path)
        if entry is None:
            raise InvalidPath("root directory has no metadata")
        with self._transaction():
            self._rewrite_short_entry(entry, entry.first_cluster, entry.size, meta,
                                      keep_attr_dir=entry.is_dir)
        return self.get_entry(path)

    # -- entry encoding -----------------------------------------------------------

    def _pack_short_entry(self, name11: bytes, attr: int, first_cluster: int,
                          size: int, meta: FileMeta) -> bytes:
        mt = truncate_mtime(meta.mtime)
        wrt_time, wrt_date = encode_fat_time(mt), encode_fat_date(mt)
        if meta.ctime is not None:
            crt_tenths, crt_time, crt_date = encode_ctime(meta.ctime)
        else:
            crt_tenths = crt_time = crt_date = 0
        acc_date = encode_fat_date(meta.atime) if meta.atime is not None else 0
        return _SHORT_ENTRY.pack(name11, attr, 0, crt_tenths, crt_time, crt_date,
                                 acc_date, first_cluster >> 16, wrt_time, wrt_date,
                                 first_cluster & 0xFFFF, size)

    def _rewrite_short_entry(self, entry: _RawEntry, first_cluster: int, size: int,
                             meta: FileMeta, keep_attr_dir: Optional[bool] = None) -> None:
        is_dir = entry.is_dir if keep_attr_dir is None else keep_attr_dir
        attr = (ATTR_DIRECTORY if is_dir else 0) | int(meta.attrs)
        raw = self._pack_short_entry(entry.short11, attr, first_cluster, size, meta)
        self._write(entry.slot_offsets[-1], raw)

    def _insert_entry(self, dir_cluster: int, name: str, base_attr: int,
                      first_cluster: int, size: int, meta: FileMeta) -> None:
        short11, needs_lfn = self._make_short_name(dir_cluster, name)
        slots_needed = 1
        lfn_records = []
        if needs_lfn:
            lfn_records = self._build_lfn(name, short11)
            slots_needed += len(lfn_records)
        offsets = self._alloc_slots(dir_cluster, slots_needed)
        for offset, raw in zip(offsets[:-1], lfn_records):
            self._write(offset, raw)
        attr = base_attr | int(meta.attrs)
        self._write(offsets[-1], self._pack_short_entry(short11, attr, first_cluster, size, meta))

    def _make_short_name(self, dir_cluster: int, name: str) -> tuple[bytes, bool]:
        """8.3 alias for `name`; returns (11 bytes, whether LFN slots are needed)."""
        if "." in name:
            base, _, ext = name.rpartition(".")
        else:
            base, ext = name, ""
        upper = name.upper()

        def fits_83(b: str, e: str) -> bool:
            if not b or len(b) > 8 or len(e) > 3:
                return False
            return all(ok_char(c) for c in (b + e).encode("ascii", "replace"))

        def ok_char(c: int) -> bool:
            return (0x41 <= c <= 0x5A) or (0x30 <= c <= 0x39) or c in _SHORT_OK

        if name == upper and fits_83(base, ext) and "." not in base:
            return (base.ljust(8) + ext.ljust(3)).encode("ascii"), False

        taken = {e.short11 for e in self._parse_dir(dir_cluster)}
        clean_base = "".join(ch for ch in base.upper().replace(".", "")
                             if ord(ch) < 128 and ok_char(ord(ch)))
        clean_ext = "".join(ch for ch in ext.upper() if ord(ch) < 128 and ok_char(ord(ch)))[:3]
        if not clean_base:
            clean_base = "FILE"
        for n in range(1, 1000000):
            tail = f"~{n}"
            alias = clean_base[:8 - len(tail)] + tail
            short11 = (alias.ljust(8) + clean_ext.ljust(3)).encode("ascii")
            if short11 not in taken:
                return short11, True
        raise InvalidPath(f"cannot derive a unique short name for {name!r}")

    def _build_lfn(self, name: str, short11: bytes) -> list[bytes]:
        """LFN slots in on-disk order (last logical fragment first)."""
        data = name.encode("utf-16le") + b"\x00\x00"
        if len(data) % 26:
            data += b"\xff" * (26 - len(data) % 26)
        chk = lfn_checksum(short11)
        records = []
        count = len(data) // 26
        for seq in range(count, 0, -1):
            chunk = data[(seq - 1) * 26: seq * 26]
            ord_ = seq | (LAST_LONG_ENTRY if seq == count else 0)
            records.append(_LFN_ENTRY.pack(ord_, chunk[:10], ATTR_LONG_NAME, 0, chk,
                                           chunk[10:22], 0, chunk[22:26]))
        return records

    def _alloc_slots(self, dir_cluster: int, count: int) -> list[int]:
        """Find `count` consecutive free directory slots, extending the chain."""
        run: list[int] = []
        for offset, raw in self._dir_slots(dir_cluster):
            if raw[0] in (0x00, 0xE5):
                run.append(offset)
                if len(run) == count:
                    return run
            else:
                run = []
        # extend the directory with zeroed clusters to complete the run
        chain = self.chain(dir_cluster)
        missing = count - len(run)
        slots_per_cluster = self.cluster_size // DIR_ENTRY_SIZE
        extra = -(-missing // slots_per_cluster)
        new_clusters = self._alloc_clusters(extra)
        self._set_fat_entries([(chain[-1], new_clusters[0])])
        for cluster in new_clusters:
            base = self.cluster_offset(cluster)
            self._write(base, b"\x00" * self.cluster_size)
            for j in range(slots_per_cluster):
                run.append(base + j * DIR_ENTRY_SIZE)
                if len(run) == count:
                    return run
        raise VolumeFull("directory extension failed")  # unreachable

    # -- info ------------------------------------------------------------------

    def fsinfo_free_count(self) -> int:
        base = self._bp.fsinfo_sector * SECTOR_SIZE
        raw = self._read(base, SECTOR_SIZE)
        lead, = struct.unpack_from("<I", raw, 0)
        structsig, = struct.unpack_from("<I", raw, 484)
        if lead != FSINFO_LEAD or structsig != FSINFO_STRUCT:
            raise CorruptBootSector("FSINFO signatures invalid")
        return struct.unpack_from("<I", raw, 488)[0]

    def metadata_regions(self) -> list[tuple[int, int]]:
        """Absolute image extents of boot/FSINFO/FAT areas (diff attribution aid)."""
        regions = [(self.volume_offset, self._bp.reserved_sectors * SECTOR_SIZE)]
        for off in self._fat_offsets:
            regions.append((self.volume_offset + off, self._bp.fat_sectors * SECTOR_SIZE))
        return regions


def compute_fat32_geometry(total_sectors: int, sectors_per_cluster: int,
                           reserved: int = 32, num_fats: int = 2) -> tuple[int, int]:
    """Return (fat_sectors, cluster_count) for a volume of the given size."""
    fat_sectors = 1
    for _ in range(64):
        clusters = (total_sectors - reserved - num_fats * fat_sectors) // sectors_per_cluster
        if clusters <= 0:
            raise PartitionTooSmall(f"{total_sectors} sectors cannot hold a FAT32 volume")
        need = -(-(clusters + 2) * 4 // SECTOR_SIZE)
        if need <= fat_sectors:
            break
        fat_sectors = need
    clusters = (total_sectors - reserved - num_fats * fat_sectors) // sectors_per_cluster
    return fat_sectors, clusters


def format_fat32(img, volume_offset: int, volume_length: int,
                 cluster_size: int = 4096, label: str = "") -> None:
    """Write a fresh FAT32 filesystem into the given partition window.

    Refuses layouts below the 65525-cluster FAT32 minimum: mainstream
    drivers type-detect by cluster count and would read anything smaller
    as FAT16.
    """
    if cluster_size % SECTOR_SIZE or not _is_pow2(cluster_size // SECTOR_SIZE) \
            or cluster_size > 128 * SECTOR_SIZE:
        raise InvalidPath(f"cluster size {cluster_size} is not a power-of-two sector multiple")
    spc = cluster_size // SECTOR_SIZE
    total_sectors = volume_length // SECTOR_SIZE
    reserved, num_fats = 32, 2
    fat_sectors, clusters = compute_fat32_geometry(total_sectors, spc, reserved, num_fats)
    if clusters < FAT32_MIN_CLUSTERS:
        raise PartitionTooSmall(
            f"{clusters} clusters after overhead; FAT32 requires {FAT32_MIN_CLUSTERS}")
    logger.debug("formatting FAT32: %d sectors, %d clusters of %d bytes, FAT %d sectors",
                 total_sectors, clusters, cluster_size, fat_sectors)

    label = (label or "NO NAME")[:11].upper()
    volume_id = zlib.crc32(label.encode("ascii", "replace") + total_sectors.to_bytes(8, "little"))

    boot = bytearray(SECTOR_SIZE)
    boot[0:3] = b"\xeb\x58\x90"
    boot[3:11] = b"EVIFORGE"
    struct.pack_into("<H", boot, 11, SECTOR_SIZE)
    boot[13] = spc
    struct.pack_into("<H", boot, 14, reserved)
    boot[16] = num_fats
    struct.pack_into("<H", boot, 17, 0)        # root entries (FAT32: none)
    struct.pack_into("<H", boot, 19, 0)        # total sectors 16
    boot[21] = 0xF8
    struct.pack_into("<H", boot, 22, 0)        # FAT size 16
    struct.pack_into("<H", boot, 24, 63)
    struct.pack_into("<H", boot, 26, 255)
    struct.pack_into("<I", boot, 28, volume_offset // SECTOR_SIZE)
    struct.pack_into("<I", boot, 32, total_sectors)
    struct.pack_into("<I", boot, 36, fat_sectors)
    struct.pack_into("<H", boot, 40, 0)        # ext flags: mirrored FATs
    struct.pack_into("<H", boot, 42, 0)
    struct.pack_into("<I", boot, 44, 2)        # root cluster
    struct.pack_into("<H", boot, 48, 1)        # FSINFO sector
    struct.pack_into("<H", boot, 50, 6)        # backup boot sector
    boot[64] = 0x80
    boot[66] = 0x29
    struct.pack_into("<I", boot, 67, volume_id)
    boot[71:82] = label.ljust(11).encode("ascii", "replace")
    boot[82:90] = b"FAT32   "
    boot[510:512] = b"\x55\xaa"

    fsinfo = bytearray(SECTOR_SIZE)
    struct.pack_into("<I", fsinfo, 0, FSINFO_LEAD)
    struct.pack_into("<I", fsinfo, 484, FSINFO_STRUCT)
    struct.pack_into("<I", fsinfo, 488, clusters - 1)  # root takes cluster 2
    struct.pack_into("<I", fsinfo, 492, 3)
    struct.pack_into("<I", fsinfo, 508, FSINFO_TRAIL)

    def put(sector: int, data: bytes) -> None:
        img.write_at(volume_offset + sector * SECTOR_SIZE, data)

    # zero the whole reserved region, then lay down boot/FSINFO + backups
    put(0, b"\x00" * (reserved * SECTOR_SIZE))
    put(0, bytes(boot))
    put(1, bytes(fsinfo))
    put(6, bytes(boot))
    put(7, bytes(fsinfo))

    fat = bytearray(fat_sectors * SECTOR_SIZE)
    struct.pack_into("<I", fat, 0, 0x0FFFFFF8)   # media descriptor entry
    struct.pack_into("<I", fat, 4, 0x0FFFFFFF)   # end-of-chain marker entry
    struct.pack_into("<I", fat, 8, 0x0FFFFFFF)   # root directory chain
    for i in range(num_fats):
        put(reserved + i * fat_sectors, bytes(fat))

    root_offset = (reserved + num_fats * fat_sectors) * SECTOR_SIZE
    root = bytearray(cluster_size)
    if label.strip():
        root[0:32] = _SHORT_ENTRY.pack(label.ljust(11).encode("ascii", "replace"),
                                       ATTR_VOLUME_ID, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0)
    img.write_at(volume_offset + root_offset, bytes(root))
