"""Diff engine: extract changed artifacts from a base/modified image pair.

The logical half classifies per-path filesystem changes; the physical half
sweeps every sector and emits whatever the logical artifacts do not already
account for as raw block extents. Together they make the diff complete: the
physical artifacts alone rebuild the modified image byte for byte.
"""

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .imgfs import (
    SECTOR_SIZE,
    CorruptDirectory,
    DiskImage,
    FileAttrs,
    FileMeta,
    FsEntry,
    FsVolume,
    fold_path,
    mount_volume,
    parse_partitions,
)
from .imgfs.common import format_ts, parse_ts
from .imgfs.image import MBR_TABLE_OFFSET


class DiffError(Exception):
    pass


class GeometryMismatch(DiffError):
    pass


KIND_ORDER = {
    "file_delete": 0,
    "dir_delete": 1,
    "dir_add": 2,
    "file_add": 3,
    "file_modify": 4,
    "meta_only": 5,
    "block_extent": 6,
}


def hash_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def make_artifact_id(kind: str, key: str, content_ref: Optional[str]) -> str:
    return hashlib.sha256(f"{kind}\x00{key}\x00{content_ref or ''}".encode()).hexdigest()


@dataclass
class ArtifactRecord:
    """One unit of change; which optional fields are set depends on `kind`."""

    artifact_id: str
    kind: str
    path: Optional[str] = None
    volume: Optional[int] = None
    meta: Optional[FileMeta] = None
    content_ref: Optional[str] = None
    size: Optional[int] = None
    extent: Optional[tuple[int, int]] = None
    extents: Optional[list[tuple[int, int, int]]] = None  # (file_off, image_off, len)
    handler: Optional[str] = None

    def sort_key(self):
        if self.kind == "block_extent":
            return (KIND_ORDER[self.kind], self.extent[0], b"")
        path_key = self.path.encode("utf-8")
        if self.kind == "dir_delete":
            # children before parents: deeper (longer) paths first
            return (KIND_ORDER[self.kind], -len(self.path.split("/")), path_key)
        return (KIND_ORDER[self.kind], 0, path_key)

    def to_json(self) -> dict:
        d: dict = {"artifact_id": self.artifact_id, "kind": self.kind}
        if self.path is not None:
            d["path"] = self.path
        if self.volume is not None:
            d["volume"] = self.volume
        if self.meta is not None:
            d["meta"] = {
                "mtime": format_ts(self.meta.mtime),
                "ctime": format_ts(self.meta.ctime),
                "atime": format_ts(self.meta.atime),
                "attrs": self.meta.attrs.to_names(),
            }
        if self.content_ref is not None:
            d["content_ref"] = self.content_ref
        if self.size is not None:
            d["size"] = self.size
        if self.extent is not None:
            d["extent"] = list(self.extent)
        if self.extents is not None:
            d["extents"] = [list(e) for e in self.extents]
        if self.handler is not None:
            d["handler"] = self.handler
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ArtifactRecord":
        meta = None
        if "meta" in d:
            m = d["meta"]
            meta = FileMeta(
                mtime=parse_ts(m["mtime"]),
                ctime=parse_ts(m.get("ctime")),
                atime=parse_ts(m.get("atime")),
                attrs=FileAttrs.from_names(m.get("attrs", [])),
            )
        return cls(
            artifact_id=d["artifact_id"],
            kind=d["kind"],
            path=d.get("path"),
            volume=d.get("volume"),
            meta=meta,
            content_ref=d.get("content_ref"),
            size=d.get("size"),
            extent=tuple(d["extent"]) if "extent" in d else None,
            extents=[tuple(e) for e in d["extents"]] if "extents" in d else None,
            handler=d.get("handler"),
        )


@dataclass
class Geometry:
    byte_length: int
    partition_table_sha256: str

    def to_json(self) -> dict:
        return {"byte_length": self.byte_length,
                "partition_table_sha256": self.partition_table_sha256}

    @classmethod
    def from_json(cls, d: dict) -> "Geometry":
        return cls(d["byte_length"], d["partition_table_sha256"])


@dataclass
class DiffReport:
    artifacts: list[ArtifactRecord]
    base_image_hash: str
    modified_image_hash: str
    geometry: Geometry
    blobs: dict[str, bytes] = field(default_factory=dict)

    @property
    def stats(self) -> dict:
        counts: dict[str, int] = {}
        for a in self.artifacts:
            counts[a.kind] = counts.get(a.kind, 0) + 1
        return {"counts": counts,
                "blob_bytes": sum(len(b) for b in self.blobs.values())}


def _meta_equal(a: FileMeta, b: FileMeta) -> bool:
    return (a.mtime == b.mtime and a.ctime == b.ctime
            and a.atime == b.atime and a.attrs == b.attrs)


def _logical_artifact(kind: str, path: str, volume: int, *, meta=None,
                      content_ref=None, size=None, extents=None) -> ArtifactRecord:
    return ArtifactRecord(
        artifact_id=make_artifact_id(kind, path, content_ref),
        kind=kind, path=path, volume=volume, meta=meta,
        content_ref=content_ref, size=size, extents=extents,
    )


def diff_volumes(base_vol: FsVolume, mod_vol: FsVolume, volume_index: int = 0,
                 blobs: Optional[dict[str, bytes]] = None) -> list[ArtifactRecord]:
    """Classify per-path changes between two mounted volumes of the same kind.

    Corruption in either tree is raised, never dropped: a diff over a broken
    directory walk would silently lose artifacts.
    """
    if base_vol.fs_kind != mod_vol.fs_kind:
        raise GeometryMismatch(
            f"volume kinds differ: {base_vol.fs_kind} vs {mod_vol.fs_kind}")
    walk_errors: list[CorruptDirectory] = []
    base_entries = {fold_path(e.path): e for e in base_vol.list_entries(errors=walk_errors)}
    mod_entries = {fold_path(e.path): e for e in mod_vol.list_entries(errors=walk_errors)}
    if walk_errors:
        raise walk_errors[0]

    if blobs is None:
        blobs = {}
    artifacts: list[ArtifactRecord] = []

    def add_content(kind: str, entry: FsEntry) -> ArtifactRecord:
        content = mod_vol.read_file(entry.path)
        ref = hash_bytes(content)
        blobs[ref] = content
        runs = mod_vol.content_runs(entry.path)
        return _logical_artifact(kind, entry.path, volume_index, meta=entry.meta,
                                 content_ref=ref, size=entry.size, extents=runs)

    for key, entry in mod_entries.items():
        base_entry = base_entries.get(key)
        if base_entry is not None and base_entry.kind == entry.kind:
            continue
        if base_entry is not None:
            # kind flip: the old object must be deleted before the new appears
            old_kind = "file_delete" if base_entry.kind == "file" else "dir_delete"
            artifacts.append(_logical_artifact(old_kind, base_entry.path, volume_index))
        if entry.is_dir:
            artifacts.append(_logical_artifact("dir_add", entry.path, volume_index,
                                               meta=entry.meta))
        else:
            artifacts.append(add_content("file_add", entry))

    for key, base_entry in base_entries.items():
        if key in mod_entries:
            continue
        kind = "file_delete" if base_entry.kind == "file" else "dir_delete"
        artifacts.append(_logical_artifact(kind, base_entry.path, volume_index))

    for key, entry in mod_entries.items():
        base_entry = base_entries.get(key)
        if base_entry is None or base_entry.kind != entry.kind:
            continue
        if entry.kind == "file":
            if (entry.size != base_entry.size
                    or mod_vol.read_file(entry.path) != base_vol.read_file(base_entry.path)):
                artifacts.append(add_content("file_modify", entry))
                continue
        if not _meta_equal(entry.meta, base_entry.meta):
            artifacts.append(_logical_artifact("meta_only", entry.path, volume_index,
                                               meta=entry.meta))

    artifacts.sort(key=ArtifactRecord.sort_key)
    return artifacts


def _differing_sectors(base: DiskImage, modified: DiskImage) -> np.ndarray:
    """Boolean array: one flag per 512-byte sector that differs."""
    total_sectors = base.byte_length // SECTOR_SIZE
    differs = np.zeros(total_sectors, dtype=bool)
    chunk = 8 * 1024 * 1024
    for offset in range(0, base.byte_length, chunk):
        length = min(chunk, base.byte_length - offset)
        a = base.read_at(offset, length)
        b = modified.read_at(offset, length)
        if a == b:
            continue
        av = np.frombuffer(a, dtype=np.uint8)
        bv = np.frombuffer(b, dtype=np.uint8)
        sector_diff = (av != bv).reshape(-1, SECTOR_SIZE).any(axis=1)
        differs[offset // SECTOR_SIZE: offset // SECTOR_SIZE + length // SECTOR_SIZE] = sector_diff
    return differs


def sector_residue(base: DiskImage, modified: DiskImage,
                   logical_artifacts: list[ArtifactRecord],
                   blobs: dict[str, bytes],
                   differs: Optional[np.ndarray] = None) -> list[ArtifactRecord]:
    """Emit changed sectors not fully covered by any artifact's content bytes.

    A sector counts as covered only when it lies entirely inside the content
    byte range of a file_add/file_modify artifact; boundary sectors holding
    slack stay in the residue so physical reconstruction is exact.
    """
    if differs is None:
        differs = _differing_sectors(base, modified)
    owned = np.zeros(len(differs), dtype=bool)
    for artifact in logical_artifacts:
        if artifact.kind not in ("file_add", "file_modify") or not artifact.extents:
            continue
        for _file_off, img_off, length in artifact.extents:
            first = -(-img_off // SECTOR_SIZE)  # ceil: partial head sector not owned
            last = (img_off + length) // SECTOR_SIZE
            if last > first:
                owned[first:last] = True

    residue = differs & ~owned
    artifacts = []
    indices = np.flatnonzero(residue)
    if len(indices) == 0:
        return artifacts
    run_starts = np.flatnonzero(np.diff(indices, prepend=indices[0] - 2) != 1)
    run_bounds = list(run_starts) + [len(indices)]
    for i in range(len(run_bounds) - 1):
        first = int(indices[run_bounds[i]])
        last = int(indices[run_bounds[i + 1] - 1])
        offset = first * SECTOR_SIZE
        length = (last - first + 1) * SECTOR_SIZE
        data = modified.read_at(offset, length)
        ref = hash_bytes(data)
        blobs[ref] = data
        artifacts.append(ArtifactRecord(
            artifact_id=make_artifact_id("block_extent", str(offset), ref),
            kind="block_extent", extent=(offset, length),
            content_ref=ref, size=length,
        ))
    return artifacts


def diff_images(base: DiskImage, modified: DiskImage,
                include_residue: bool = True) -> DiffReport:
    """Full-image diff: per-volume logical artifacts plus sector residue."""
    if base.byte_length != modified.byte_length:
        raise GeometryMismatch(
            f"image sizes differ: {base.byte_length} vs {modified.byte_length}")
    if base.byte_length >= SECTOR_SIZE:
        base_table = base.read_at(MBR_TABLE_OFFSET, 64)
        mod_table = modified.read_at(MBR_TABLE_OFFSET, 64)
        if base_table != mod_table:
            raise GeometryMismatch("partition tables differ")
    geometry = Geometry(
        byte_length=base.byte_length,
        partition_table_sha256=hash_bytes(
            base.read_at(MBR_TABLE_OFFSET, 64) if base.byte_length >= SECTOR_SIZE else b""),
    )

    blobs: dict[str, bytes] = {}
    logical: list[ArtifactRecord] = []
    for part in parse_partitions(base):
        base_vol = mount_volume(base, part)
        mod_vol = mount_volume(modified, part)
        logical.extend(diff_volumes(base_vol, mod_vol, part.index, blobs))

    artifacts = list(logical)
    if include_residue:
        artifacts.extend(sector_residue(base, modified, logical, blobs))
    artifacts.sort(key=ArtifactRecord.sort_key)

    used = {a.content_ref for a in artifacts if a.content_ref}
    blobs = {ref: blob for ref, blob in blobs.items() if ref in used}
    return DiffReport(
        artifacts=artifacts,
        base_image_hash=base.content_hash,
        modified_image_hash=modified.content_hash,
        geometry=geometry,
        blobs=blobs,
    )
