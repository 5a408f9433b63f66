"""Plant evidence packages into base-image copies and verify the result.

Both modes run host-side against the image file. Logical mode applies each
artifact through the filesystem layer; physical mode writes bytes at the
recorded image offsets without interpreting any filesystem structure. Either
way the work happens on a scratch copy that atomically replaces the target,
so a failed injection leaves the input image bit-identical.
"""

import os
from dataclasses import dataclass, field
from typing import Optional

from .imgfs import (
    DirectoryNotEmpty,
    DiskImage,
    FileMeta,
    FsVolume,
    IsDirectory,
    NotFound,
    UnsupportedFilesystem,
    mount_volume,
    parse_partitions,
    sparse_copy,
    truncate_atime,
    truncate_ctime,
    truncate_mtime,
)
from .package import EvidencePackage, hash_blob


class InjectError(Exception):
    pass


class BaseMismatch(InjectError):
    pass


class ExtentOutOfBounds(InjectError):
    pass


@dataclass
class InjectionOutcome:
    mode: str
    applied: dict[str, int] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)
    overwrites: list[str] = field(default_factory=list)
    output_image_hash: str = ""

    def _count(self, kind: str) -> None:
        self.applied[kind] = self.applied.get(kind, 0) + 1


def _volumes_by_index(img: DiskImage) -> dict[int, FsVolume]:
    return {part.index: mount_volume(img, part) for part in parse_partitions(img)}


def _scratch_apply(base_copy: DiskImage, apply_fn) -> str:
    """Run apply_fn against a scratch copy, then atomically swap it in."""
    scratch = base_copy.source + ".inject-tmp"
    sparse_copy(base_copy.source, scratch)
    try:
        with DiskImage(scratch, writable=True) as work:
            apply_fn(work)
            work.flush()
            output_hash = work.content_hash
        os.replace(scratch, base_copy.source)
    except BaseException:
        if os.path.exists(scratch):
            os.unlink(scratch)
        raise
    base_copy.reopen()
    return output_hash


def inject_logical(base_copy: DiskImage, pkg: EvidencePackage,
                   allow_base_mismatch: bool = False) -> InjectionOutcome:
    """Apply artifacts through filesystem semantics, in manifest order.

    Conflicting paths are resolved in the package's favor; raw block extents
    carry no filesystem meaning and are skipped (recorded in the outcome).
    """
    if not base_copy.writable:
        raise InjectError("target image must be opened read-write")
    if not allow_base_mismatch and base_copy.content_hash != pkg.base_image_hash:
        raise BaseMismatch(
            f"image hash {base_copy.content_hash} != package base {pkg.base_image_hash}")
    outcome = InjectionOutcome(mode="logical")

    def apply(work: DiskImage):
        volumes = _volumes_by_index(work)

        def volume_for(artifact) -> FsVolume:
            vol = volumes.get(artifact.volume or 0)
            if vol is None:
                raise UnsupportedFilesystem(f"no volume {artifact.volume} in target image")
            if vol.fs_kind != "FAT32":
                raise UnsupportedFilesystem(
                    f"logical injection needs a writable FAT32 volume, got {vol.fs_kind}")
            return vol

        for artifact in pkg.artifacts:
            kind = artifact.kind
            if kind == "block_extent":
                outcome.skipped.append(f"block_extent@{artifact.extent[0]}: logical mode")
                continue
            vol = volume_for(artifact)
            if kind in ("file_add", "file_modify"):
                blob = pkg.blobs[artifact.content_ref]
                existed = _exists(vol, artifact.path)
                if existed == "dir":
                    try:
                        vol.delete_entry(artifact.path)
                    except DirectoryNotEmpty:
                        outcome.skipped.append(f"{artifact.path}: directory in the way")
                        continue
                vol.write_file(artifact.path, blob, artifact.meta)
                if existed:
                    outcome.overwrites.append(artifact.path)
                outcome._count(kind)
            elif kind == "dir_add":
                existed = _exists(vol, artifact.path)
                if existed == "file":
                    vol.delete_entry(artifact.path)
                    outcome.overwrites.append(artifact.path)
                vol.make_dir(artifact.path, artifact.meta)
                vol.set_metadata(artifact.path, artifact.meta)
                outcome._count(kind)
            elif kind in ("file_delete", "dir_delete"):
                existed = _exists(vol, artifact.path)
                if not existed:
                    outcome._count(kind)  # vacuously applied
                    continue
                try:
                    vol.delete_entry(artifact.path)
                except DirectoryNotEmpty:
                    outcome.skipped.append(f"{artifact.path}: directory not empty")
                    continue
                outcome.overwrites.append(artifact.path)
                outcome._count(kind)
            elif kind == "meta_only":
                if not _exists(vol, artifact.path):
                    outcome.skipped.append(f"{artifact.path}: no such path for meta_only")
                    continue
                vol.set_metadata(artifact.path, artifact.meta)
                outcome.overwrites.append(artifact.path)
                outcome._count(kind)
            else:
                outcome.skipped.append(f"{artifact.artifact_id}: unknown kind {kind}")

    outcome.output_image_hash = _scratch_apply(base_copy, apply)
    return outcome


def _exists(vol: FsVolume, path: str) -> Optional[str]:
    try:
        return vol.get_entry(path).kind
    except (NotFound, IsDirectory):
        return None


def inject_physical(base_copy: DiskImage, pkg: EvidencePackage, *,
                    enforce_base: bool = True) -> InjectionOutcome:
    """Write artifact bytes at their recorded offsets, byte-exact.

    Offsets are only meaningful against the exact base, so the hash check
    has no user-facing override. `enforce_base=False` exists solely for
    sequential application of same-base packages (the composition
    fold-equivalence), where later writes deliberately land on an image
    already carrying earlier packages. Deletions carry no extents; their
    on-disk effect rides in the block_extent residue.
    """
    if not base_copy.writable:
        raise InjectError("target image must be opened read-write")
    if enforce_base and base_copy.content_hash != pkg.base_image_hash:
        raise BaseMismatch(
            f"image hash {base_copy.content_hash} != package base {pkg.base_image_hash}")

    writes: list[tuple[int, bytes, str, str]] = []  # (offset, data, kind, label)
    for artifact in pkg.artifacts:
        if artifact.kind in ("file_add", "file_modify") and artifact.extents:
            blob = pkg.blobs[artifact.content_ref]
            for file_off, img_off, length in artifact.extents:
                writes.append((img_off, blob[file_off:file_off + length],
                               artifact.kind, artifact.path))
        elif artifact.kind == "block_extent":
            blob = pkg.blobs[artifact.content_ref]
            offset, length = artifact.extent
            if len(blob) != length:
                raise ExtentOutOfBounds(
                    f"block_extent blob is {len(blob)} bytes, extent declares {length}")
            writes.append((offset, blob, artifact.kind, f"@{offset}"))
    for offset, data, _, label in writes:
        if offset < 0 or offset + len(data) > base_copy.byte_length:
            raise ExtentOutOfBounds(
                f"{label}: extent {offset}+{len(data)} exceeds image of {base_copy.byte_length}")

    outcome = InjectionOutcome(mode="physical")

    def apply(work: DiskImage):
        counted: set[str] = set()
        for artifact in pkg.artifacts:
            if artifact.kind not in ("file_add", "file_modify", "block_extent"):
                outcome._count(artifact.kind)  # applied via residue, nothing to write
        for offset, data, kind, label in writes:
            if data and work.read_at(offset, len(data)) != data:
                outcome.overwrites.append(label)
            work.write_at(offset, data)
            if label not in counted:
                counted.add(label)
                outcome._count(kind)

    outcome.output_image_hash = _scratch_apply(base_copy, apply)
    return outcome


# -- verification ---------------------------------------------------------------


@dataclass
class ArtifactCheck:
    artifact_id: str
    kind: str
    subject: str
    passed: bool
    problems: list[str] = field(default_factory=list)


@dataclass
class VerificationReport:
    checks: list[ArtifactCheck] = field(default_factory=list)

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failed(self) -> list[ArtifactCheck]:
        return [c for c in self.checks if not c.passed]

    def to_json(self) -> dict:
        return {
            "all_passed": self.all_passed,
            "checks": [
                {"artifact_id": c.artifact_id, "kind": c.kind, "subject": c.subject,
                 "passed": c.passed, "problems": c.problems}
                for c in self.checks
            ],
        }


def _meta_matches(vol: FsVolume, actual: FileMeta, expected: FileMeta) -> list[str]:
    problems = []
    if vol.fs_kind == "FAT32":
        want_mtime = truncate_mtime(expected.mtime)
        want_ctime = truncate_ctime(expected.ctime) if expected.ctime else None
        want_atime = truncate_atime(expected.atime) if expected.atime else None
    else:
        want_mtime, want_ctime, want_atime = expected.mtime, expected.ctime, expected.atime
    if actual.mtime != want_mtime:
        problems.append(f"mtime {actual.mtime} != {want_mtime}")
    if actual.ctime != want_ctime:
        problems.append(f"ctime {actual.ctime} != {want_ctime}")
    if actual.atime != want_atime:
        problems.append(f"atime {actual.atime} != {want_atime}")
    if actual.attrs != expected.attrs:
        problems.append(f"attrs {actual.attrs!r} != {expected.attrs!r}")
    return problems


def verify_injection(image: DiskImage, pkg: EvidencePackage,
                     mode: str = "physical") -> VerificationReport:
    """Check each artifact against the image; failures are report content.

    In logical mode block_extent artifacts pass vacuously: logical injection
    never applies them, and the image's raw layout legitimately differs.
    """
    report = VerificationReport()
    try:
        volumes = _volumes_by_index(image)
    except Exception:
        volumes = {}

    for artifact in pkg.artifacts:
        subject = artifact.path if artifact.path else f"extent@{artifact.extent[0]}"
        check = ArtifactCheck(artifact.artifact_id, artifact.kind, subject, True)
        report.checks.append(check)
        if artifact.kind == "block_extent" and mode == "logical":
            continue
        vol = volumes.get(artifact.volume or 0) if artifact.kind != "block_extent" else None
        if artifact.kind != "block_extent" and vol is None:
            check.passed = False
            check.problems.append(f"volume {artifact.volume} not mountable")
            continue

        if artifact.kind in ("file_add", "file_modify"):
            kind = _exists(vol, artifact.path)
            if kind != "file":
                check.problems.append("file missing" if kind is None else "path is a directory")
            else:
                content = vol.read_file(artifact.path)
                if hash_blob(content) != artifact.content_ref:
                    check.problems.append("content hash mismatch")
                entry = vol.get_entry(artifact.path)
                check.problems.extend(_meta_matches(vol, entry.meta, artifact.meta))
        elif artifact.kind == "dir_add":
            kind = _exists(vol, artifact.path)
            if kind != "dir":
                check.problems.append("directory missing" if kind is None else "path is a file")
            else:
                entry = vol.get_entry(artifact.path)
                check.problems.extend(_meta_matches(vol, entry.meta, artifact.meta))
        elif artifact.kind == "file_delete":
            if _exists(vol, artifact.path) == "file":
                check.problems.append("file still present")
        elif artifact.kind == "dir_delete":
            if _exists(vol, artifact.path) == "dir":
                check.problems.append("directory still present")
        elif artifact.kind == "meta_only":
            kind = _exists(vol, artifact.path)
            if kind is None:
                check.problems.append("path missing")
            else:
                entry = vol.get_entry(artifact.path)
                check.problems.extend(_meta_matches(vol, entry.meta, artifact.meta))
        elif artifact.kind == "block_extent":
            offset, length = artifact.extent
            if offset < 0 or offset + length > image.byte_length:
                check.problems.append("extent out of image bounds")
            else:
                data = image.read_at(offset, length)
                if hash_blob(data) != artifact.content_ref:
                    check.problems.append("extent bytes differ")
        else:
            check.problems.append(f"unknown kind {artifact.kind}")
        check.passed = not check.problems
    return report
