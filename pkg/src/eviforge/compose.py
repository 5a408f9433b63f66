"""Combine packages into story-mode challenges, retarget times, build chains.

Collision policy is pinned to last-package-wins: logical artifacts collide on
their uppercase-folded path, raw extents collide byte by byte and are split
so later bytes survive. Composition of packages diffed against one shared
base is therefore equivalent to injecting them sequentially.
"""

import uuid
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Optional

from . import handlers
from .diffing import ArtifactRecord, make_artifact_id
from .imgfs import DiskImage, fold_path, sparse_copy
from .imgfs.common import FAT_EPOCH, FAT_MAX, clamp_fat_range
from .inject import BaseMismatch, inject_physical
from .package import (
    AnswerKey,
    AnswerKeyEntry,
    EvidencePackage,
    hash_blob,
)


class ComposeError(Exception):
    pass


class IncompatibleKinds(ComposeError):
    pass


class TimestampOutOfRange(ComposeError):
    pass


class ChainBroken(ComposeError):
    pass


_DELETE_KINDS = ("file_delete", "dir_delete")


@dataclass
class CompositionPlan:
    """Resolved merge: which artifact survives each collision, and from where."""

    inputs: list[EvidencePackage]
    collision_policy: str = "last_wins"
    labels: set[str] = field(default_factory=set)
    survivors: list[tuple[ArtifactRecord, str]] = field(default_factory=list)
    provenance: dict[str, str] = field(default_factory=dict)  # artifact_id -> package_id


def _check_base_lineage(packages: list[EvidencePackage]) -> tuple[str, Optional[str]]:
    """All inputs share a base, or each chains onto its predecessor's output."""
    first = packages[0]
    for prev, cur in zip(packages, packages[1:]):
        if cur.base_image_hash == first.base_image_hash:
            continue
        if cur.base_image_hash == prev.snapshot_hash and prev.snapshot_hash is not None:
            continue
        raise BaseMismatch(
            f"package {cur.package_id} has base {cur.base_image_hash}, expected "
            f"{first.base_image_hash} (shared) or {prev.snapshot_hash} (chained)")
    chained = any(p.base_image_hash != first.base_image_hash for p in packages[1:])
    snapshot = packages[-1].snapshot_hash if chained else None
    return first.base_image_hash, snapshot


@dataclass
class _Write:
    """One physical byte-range write, in concatenated application order."""

    start: int
    end: int
    blob_ref: str
    blob_offset: int  # position of `start` within the blob
    package_id: str
    surviving_content: Optional[str]  # artifact_id when this is a survivor's body


def _overlay_block_extents(packages: list[EvidencePackage],
                           surviving_ids: set[str],
                           blobs: dict[str, bytes]) -> list[tuple[ArtifactRecord, str]]:
    """Compute composed raw extents so injection matches sequential injection.

    Every physical write the inputs would perform (file bodies at their
    recorded extents, then raw residue extents, package by package) is
    overlaid byte-wise; the latest write owns each byte. Bytes whose final
    owner is a surviving artifact's own body are reproduced by the content
    phase of injection and are dropped from the residue, unless another
    survivor's extents also cover them (the residue then pins the winner).
    """
    writes: list[_Write] = []
    for pkg in packages:
        for artifact in pkg.artifacts:
            if artifact.kind in ("file_add", "file_modify") and artifact.extents:
                surviving = artifact.artifact_id if artifact.artifact_id in surviving_ids else None
                for file_off, img_off, length in artifact.extents:
                    writes.append(_Write(img_off, img_off + length,
                                         artifact.content_ref, file_off,
                                         pkg.package_id, surviving))
            elif artifact.kind == "block_extent":
                offset, length = artifact.extent
                writes.append(_Write(offset, offset + length,
                                     artifact.content_ref, 0, pkg.package_id, None))
    if not writes:
        return []

    bounds = sorted({w.start for w in writes} | {w.end for w in writes})
    segments: list[tuple[int, int, _Write]] = []
    for lo, hi in zip(bounds, bounds[1:]):
        owner = None
        cover = set()
        for w in writes:  # later writes win: keep scanning forward
            if w.start <= lo and hi <= w.end:
                owner = w
                if w.surviving_content:
                    cover.add(w.surviving_content)
        if owner is None:
            continue
        if owner.surviving_content and len(cover) == 1:
            continue  # the content phase alone reproduces these bytes
        segments.append((lo, hi, owner))

    out: list[tuple[ArtifactRecord, str]] = []
    pending = None

    def flush():
        if pending is None:
            return
        lo, hi, owner = pending
        blob = blobs[owner.blob_ref]
        data = blob[owner.blob_offset + lo - owner.start:
                    owner.blob_offset + hi - owner.start]
        ref = hash_blob(data)
        blobs.setdefault(ref, data)
        out.append((ArtifactRecord(
            artifact_id=make_artifact_id("block_extent", str(lo), ref),
            kind="block_extent", extent=(lo, hi - lo), content_ref=ref,
            size=hi - lo), owner.package_id))

    for lo, hi, owner in segments:
        if pending is not None and pending[1] == lo and pending[2] is owner:
            pending = (pending[0], hi, owner)
        else:
            flush()
            pending = (lo, hi, owner)
    flush()
    return out


def _plan_composition(packages: list[EvidencePackage], labels,
                      allow_kind_conflicts: bool,
                      blobs: dict[str, bytes]) -> CompositionPlan:
    """Resolve collisions into a survivor list with total provenance.

    Per (volume, folded path) one "node" op and one delete slot are tracked
    with concatenation indices, so whichever came later cancels the other;
    raw extents go through the byte-granular overlay.
    """
    plan = CompositionPlan(inputs=list(packages),
                           labels=set(labels) if labels is not None
                           else set().union(*(p.labels for p in packages)))
    node_slot: dict = {}
    delete_slot: dict = {}
    index = 0
    for pkg in packages:
        for artifact in pkg.artifacts:
            index += 1
            if artifact.content_ref is not None:
                blobs.setdefault(artifact.content_ref, pkg.blobs[artifact.content_ref])
            if artifact.kind == "block_extent":
                continue
            key = (artifact.volume or 0, fold_path(artifact.path))
            if artifact.kind in _DELETE_KINDS:
                delete_slot[key] = (index, artifact, pkg.package_id)
            else:
                prev = node_slot.get(key)
                if prev is not None and not allow_kind_conflicts:
                    prev_dir = prev[1].kind == "dir_add"
                    cur_dir = artifact.kind == "dir_add"
                    if prev_dir != cur_dir and prev[2] != pkg.package_id:
                        raise IncompatibleKinds(
                            f"{artifact.path}: file in one package, directory in another "
                            f"(pass allow_kind_conflicts to let the latest win)")
                node_slot[key] = (index, artifact, pkg.package_id)

    for key, (idx, artifact, source) in node_slot.items():
        dele = delete_slot.get(key)
        if dele is not None and dele[0] > idx:
            continue  # deleted after the add: only the delete survives
        plan.survivors.append((artifact, source))
    for key, (idx, artifact, source) in delete_slot.items():
        node = node_slot.get(key)
        if node is not None and node[0] > idx:
            continue  # re-added after the delete
        plan.survivors.append((artifact, source))
    surviving_content = {a.artifact_id for a, _ in plan.survivors
                         if a.kind in ("file_add", "file_modify")}
    plan.survivors.extend(_overlay_block_extents(packages, surviving_content, blobs))
    plan.provenance = {a.artifact_id: src for a, src in plan.survivors}
    return plan


def compose(packages: list[EvidencePackage], labels: Optional[set[str]] = None,
            allow_kind_conflicts: bool = False) -> EvidencePackage:
    """Merge packages in order under last-wins collision resolution.

    Returns a package whose injection reproduces sequential injection of the
    inputs. Answer keys merge with per-entry provenance; blobs dedup by hash.
    """
    if not packages:
        raise ComposeError("compose needs at least one package")
    base_hash, snapshot_hash = _check_base_lineage(packages)
    for pkg in packages[1:]:
        if packages[0].geometry and pkg.geometry and pkg.geometry != packages[0].geometry:
            raise BaseMismatch("package geometries differ")

    blobs: dict[str, bytes] = {}
    plan = _plan_composition(packages, labels, allow_kind_conflicts, blobs)

    artifacts = [a for a, _ in plan.survivors]
    artifacts.sort(key=ArtifactRecord.sort_key)
    provenance = plan.provenance

    surviving_ids = {a.artifact_id for a in artifacts}
    merged_key = AnswerKey(
        scenario="\n---\n".join(p.answer_key.scenario for p in packages
                                if p.answer_key.scenario),
        entries=[],
    )
    for pkg in packages:
        for entry in pkg.answer_key.entries:
            if entry.artifact_id in surviving_ids:
                merged_key.entries.append(AnswerKeyEntry(
                    artifact_id=entry.artifact_id, narrative=entry.narrative,
                    pertinent=entry.pertinent,
                    source_package_id=entry.source_package_id or pkg.package_id))

    used = {a.content_ref for a in artifacts if a.content_ref}
    return EvidencePackage(
        package_id=str(uuid.uuid4()),
        base_image_hash=base_hash,
        created_at=datetime.now(timezone.utc).replace(microsecond=0, tzinfo=None),
        labels=plan.labels,
        artifacts=artifacts,
        answer_key=merged_key,
        blobs={ref: blobs[ref] for ref in sorted(used)},
        parent_snapshot_hash=packages[0].parent_snapshot_hash,
        snapshot_hash=snapshot_hash,
        geometry=packages[0].geometry,
        provenance=provenance,
    )


def retarget_time(pkg: EvidencePackage, delta_seconds: int, *,
                  clamp: bool = True,
                  warnings: Optional[list] = None) -> EvidencePackage:
    """Shift all artifact timestamps; handler-tagged contents are rewritten.

    Timestamps that leave the FAT-representable range are clamped (and
    reported through `warnings`) unless clamping is disabled, in which case
    TimestampOutOfRange is raised. Untagged contents stay byte-identical, so
    the resulting package remains faithful for logical injection; the raw
    residue extents still encode the original on-disk times.
    """
    notes = warnings if warnings is not None else []
    new_artifacts: list[ArtifactRecord] = []
    new_blobs: dict[str, bytes] = {}
    id_map: dict[str, str] = {}

    for artifact in pkg.artifacts:
        updated = replace(artifact)
        if artifact.meta is not None:
            shifted = artifact.meta.shifted(delta_seconds)
            for kind_name in ("mtime", "ctime", "atime"):
                value = getattr(shifted, kind_name)
                if value is None:
                    continue
                if value < FAT_EPOCH or value > FAT_MAX:
                    if not clamp:
                        raise TimestampOutOfRange(
                            f"{artifact.path}: {kind_name} {value} outside FAT range")
                    notes.append(f"{artifact.path}: {kind_name} clamped to FAT range")
                    setattr(shifted, kind_name, clamp_fat_range(value))
            updated.meta = shifted
        if artifact.handler and artifact.content_ref is not None:
            transform = handlers.get_handler(artifact.handler)
            if transform is None:
                notes.append(f"{artifact.path}: unknown handler {artifact.handler!r}, "
                             "treated as black box")
            else:
                try:
                    rewritten = transform(pkg.blobs[artifact.content_ref], delta_seconds)
                    ref = hash_blob(rewritten)
                    new_blobs[ref] = rewritten
                    updated.content_ref = ref
                    updated.size = len(rewritten)
                    key = updated.path if updated.path else str(updated.extent[0])
                    updated.artifact_id = make_artifact_id(updated.kind, key, ref)
                except handlers.Unparseable as exc:
                    notes.append(f"{artifact.path}: handler {artifact.handler!r} "
                                 f"could not parse content ({exc}); black box")
        if updated.content_ref is not None and updated.content_ref not in new_blobs:
            new_blobs[updated.content_ref] = pkg.blobs[updated.content_ref]
        id_map[artifact.artifact_id] = updated.artifact_id
        new_artifacts.append(updated)

    key = AnswerKey(
        scenario=pkg.answer_key.scenario,
        entries=[AnswerKeyEntry(id_map.get(e.artifact_id, e.artifact_id),
                                e.narrative, e.pertinent, e.source_package_id)
                 for e in pkg.answer_key.entries],
    )
    provenance = None
    if pkg.provenance is not None:
        provenance = {id_map.get(aid, aid): src for aid, src in pkg.provenance.items()}
    used = {a.content_ref for a in new_artifacts if a.content_ref}
    return EvidencePackage(
        package_id=str(uuid.uuid4()),
        base_image_hash=pkg.base_image_hash,
        created_at=datetime.now(timezone.utc).replace(microsecond=0, tzinfo=None),
        labels=set(pkg.labels),
        artifacts=new_artifacts,
        answer_key=key,
        blobs={ref: new_blobs[ref] for ref in sorted(used)},
        parent_snapshot_hash=pkg.parent_snapshot_hash,
        snapshot_hash=pkg.snapshot_hash if delta_seconds == 0 else None,
        geometry=pkg.geometry,
        provenance=provenance,
    )


# -- snapshot chains ---------------------------------------------------------


@dataclass
class SnapshotChain:
    """Hash-linked incremental packages: p_i diffs snapshot i-1 to snapshot i."""

    base_hash: str
    packages: list[EvidencePackage] = field(default_factory=list)

    def validate(self) -> None:
        expected_parent = self.base_hash
        for i, pkg in enumerate(self.packages, start=1):
            if pkg.parent_snapshot_hash != expected_parent:
                raise ChainBroken(
                    f"link {i}: parent hash {pkg.parent_snapshot_hash} != "
                    f"predecessor output {expected_parent}")
            if pkg.base_image_hash != expected_parent:
                raise ChainBroken(
                    f"link {i}: package was not diffed against its predecessor")
            if pkg.snapshot_hash is None:
                raise ChainBroken(f"link {i}: package lacks a snapshot hash")
            expected_parent = pkg.snapshot_hash

    @classmethod
    def from_packages(cls, base_hash: str, packages: list[EvidencePackage]) -> "SnapshotChain":
        chain = cls(base_hash=base_hash, packages=list(packages))
        chain.validate()
        return chain


def build_chain(snapshots: list[DiskImage],
                labels: Optional[set[str]] = None) -> SnapshotChain:
    """Diff consecutive snapshots s0..sk into a chain of k packages."""
    from .diffing import diff_images
    from .package import build_package

    if not snapshots:
        raise ComposeError("build_chain needs at least the base snapshot")
    chain = SnapshotChain(base_hash=snapshots[0].content_hash)
    for prev, cur in zip(snapshots, snapshots[1:]):
        report = diff_images(prev, cur)
        pkg = build_package(report, labels=labels,
                            parent_snapshot_hash=prev.content_hash)
        chain.packages.append(pkg)
    chain.validate()
    return chain


compose_packages = compose  # import-friendly alias: `compose` also names this module


def reconstruct(base: DiskImage, chain: SnapshotChain, k: int,
                output_path: str) -> DiskImage:
    """Rebuild snapshot k by physically injecting the first k chain packages."""
    if not 0 <= k <= len(chain.packages):
        raise ComposeError(f"k={k} outside chain of length {len(chain.packages)}")
    chain.validate()
    if base.content_hash != chain.base_hash:
        raise ChainBroken(
            f"base image hash {base.content_hash} != chain base {chain.base_hash}")
    sparse_copy(base.source, output_path)
    out = DiskImage(output_path, writable=True)
    for i, pkg in enumerate(chain.packages[:k], start=1):
        try:
            outcome = inject_physical(out, pkg)
        except BaseMismatch as exc:
            out.close()
            raise ChainBroken(f"step {i}: {exc}") from exc
        if outcome.output_image_hash != pkg.snapshot_hash:
            out.close()
            raise ChainBroken(
                f"step {i}: reconstructed hash {outcome.output_image_hash} != "
                f"recorded snapshot {pkg.snapshot_hash}")
    return out
