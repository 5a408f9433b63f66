"""Evidence package container: manifest + content-addressed blobs + answer key.

On-disk layout (".evpkg"): magic "EVIPKG01", format version u16 LE,
manifest length u64 LE, canonical-JSON manifest, blob count u32 LE, then per
blob [sha-256 raw (32) | compressed length u64 LE | raw-DEFLATE bytes], and
a trailing CRC-32 (IEEE, u32 LE) over everything before it. Blobs are
compressed individually and ordered by hash so containers are byte
reproducible and a registry can dedup and transfer them independently.
"""

import hashlib
import json
import struct
import uuid
import zlib
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Optional

from .diffing import ArtifactRecord, DiffReport, Geometry

MAGIC = b"EVIPKG01"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sHQ")
_BLOB_HEADER = struct.Struct("<32sQ")
_DEFLATE_LEVEL = 6


class PackageError(Exception):
    pass


class BadMagic(PackageError):
    pass


class UnsupportedVersion(PackageError):
    pass


class ChecksumMismatch(PackageError):
    pass


class TruncatedContainer(PackageError):
    pass


class MalformedManifest(PackageError):
    pass


class DanglingReference(PackageError):
    pass


def hash_blob(data: bytes) -> str:
    """SHA-256 hex digest; the content address used everywhere."""
    return hashlib.sha256(data).hexdigest()


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      ensure_ascii=False).encode("utf-8")


@dataclass
class AnswerKeyEntry:
    artifact_id: str
    narrative: str
    pertinent: bool
    source_package_id: Optional[str] = None

    def to_json(self) -> dict:
        d = {"artifact_id": self.artifact_id, "narrative": self.narrative,
             "pertinent": self.pertinent}
        if self.source_package_id is not None:
            d["source_package_id"] = self.source_package_id
        return d

    @classmethod
    def from_json(cls, d: dict) -> "AnswerKeyEntry":
        return cls(d["artifact_id"], d["narrative"], d["pertinent"],
                   d.get("source_package_id"))


@dataclass
class AnswerKey:
    """Educator ground truth: which artifacts mean what in the scenario."""

    scenario: str = ""
    entries: list[AnswerKeyEntry] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"scenario": self.scenario,
                "entries": [e.to_json() for e in self.entries]}

    @classmethod
    def from_json(cls, d: dict) -> "AnswerKey":
        return cls(d.get("scenario", ""),
                   [AnswerKeyEntry.from_json(e) for e in d.get("entries", [])])


@dataclass
class EvidencePackage:
    package_id: str
    base_image_hash: str
    created_at: datetime
    labels: set[str] = field(default_factory=set)
    artifacts: list[ArtifactRecord] = field(default_factory=list)
    answer_key: AnswerKey = field(default_factory=AnswerKey)
    blobs: dict[str, bytes] = field(default_factory=dict)  # hash -> raw bytes
    parent_snapshot_hash: Optional[str] = None
    snapshot_hash: Optional[str] = None
    geometry: Optional[Geometry] = None
    provenance: Optional[dict[str, str]] = None  # artifact_id -> source package

    def manifest_dict(self) -> dict:
        d = {
            "format": FORMAT_VERSION,
            "package_id": self.package_id,
            "base_image_hash": self.base_image_hash,
            "created_at": self.created_at.strftime("%Y-%m-%dT%H:%M:%SZ"),
            "labels": sorted(self.labels),
            "artifacts": [a.to_json() for a in self.artifacts],
            "answer_key": self.answer_key.to_json(),
            "parent_snapshot_hash": self.parent_snapshot_hash,
            "snapshot_hash": self.snapshot_hash,
            "geometry": self.geometry.to_json() if self.geometry else None,
            "provenance": self.provenance,
            "blob_sizes": {ref: len(blob) for ref, blob in self.blobs.items()},
        }
        return d

    @classmethod
    def from_manifest(cls, manifest: dict, blobs: dict[str, bytes]) -> "EvidencePackage":
        try:
            return cls(
                package_id=manifest["package_id"],
                base_image_hash=manifest["base_image_hash"],
                created_at=datetime.strptime(manifest["created_at"], "%Y-%m-%dT%H:%M:%SZ"),
                labels=set(manifest.get("labels", [])),
                artifacts=[ArtifactRecord.from_json(a) for a in manifest.get("artifacts", [])],
                answer_key=AnswerKey.from_json(manifest.get("answer_key", {})),
                blobs=blobs,
                parent_snapshot_hash=manifest.get("parent_snapshot_hash"),
                snapshot_hash=manifest.get("snapshot_hash"),
                geometry=Geometry.from_json(manifest["geometry"]) if manifest.get("geometry") else None,
                provenance=manifest.get("provenance"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedManifest(f"manifest field error: {exc}") from exc


def build_package(report: DiffReport, labels: Optional[set[str]] = None,
                  answer_key: Optional[AnswerKey] = None,
                  parent_snapshot_hash: Optional[str] = None) -> EvidencePackage:
    """Assemble a package from a diff; blobs dedup by content hash."""
    answer_key = answer_key or AnswerKey()
    ids = {a.artifact_id for a in report.artifacts}
    for entry in answer_key.entries:
        if entry.artifact_id not in ids:
            raise DanglingReference(f"answer key names unknown artifact {entry.artifact_id}")
    blobs: dict[str, bytes] = {}
    for artifact in report.artifacts:
        if artifact.content_ref is None:
            continue
        blob = report.blobs.get(artifact.content_ref)
        if blob is None:
            raise DanglingReference(
                f"artifact {artifact.artifact_id} references missing blob {artifact.content_ref}")
        if hash_blob(blob) != artifact.content_ref:
            raise DanglingReference(f"blob content does not match ref {artifact.content_ref}")
        blobs[artifact.content_ref] = blob
    return EvidencePackage(
        package_id=str(uuid.uuid4()),
        base_image_hash=report.base_image_hash,
        created_at=datetime.now(timezone.utc).replace(microsecond=0, tzinfo=None),
        labels=set(labels or ()),
        artifacts=list(report.artifacts),
        answer_key=answer_key,
        blobs={ref: blobs[ref] for ref in sorted(blobs)},
        parent_snapshot_hash=parent_snapshot_hash,
        snapshot_hash=report.modified_image_hash,
        geometry=report.geometry,
    )


def strip_answer_key(pkg: EvidencePackage) -> EvidencePackage:
    """Student-safe copy: answer key emptied, everything else untouched."""
    return replace(pkg, answer_key=AnswerKey())


# -- container I/O -----------------------------------------------------------


def _compress(blob: bytes) -> bytes:
    c = zlib.compressobj(_DEFLATE_LEVEL, zlib.DEFLATED, -15)
    return c.compress(blob) + c.flush()


def _decompress(data: bytes, expected_size: int) -> bytes:
    d = zlib.decompressobj(-15)
    try:
        out = d.decompress(data, expected_size + 1)
    except zlib.error as exc:
        raise ChecksumMismatch(f"blob does not decompress: {exc}") from exc
    if len(out) != expected_size or not d.eof or d.unconsumed_tail:
        raise ChecksumMismatch("blob decompressed size does not match declaration")
    return out


def assemble_container(manifest_bytes: bytes,
                       blobs: list[tuple[str, bytes]]) -> bytes:
    """Build container bytes from a manifest and already-compressed blobs."""
    out = bytearray()
    out += _HEADER.pack(MAGIC, FORMAT_VERSION, len(manifest_bytes))
    out += manifest_bytes
    out += struct.pack("<I", len(blobs))
    for ref, compressed in blobs:
        out += _BLOB_HEADER.pack(bytes.fromhex(ref), len(compressed))
        out += compressed
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


@dataclass
class ParsedContainer:
    manifest_bytes: bytes
    manifest: dict
    blobs: list[tuple[str, bytes]]  # (hash hex, compressed bytes) in container order

    @property
    def blob_sizes(self) -> dict[str, int]:
        sizes = self.manifest.get("blob_sizes")
        if not isinstance(sizes, dict):
            raise MalformedManifest("manifest lacks blob_sizes")
        return sizes


def parse_container(data: bytes, verify_blobs: bool = True) -> ParsedContainer:
    """Structural parse with strict bounds; every failure is a PackageError.

    Lengths are validated against the actual byte count before any
    allocation, so hostile declared sizes cannot balloon memory.
    """
    if len(data) < len(MAGIC):
        raise TruncatedContainer(f"{len(data)} bytes is shorter than the magic")
    if data[:6] == MAGIC[:6] and data[6:8] != MAGIC[6:8]:
        raise UnsupportedVersion(f"container magic {data[:8]!r}")
    if data[:8] != MAGIC:
        raise BadMagic(f"bad magic {data[:8]!r}")
    if len(data) < _HEADER.size + 4 + 4:
        raise TruncatedContainer("container shorter than fixed header")
    _, version, manifest_len = _HEADER.unpack_from(data, 0)
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"format version {version}")
    crc_declared, = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc_declared:
        raise ChecksumMismatch("container CRC-32 mismatch")
    offset = _HEADER.size
    if manifest_len > len(data) - offset - 4 - 4:
        raise TruncatedContainer(f"declared manifest length {manifest_len} exceeds container")
    manifest_bytes = data[offset:offset + manifest_len]
    offset += manifest_len
    try:
        manifest = json.loads(manifest_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedManifest(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict):
        raise MalformedManifest("manifest is not a JSON object")
    blob_count, = struct.unpack_from("<I", data, offset)
    offset += 4
    sizes = manifest.get("blob_sizes", {})
    if not isinstance(sizes, dict):
        raise MalformedManifest("blob_sizes is not an object")
    blobs: list[tuple[str, bytes]] = []
    seen: set[str] = set()
    for _ in range(blob_count):
        if offset + _BLOB_HEADER.size > len(data) - 4:
            raise TruncatedContainer("blob header exceeds container")
        raw_hash, comp_len = _BLOB_HEADER.unpack_from(data, offset)
        offset += _BLOB_HEADER.size
        if comp_len > len(data) - offset - 4:
            raise TruncatedContainer(f"declared blob length {comp_len} exceeds container")
        ref = raw_hash.hex()
        if ref in seen:
            raise MalformedManifest(f"duplicate blob {ref}")
        seen.add(ref)
        compressed = data[offset:offset + comp_len]
        offset += comp_len
        if ref not in sizes:
            raise MalformedManifest(f"blob {ref} not declared in blob_sizes")
        if not isinstance(sizes[ref], int) or sizes[ref] < 0:
            raise MalformedManifest(f"bad declared size for blob {ref}")
        if verify_blobs:
            blob = _decompress(compressed, sizes[ref])
            if hash_blob(blob) != ref:
                raise ChecksumMismatch(f"blob {ref} content hash mismatch")
        blobs.append((ref, compressed))
    if offset != len(data) - 4:
        raise TruncatedContainer("container length does not match declared contents")
    return ParsedContainer(bytes(manifest_bytes), manifest, blobs)


def write_package_bytes(pkg: EvidencePackage) -> bytes:
    manifest_bytes = canonical_json(pkg.manifest_dict())
    blobs = [(ref, _compress(pkg.blobs[ref])) for ref in sorted(pkg.blobs)]
    return assemble_container(manifest_bytes, blobs)


def read_package_bytes(data: bytes) -> EvidencePackage:
    parsed = parse_container(data, verify_blobs=True)
    blobs: dict[str, bytes] = {}
    sizes = parsed.blob_sizes
    for ref, compressed in parsed.blobs:
        blobs[ref] = _decompress(compressed, sizes[ref])
    pkg = EvidencePackage.from_manifest(parsed.manifest, blobs)
    for artifact in pkg.artifacts:
        if artifact.content_ref is not None and artifact.content_ref not in blobs:
            raise MalformedManifest(
                f"artifact {artifact.artifact_id} references absent blob {artifact.content_ref}")
    return pkg


def write_package(pkg: EvidencePackage, path: str) -> None:
    data = write_package_bytes(pkg)
    with open(path, "wb") as fh:
        fh.write(data)


def read_package(path: str) -> EvidencePackage:
    with open(path, "rb") as fh:
        return read_package_bytes(fh.read())


# -- validation and stats ------------------------------------------------------

_REQUIRED_FIELDS = {
    "file_add": ("path", "meta", "content_ref"),
    "file_modify": ("path", "meta", "content_ref"),
    "file_delete": ("path",),
    "dir_add": ("path", "meta"),
    "dir_delete": ("path",),
    "meta_only": ("path", "meta"),
    "block_extent": ("extent", "content_ref"),
}


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_package(pkg: EvidencePackage) -> ValidationReport:
    """Check every structural invariant; reports all violations, raises none."""
    report = ValidationReport()
    seen_ids: set[str] = set()
    referenced: set[str] = set()
    for artifact in pkg.artifacts:
        if artifact.artifact_id in seen_ids:
            report.violations.append(f"duplicate artifact_id {artifact.artifact_id}")
        seen_ids.add(artifact.artifact_id)
        required = _REQUIRED_FIELDS.get(artifact.kind)
        if required is None:
            report.violations.append(
                f"artifact {artifact.artifact_id} has unknown kind {artifact.kind}")
            continue
        for fname in required:
            if getattr(artifact, fname) is None:
                report.violations.append(
                    f"artifact {artifact.artifact_id} ({artifact.kind}) lacks {fname}")
        if artifact.content_ref is not None:
            referenced.add(artifact.content_ref)
            if artifact.content_ref not in pkg.blobs:
                report.violations.append(
                    f"artifact {artifact.artifact_id} references missing blob "
                    f"{artifact.content_ref}")
    for ref, blob in pkg.blobs.items():
        if ref not in referenced:
            report.violations.append(f"blob {ref} is referenced by no artifact")
        if hash_blob(blob) != ref:
            report.violations.append(f"blob {ref} content hashes to {hash_blob(blob)}")
    for entry in pkg.answer_key.entries:
        if entry.artifact_id not in seen_ids:
            report.violations.append(
                f"answer key names unknown artifact {entry.artifact_id}")
    if pkg.provenance is not None:
        for artifact_id in seen_ids:
            if artifact_id not in pkg.provenance:
                report.violations.append(f"provenance missing for {artifact_id}")
    return report


@dataclass
class PackageStats:
    counts: dict[str, int]
    manifest_bytes: int
    blob_bytes_uncompressed: int
    blob_bytes_compressed: int
    container_bytes: int
    ratio: float

    def to_json(self) -> dict:
        return {
            "counts": self.counts,
            "manifest_bytes": self.manifest_bytes,
            "blob_bytes_uncompressed": self.blob_bytes_uncompressed,
            "blob_bytes_compressed": self.blob_bytes_compressed,
            "container_bytes": self.container_bytes,
            "ratio": self.ratio,
        }


def package_stats(pkg: EvidencePackage, base_image_size: Optional[int] = None) -> PackageStats:
    counts: dict[str, int] = {}
    for artifact in pkg.artifacts:
        counts[artifact.kind] = counts.get(artifact.kind, 0) + 1
    manifest_len = len(canonical_json(pkg.manifest_dict()))
    compressed = sum(len(_compress(b)) for b in pkg.blobs.values())
    container = (_HEADER.size + manifest_len + 4
                 + len(pkg.blobs) * _BLOB_HEADER.size + compressed + 4)
    if base_image_size is None and pkg.geometry is not None:
        base_image_size = pkg.geometry.byte_length
    ratio = container / base_image_size if base_image_size else 0.0
    return PackageStats(
        counts=counts,
        manifest_bytes=manifest_len,
        blob_bytes_uncompressed=sum(len(b) for b in pkg.blobs.values()),
        blob_bytes_compressed=compressed,
        container_bytes=container,
        ratio=ratio,
    )
