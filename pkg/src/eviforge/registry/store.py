"""Registry persistence: content-addressed blob store plus an index log.

Layout under the storage root:
    blobs/<first-2-hex>/<hash>   compressed blob bytes, exactly as shipped
    manifests/<package_id>.json  the package manifest, byte-preserved
    index.log                    append-only JSON lines, replayed at startup

Blobs and manifests are written before their log line is appended, so a
crash can only leave unreferenced files behind; gc() collects those.
"""

import json
import os
import threading
from dataclasses import dataclass
from typing import Optional

from ..package import (
    ChecksumMismatch,
    PackageError,
    _decompress,
    assemble_container,
    hash_blob,
    parse_container,
)


class RegistryError(Exception):
    pass


class PackageNotFound(RegistryError):
    pass


class DuplicatePackageId(RegistryError):
    pass


class InvalidContainer(RegistryError):
    pass


class MissingBlob(RegistryError):
    """Server-side integrity failure: the index references an absent blob."""


@dataclass
class IndexEntry:
    package_id: str
    labels: list[str]
    base_image_hash: str
    created_at: str
    blobs: list[str]  # container order
    container_sha256: str


@dataclass
class PublishReceipt:
    package_id: str
    blobs_stored: int
    blobs_deduplicated: int

    def to_json(self) -> dict:
        return {"package_id": self.package_id, "blobs_stored": self.blobs_stored,
                "blobs_deduplicated": self.blobs_deduplicated}


class RegistryStore:
    def __init__(self, root: str):
        self.root = root
        self.blob_dir = os.path.join(root, "blobs")
        self.manifest_dir = os.path.join(root, "manifests")
        self.log_path = os.path.join(root, "index.log")
        os.makedirs(self.blob_dir, exist_ok=True)
        os.makedirs(self.manifest_dir, exist_ok=True)
        self.entries: dict[str, IndexEntry] = {}
        self.refcounts: dict[str, int] = {}
        self._lock = threading.Lock()
        self._replay()

    # -- log ------------------------------------------------------------------

    def _replay(self) -> None:
        if not os.path.exists(self.log_path):
            return
        with open(self.log_path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                if record["op"] == "publish":
                    entry = IndexEntry(
                        package_id=record["package_id"], labels=record["labels"],
                        base_image_hash=record["base_image_hash"],
                        created_at=record["created_at"], blobs=record["blobs"],
                        container_sha256=record["container_sha256"])
                    self._apply_publish(entry)
                elif record["op"] == "delete":
                    self._apply_delete(record["package_id"])

    def _apply_publish(self, entry: IndexEntry) -> None:
        if entry.package_id in self.entries:
            self._apply_delete(entry.package_id)
        self.entries[entry.package_id] = entry
        for ref in entry.blobs:
            self.refcounts[ref] = self.refcounts.get(ref, 0) + 1

    def _apply_delete(self, package_id: str) -> None:
        entry = self.entries.pop(package_id, None)
        if entry is None:
            return
        for ref in entry.blobs:
            remaining = self.refcounts.get(ref, 0) - 1
            if remaining <= 0:
                self.refcounts.pop(ref, None)
            else:
                self.refcounts[ref] = remaining

    def _append_log(self, record: dict) -> None:
        with open(self.log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    # -- blob files -----------------------------------------------------------

    def _blob_path(self, ref: str) -> str:
        return os.path.join(self.blob_dir, ref[:2], ref)

    def _store_blob(self, ref: str, compressed: bytes) -> bool:
        """Write-if-absent via temp file + atomic rename; True when stored."""
        path = self._blob_path(ref)
        if os.path.exists(path):
            return False
        os.makedirs(os.path.dirname(path), exist_ok=True)
        tmp = path + f".tmp.{os.getpid()}.{threading.get_ident()}"
        with open(tmp, "wb") as fh:
            fh.write(compressed)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
        return True

    def read_blob(self, ref: str, expected_size: int) -> bytes:
        """Compressed blob bytes, verified against the content address."""
        path = self._blob_path(ref)
        if not os.path.exists(path):
            raise MissingBlob(f"blob {ref} is indexed but absent from the store")
        with open(path, "rb") as fh:
            compressed = fh.read()
        try:
            raw = _decompress(compressed, expected_size)
        except ChecksumMismatch as exc:
            raise MissingBlob(f"blob {ref} is corrupt on disk: {exc}") from exc
        if hash_blob(raw) != ref:
            raise MissingBlob(f"blob {ref} content hash mismatch on read")
        return compressed

    # -- operations -------------------------------------------------------------

    def publish(self, container: bytes) -> PublishReceipt:
        try:
            parsed = parse_container(container, verify_blobs=True)
        except PackageError as exc:
            raise InvalidContainer(str(exc)) from exc
        manifest = parsed.manifest
        package_id = manifest.get("package_id")
        if not isinstance(package_id, str) or not package_id:
            raise InvalidContainer("manifest lacks a package_id")
        container_sha = hash_blob(container)
        with self._lock:
            existing = self.entries.get(package_id)
            if existing is not None:
                if existing.container_sha256 == container_sha:
                    return PublishReceipt(package_id, 0, len(parsed.blobs))
                raise DuplicatePackageId(
                    f"{package_id} already published with different content")
            stored = 0
            for ref, compressed in parsed.blobs:
                if self._store_blob(ref, compressed):
                    stored += 1
            manifest_path = os.path.join(self.manifest_dir, f"{package_id}.json")
            tmp = manifest_path + ".tmp"
            with open(tmp, "wb") as fh:
                fh.write(parsed.manifest_bytes)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, manifest_path)
            entry = IndexEntry(
                package_id=package_id,
                labels=sorted(manifest.get("labels", [])),
                base_image_hash=manifest.get("base_image_hash", ""),
                created_at=manifest.get("created_at", ""),
                blobs=[ref for ref, _ in parsed.blobs],
                container_sha256=container_sha,
            )
            self._append_log({
                "op": "publish", "package_id": package_id, "labels": entry.labels,
                "base_image_hash": entry.base_image_hash,
                "created_at": entry.created_at, "blobs": entry.blobs,
                "container_sha256": container_sha,
            })
            self._apply_publish(entry)
            return PublishReceipt(package_id, stored, len(parsed.blobs) - stored)

    def _manifest_bytes(self, entry: IndexEntry) -> bytes:
        path = os.path.join(self.manifest_dir, f"{entry.package_id}.json")
        if not os.path.exists(path):
            raise MissingBlob(f"manifest for {entry.package_id} missing from store")
        with open(path, "rb") as fh:
            return fh.read()

    def blob_size(self, ref: str) -> Optional[int]:
        """Uncompressed size a stored manifest declares for the blob, if any."""
        for entry in self.entries.values():
            if ref in entry.blobs:
                manifest = json.loads(self._manifest_bytes(entry))
                size = manifest.get("blob_sizes", {}).get(ref)
                if isinstance(size, int):
                    return size
        return None

    def fetch(self, package_id: str, have_blobs: set[str] = frozenset()) -> bytes:
        """Reconstruct the container; blobs the caller already has are omitted."""
        entry = self.entries.get(package_id)
        if entry is None:
            raise PackageNotFound(package_id)
        manifest_bytes = self._manifest_bytes(entry)
        try:
            sizes = json.loads(manifest_bytes).get("blob_sizes", {})
        except json.JSONDecodeError as exc:
            raise MissingBlob(f"stored manifest for {package_id} unreadable: {exc}") from exc
        blobs = []
        for ref in entry.blobs:
            if ref in have_blobs:
                continue
            if ref not in sizes:
                raise MissingBlob(f"blob {ref} not declared by stored manifest")
            blobs.append((ref, self.read_blob(ref, sizes[ref])))
        return assemble_container(manifest_bytes, blobs)

    def list_packages(self, label: str = "", base: str = "") -> list[dict]:
        summaries = []
        for entry in self.entries.values():
            if label and label not in entry.labels:
                continue
            if base and entry.base_image_hash != base:
                continue
            summaries.append({
                "package_id": entry.package_id,
                "labels": entry.labels,
                "base_image_hash": entry.base_image_hash,
                "created_at": entry.created_at,
                "blob_count": len(entry.blobs),
            })
        summaries.sort(key=lambda s: (s["created_at"], s["package_id"]))
        return summaries

    def delete(self, package_id: str) -> None:
        with self._lock:
            if package_id not in self.entries:
                raise PackageNotFound(package_id)
            self._append_log({"op": "delete", "package_id": package_id})
            self._apply_delete(package_id)
            path = os.path.join(self.manifest_dir, f"{package_id}.json")
            if os.path.exists(path):
                os.unlink(path)

    def gc(self) -> int:
        """Remove blob files no surviving package references."""
        removed = 0
        with self._lock:
            for sub in os.listdir(self.blob_dir):
                subdir = os.path.join(self.blob_dir, sub)
                if not os.path.isdir(subdir):
                    continue
                for name in os.listdir(subdir):
                    if name.endswith(".json") or ".tmp." in name:
                        continue
                    if self.refcounts.get(name, 0) <= 0:
                        os.unlink(os.path.join(subdir, name))
                        removed += 1
        return removed

    def stats(self) -> dict:
        blob_bytes = 0
        blob_count = 0
        for ref in self.refcounts:
            path = self._blob_path(ref)
            if os.path.exists(path):
                blob_count += 1
                blob_bytes += os.path.getsize(path)
        return {"packages": len(self.entries), "blobs": blob_count,
                "blob_bytes_compressed": blob_bytes}
