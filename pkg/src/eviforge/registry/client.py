"""Registry client with an optional local blob cache for delta fetches."""

import json
import os
from dataclasses import dataclass

import requests

from ..package import assemble_container, parse_container
from .store import (
    DuplicatePackageId,
    InvalidContainer,
    MissingBlob,
    PackageNotFound,
    RegistryError,
)


@dataclass
class FetchResult:
    data: bytes  # the complete container
    transferred_bytes: int  # what actually crossed the wire
    blobs_from_cache: int


class RegistryClient:
    def __init__(self, base_url: str, cache_dir: str | None = None, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.cache_dir = cache_dir
        self.timeout = timeout
        self.session = requests.Session()
        if cache_dir:
            os.makedirs(cache_dir, exist_ok=True)

    # -- cache -------------------------------------------------------------

    def _cache_path(self, ref: str) -> str:
        return os.path.join(self.cache_dir, ref[:2], ref)

    def _cached_refs(self) -> set[str]:
        if not self.cache_dir or not os.path.isdir(self.cache_dir):
            return set()
        refs = set()
        for sub in os.listdir(self.cache_dir):
            subdir = os.path.join(self.cache_dir, sub)
            if os.path.isdir(subdir):
                refs.update(name for name in os.listdir(subdir) if len(name) == 64)
        return refs

    def _cache_put(self, ref: str, compressed: bytes) -> None:
        if not self.cache_dir:
            return
        path = self._cache_path(ref)
        if os.path.exists(path):
            return
        os.makedirs(os.path.dirname(path), exist_ok=True)
        tmp = path + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(compressed)
        os.replace(tmp, path)

    def _cache_get(self, ref: str) -> bytes:
        with open(self._cache_path(ref), "rb") as fh:
            return fh.read()

    # -- wire ----------------------------------------------------------------

    def _raise_for(self, response: requests.Response):
        try:
            payload = response.json()
        except (json.JSONDecodeError, ValueError):
            payload = {"error": "Unknown", "message": response.text}
        error, message = payload.get("error"), payload.get("message", "")
        if error == "NotFound":
            raise PackageNotFound(message)
        if error == "InvalidContainer":
            raise InvalidContainer(message)
        if error == "DuplicatePackageId":
            raise DuplicatePackageId(message)
        if error == "MissingBlob":
            raise MissingBlob(message)
        raise RegistryError(f"{error}: {message} (HTTP {response.status_code})")

    def publish(self, container: bytes) -> dict:
        parsed = parse_container(container, verify_blobs=False)
        package_id = parsed.manifest.get("package_id", "")
        response = self.session.put(f"{self.base_url}/v1/packages/{package_id}",
                                    data=container, timeout=self.timeout,
                                    headers={"Content-Type": "application/octet-stream"})
        if response.status_code != 200:
            self._raise_for(response)
        for ref, compressed in parsed.blobs:
            self._cache_put(ref, compressed)
        return response.json()

    def publish_file(self, path: str) -> dict:
        with open(path, "rb") as fh:
            return self.publish(fh.read())

    def fetch(self, package_id: str) -> FetchResult:
        """Download a container; cached blobs are negotiated away via X-Have-Blobs."""
        headers = {}
        cached = self._cached_refs()
        if cached:
            headers["X-Have-Blobs"] = ",".join(sorted(cached))
        response = self.session.get(f"{self.base_url}/v1/packages/{package_id}",
                                    headers=headers, timeout=self.timeout)
        if response.status_code != 200:
            self._raise_for(response)
        wire = response.content
        parsed = parse_container(wire, verify_blobs=True)
        received = dict(parsed.blobs)
        for ref, compressed in parsed.blobs:
            self._cache_put(ref, compressed)
        full_order = list(parsed.blob_sizes)
        from_cache = 0
        blobs = []
        for ref in full_order:
            if ref in received:
                blobs.append((ref, received[ref]))
                continue
            if ref not in cached:
                raise MissingBlob(f"server omitted blob {ref} we do not have")
            compressed = self._cache_get(ref)
            from_cache += 1
            blobs.append((ref, compressed))
        data = assemble_container(parsed.manifest_bytes, blobs)
        parse_container(data, verify_blobs=True)  # end-to-end integrity gate
        return FetchResult(data=data, transferred_bytes=len(wire),
                           blobs_from_cache=from_cache)

    def fetch_to_file(self, package_id: str, path: str) -> FetchResult:
        result = self.fetch(package_id)
        with open(path, "wb") as fh:
            fh.write(result.data)
        return result

    def list_packages(self, label: str = "", base: str = "") -> list[dict]:
        params = {}
        if label:
            params["label"] = label
        if base:
            params["base"] = base
        response = self.session.get(f"{self.base_url}/v1/packages",
                                    params=params, timeout=self.timeout)
        if response.status_code != 200:
            self._raise_for(response)
        return response.json()

    def delete(self, package_id: str) -> None:
        response = self.session.delete(f"{self.base_url}/v1/packages/{package_id}",
                                       timeout=self.timeout)
        if response.status_code != 200:
            self._raise_for(response)

    def gc(self) -> int:
        response = self.session.post(f"{self.base_url}/v1/gc", timeout=self.timeout)
        if response.status_code != 200:
            self._raise_for(response)
        return response.json()["removed"]
