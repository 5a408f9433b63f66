"""HTTP/1.1 front end for the registry store.

Endpoints (bodies are bit-exact EVIPKG01 containers or canonical JSON):
    PUT    /v1/packages/{id}          publish a container
    GET    /v1/packages/{id}          fetch (header X-Have-Blobs: h1,h2,... for delta)
    GET    /v1/packages?label=&base=  list summaries
    GET    /v1/blobs/{hash}           one compressed blob (verified on read)
    DELETE /v1/packages/{id}          unpublish
    POST   /v1/gc                     drop unreferenced blobs
"""

import logging
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

from ..package import PackageError, canonical_json, parse_container
from .store import (
    DuplicatePackageId,
    InvalidContainer,
    MissingBlob,
    PackageNotFound,
    RegistryStore,
)

logger = logging.getLogger(__name__)

_PKG_RE = re.compile(r"^/v1/packages/([A-Za-z0-9-]+)$")
_BLOB_RE = re.compile(r"^/v1/blobs/([0-9a-f]{64})$")


class RegistryHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    store: RegistryStore  # injected by make_server

    def log_message(self, fmt, *args):
        logger.debug("%s - %s", self.address_string(), fmt % args)

    def _send(self, code: int, body: bytes, content_type: str = "application/json"):
        self.send_response(code)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_json(self, code: int, obj):
        self._send(code, canonical_json(obj))

    def _send_error_json(self, code: int, error: str, message: str):
        self._send_json(code, {"error": error, "message": message})

    def _read_body(self) -> bytes:
        length = int(self.headers.get("Content-Length", "0"))
        return self.rfile.read(length) if length else b""

    def do_PUT(self):
        match = _PKG_RE.match(urlparse(self.path).path)
        if not match:
            return self._send_error_json(404, "NotFound", self.path)
        body = self._read_body()
        try:
            parsed = parse_container(body, verify_blobs=False)
        except PackageError as exc:
            return self._send_error_json(400, "InvalidContainer", str(exc))
        if parsed.manifest.get("package_id") != match.group(1):
            return self._send_error_json(
                400, "PackageIdMismatch",
                f"URL names {match.group(1)}, manifest says "
                f"{parsed.manifest.get('package_id')}")
        try:
            receipt = self.store.publish(body)
        except InvalidContainer as exc:
            return self._send_error_json(400, "InvalidContainer", str(exc))
        except DuplicatePackageId as exc:
            return self._send_error_json(409, "DuplicatePackageId", str(exc))
        self._send_json(200, receipt.to_json())

    def do_GET(self):
        url = urlparse(self.path)
        match = _PKG_RE.match(url.path)
        if match:
            have = set()
            header = self.headers.get("X-Have-Blobs", "")
            if header:
                have = {h.strip() for h in header.split(",") if h.strip()}
            try:
                data = self.store.fetch(match.group(1), have_blobs=have)
            except PackageNotFound as exc:
                return self._send_error_json(404, "NotFound", str(exc))
            except MissingBlob as exc:
                return self._send_error_json(500, "MissingBlob", str(exc))
            return self._send(200, data, "application/octet-stream")
        match = _BLOB_RE.match(url.path)
        if match:
            ref = match.group(1)
            size = self.store.blob_size(ref)
            if size is None:
                return self._send_error_json(404, "NotFound", ref)
            try:
                data = self.store.read_blob(ref, size)
            except MissingBlob as exc:
                return self._send_error_json(500, "MissingBlob", str(exc))
            return self._send(200, data, "application/octet-stream")
        if url.path == "/v1/packages":
            params = parse_qs(url.query)
            summaries = self.store.list_packages(
                label=params.get("label", [""])[0], base=params.get("base", [""])[0])
            return self._send_json(200, summaries)
        self._send_error_json(404, "NotFound", self.path)

    def do_DELETE(self):
        match = _PKG_RE.match(urlparse(self.path).path)
        if not match:
            return self._send_error_json(404, "NotFound", self.path)
        try:
            self.store.delete(match.group(1))
        except PackageNotFound as exc:
            return self._send_error_json(404, "NotFound", str(exc))
        self._send_json(200, {"deleted": match.group(1)})

    def do_POST(self):
        if urlparse(self.path).path == "/v1/gc":
            return self._send_json(200, {"removed": self.store.gc()})
        self._send_error_json(404, "NotFound", self.path)


def make_server(root: str, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """Bind a registry server; port 0 picks an ephemeral port."""
    store = RegistryStore(root)
    handler = type("BoundRegistryHandler", (RegistryHandler,), {"store": store})
    return ThreadingHTTPServer((host, port), handler)


def serve_forever(root: str, host: str, port: int) -> None:
    server = make_server(root, host, port)
    logger.info("registry serving %s on %s:%d", root, *server.server_address[:2])
    try:
        server.serve_forever()
    finally:
        server.server_close()


def start_background(root: str, host: str = "127.0.0.1", port: int = 0):
    """Spawn a daemon-thread server; returns (server, base_url)."""
    server = make_server(root, host, port)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    host_, port_ = server.server_address[:2]
    return server, f"http://{host_}:{port_}"
