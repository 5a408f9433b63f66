"""Package distribution: dedup registry server/store and its HTTP client."""

from .client import FetchResult, RegistryClient
from .server import make_server, serve_forever, start_background
from .store import (
    DuplicatePackageId,
    InvalidContainer,
    MissingBlob,
    PackageNotFound,
    PublishReceipt,
    RegistryError,
    RegistryStore,
)

__all__ = [
    "DuplicatePackageId",
    "FetchResult",
    "InvalidContainer",
    "MissingBlob",
    "PackageNotFound",
    "PublishReceipt",
    "RegistryClient",
    "RegistryError",
    "RegistryStore",
    "make_server",
    "serve_forever",
    "start_background",
]
