"""Content-addressed blob storage standing in for IPFS/Swarm."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from .errors import EmptyBlob, NotFound

ADDRESS_LEN = 32


@dataclass(frozen=True)
class ContentAddress:
    digest: bytes

    def hex(self) -> str:
        return self.digest.hex()


class BlobStore:
    """Append-only map from SHA-256 digest to blob.

    ``latency`` is the number of epochs a retrieval takes; it is reported to
    callers but the store itself has no notion of time.
    """

    def __init__(self, latency: int = 0):
        self.latency = latency
        self._blobs: dict[bytes, bytes] = {}

    def put(self, blob: bytes) -> ContentAddress:
        if not blob:
            raise EmptyBlob("refusing to store an empty blob")
        addr = ContentAddress(hashlib.sha256(blob).digest())
        self._blobs.setdefault(addr.digest, bytes(blob))
        return addr

    def get(self, addr: ContentAddress) -> bytes:
        try:
            return self._blobs[addr.digest]
        except KeyError:
            raise NotFound(addr.hex()) from None

    def __contains__(self, addr: ContentAddress) -> bool:
        return addr.digest in self._blobs

    def __len__(self) -> int:
        return len(self._blobs)

    def blobs(self) -> list[bytes]:
        return list(self._blobs.values())
