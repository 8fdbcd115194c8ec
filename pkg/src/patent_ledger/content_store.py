"""Content-addressed storage for patent documents and token metadata.

Objects are split into chunks of at most 256 KiB, each chunk is addressed by
its SHA-256 digest, and the object identifier is derived from the flat list
of chunk digests plus the total length. Retrieval re-hashes every chunk and
the root, so any stored-byte tampering is detected before data is returned.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .codec import sha256
from .errors import IntegrityViolation, MalformedContentId, NotFound

CHUNK_SIZE = 256 * 1024

_CID_RE = re.compile(r"^Qm[0-9a-f]{64}$")


@dataclass(frozen=True, order=True)
class ContentId:
    """Text identifier: "Qm" followed by the hex of a 32-byte root digest."""

    text: str

    @classmethod
    def from_root(cls, root: bytes) -> "ContentId":
        return cls("Qm" + root.hex())

    @classmethod
    def parse(cls, text: str) -> "ContentId":
        if not _CID_RE.match(text):
            raise MalformedContentId(f"not a valid content id: {text!r}")
        return cls(text)

    @property
    def root(self) -> bytes:
        return bytes.fromhex(self.text[2:])

    def __str__(self) -> str:
        return self.text


@dataclass(frozen=True)
class Chunk:
    data: bytes
    hash: bytes


@dataclass(frozen=True)
class ObjectManifest:
    chunk_hashes: tuple[bytes, ...]
    total_len: int
    root: bytes


def chunk_object(data: bytes) -> list[Chunk]:
    """Split data into <=256 KiB chunks. Empty input yields one empty chunk."""
    if not data:
        return [Chunk(b"", sha256(b""))]
    return [
        Chunk(data[i : i + CHUNK_SIZE], sha256(data[i : i + CHUNK_SIZE]))
        for i in range(0, len(data), CHUNK_SIZE)
    ]


def build_manifest(data: bytes) -> ObjectManifest:
    chunks = chunk_object(data)
    hashes = tuple(c.hash for c in chunks)
    # root binds the total length so different chunk lists cannot alias
    root = sha256(b"".join(hashes) + len(data).to_bytes(8, "big"))
    return ObjectManifest(hashes, len(data), root)


def content_id(data: bytes) -> ContentId:
    """Pure function of the bytes; no store state involved."""
    return ContentId.from_root(build_manifest(data).root)


def verify_retrieval(cid: ContentId | str, data: bytes) -> bool:
    """Re-hash retrieved data and check it matches the id it was fetched by."""
    if isinstance(cid, str):
        cid = ContentId.parse(cid)
    else:
        ContentId.parse(cid.text)
    return content_id(data) == cid


class ContentStore:
    """In-process chunk map standing in for the distributed storage network."""

    def __init__(self):
        self._chunks: dict[bytes, bytearray] = {}
        self._manifests: dict[str, ObjectManifest] = {}

    def put_object(self, data: bytes) -> ContentId:
        manifest = build_manifest(data)
        for chunk in chunk_object(data):
            self._chunks[chunk.hash] = bytearray(chunk.data)
        cid = ContentId.from_root(manifest.root)
        self._manifests[cid.text] = manifest
        return cid

    def has(self, cid: ContentId | str) -> bool:
        text = cid.text if isinstance(cid, ContentId) else cid
        return text in self._manifests

    def get_object(self, cid: ContentId | str) -> bytes:
        text = cid.text if isinstance(cid, ContentId) else cid
        manifest = self._manifests.get(text)
        if manifest is None:
            raise NotFound(f"no object stored under {text}")
        parts = []
        for expected in manifest.chunk_hashes:
            stored = self._chunks.get(expected)
            if stored is None or sha256(bytes(stored)) != expected:
                raise IntegrityViolation(f"chunk of {text} no longer matches its hash")
            parts.append(bytes(stored))
        data = b"".join(parts)
        if content_id(data).text != text:
            raise IntegrityViolation(f"object {text} failed root re-hash")
        return data

    def manifest(self, cid: ContentId | str) -> ObjectManifest:
        text = cid.text if isinstance(cid, ContentId) else cid
        manifest = self._manifests.get(text)
        if manifest is None:
            raise NotFound(f"no object stored under {text}")
        return manifest

    def corrupt(self, cid: ContentId | str, chunk_index: int, offset: int, xor: int = 0x01) -> None:
        """Test hook: flip bits of one stored byte to simulate tampering."""
        manifest = self.manifest(cid)
        chunk_hash = manifest.chunk_hashes[chunk_index]
        self._chunks[chunk_hash][offset] ^= xor
