"""Canonical byte encoding shared by signatures, digests, and ledger serialization.

Every signed or hashed structure in the system is encoded the same way:
each field is framed as a 4-byte big-endian length followed by the field
bytes, concatenated in declared field order. Integers are 8-byte big-endian
unsigned, strings are UTF-8, booleans are a single byte, None is empty.
"""

from __future__ import annotations

import hashlib


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def _field_bytes(value) -> bytes:
    if value is None:
        return b""
    if isinstance(value, bool):  # bool before int: bool is an int subclass
        return b"\x01" if value else b"\x00"
    if isinstance(value, bytes):
        return value
    if isinstance(value, int):
        if value < 0:
            raise ValueError(f"canonical integers must be non-negative, got {value}")
        return value.to_bytes(8, "big")
    if isinstance(value, str):
        return value.encode("utf-8")
    raise TypeError(f"cannot canonically encode {type(value).__name__}")


def canon(*fields) -> bytes:
    """Length-prefix and concatenate fields in the order given."""
    out = bytearray()
    for field in fields:
        encoded = _field_bytes(field)
        out += len(encoded).to_bytes(4, "big")
        out += encoded
    return bytes(out)


class Reader:
    """Sequential decoder for canon()-framed byte strings."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def take(self) -> bytes:
        if self._pos + 4 > len(self._data):
            raise ValueError("truncated field header")
        length = int.from_bytes(self._data[self._pos : self._pos + 4], "big")
        self._pos += 4
        if self._pos + length > len(self._data):
            raise ValueError("truncated field body")
        out = self._data[self._pos : self._pos + length]
        self._pos += length
        return out

    def take_int(self) -> int:
        raw = self.take()
        if len(raw) != 8:
            raise ValueError(f"expected 8-byte integer field, got {len(raw)} bytes")
        return int.from_bytes(raw, "big")

    def take_str(self) -> str:
        return self.take().decode("utf-8")

    def take_bool(self) -> bool:
        raw = self.take()
        if raw not in (b"\x00", b"\x01"):
            raise ValueError("malformed boolean field")
        return raw == b"\x01"

    @property
    def exhausted(self) -> bool:
        return self._pos == len(self._data)

    def expect_end(self) -> None:
        if not self.exhausted:
            raise ValueError("trailing bytes after final field")
