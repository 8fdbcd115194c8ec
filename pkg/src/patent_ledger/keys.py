"""Ed25519 key pairs: 32-byte public keys, 64-byte deterministic signatures."""

from __future__ import annotations

import os
import random

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric import ed25519


class KeyPair:
    """Signing identity. The secret key never leaves this object."""

    __slots__ = ("_secret", "public_key")

    def __init__(self, secret: ed25519.Ed25519PrivateKey):
        self._secret = secret
        self.public_key = secret.public_key().public_bytes_raw()

    @classmethod
    def from_seed(cls, seed: bytes) -> "KeyPair":
        if len(seed) != 32:
            raise ValueError("seed must be exactly 32 bytes")
        return cls(ed25519.Ed25519PrivateKey.from_private_bytes(seed))

    @classmethod
    def generate(cls, rng: random.Random | None = None) -> "KeyPair":
        seed = rng.randbytes(32) if rng is not None else os.urandom(32)
        return cls.from_seed(seed)

    def sign(self, message: bytes) -> bytes:
        return self._secret.sign(message)

    def __repr__(self) -> str:
        return f"KeyPair(pk={self.public_key.hex()[:12]}...)"


def verify(public_key: bytes, message: bytes, signature: bytes) -> bool:
    try:
        ed25519.Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
        return True
    except (InvalidSignature, ValueError):
        return False
