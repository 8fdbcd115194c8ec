"""X.509-style certificates: patent offices credential examiners.

Certificates carry the seven classic content fields (version, serial,
algorithm tag, issuer, validity window, subject, subject key) and a single
signature by the issuing authority. No DER, no chains, no revocation:
the validity window is the only invalidation path.
"""

from __future__ import annotations

from dataclasses import dataclass

from .codec import Reader, canon
from .errors import EmptyValidity
from .keys import KeyPair, verify

CERT_VERSION = 3
SIGNATURE_ALGORITHM = "ed25519-sha256-lite"


@dataclass(frozen=True)
class Certificate:
    version: int
    serial_number: int
    signature_algorithm: str
    issuer_name: str
    not_before: int
    not_after: int
    subject_name: str
    subject_public_key: bytes
    ca_signature: bytes

    def content_bytes(self) -> bytes:
        return canon(self.version, self.serial_number, self.signature_algorithm,
                     self.issuer_name, self.not_before, self.not_after,
                     self.subject_name, self.subject_public_key)

    def to_bytes(self) -> bytes:
        return self.content_bytes() + canon(self.ca_signature)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Certificate":
        r = Reader(raw)
        cert = cls(
            version=r.take_int(),
            serial_number=r.take_int(),
            signature_algorithm=r.take_str(),
            issuer_name=r.take_str(),
            not_before=r.take_int(),
            not_after=r.take_int(),
            subject_name=r.take_str(),
            subject_public_key=r.take(),
            ca_signature=r.take(),
        )
        r.expect_end()
        return cert

    def render(self) -> str:
        return "\n".join([
            f"Version:        {self.version}",
            f"Serial Number:  {self.serial_number}",
            f"Algorithm:      {self.signature_algorithm}",
            f"Issuer:         {self.issuer_name}",
            f"Validity:       ticks {self.not_before}..{self.not_after}",
            f"Subject:        {self.subject_name}",
            f"Subject Key:    {self.subject_public_key.hex()}",
            f"Signature:      {self.ca_signature.hex()[:32]}...",
        ])


class CertificateAuthority:
    """A patent office. Serial numbers start at 1 and increase per issuer."""

    def __init__(self, name: str, key_pair: KeyPair):
        self.name = name
        self.key_pair = key_pair
        self._next_serial = 1

    @property
    def public_key(self) -> bytes:
        return self.key_pair.public_key

    def issue(self, subject_name: str, subject_public_key: bytes,
              not_before: int, not_after: int) -> Certificate:
        if not_before > not_after:
            raise EmptyValidity(f"validity window [{not_before}, {not_after}] is empty")
        serial = self._next_serial
        self._next_serial += 1
        unsigned = Certificate(
            version=CERT_VERSION,
            serial_number=serial,
            signature_algorithm=SIGNATURE_ALGORITHM,
            issuer_name=self.name,
            not_before=not_before,
            not_after=not_after,
            subject_name=subject_name,
            subject_public_key=subject_public_key,
            ca_signature=b"",
        )
        return Certificate(
            version=unsigned.version,
            serial_number=unsigned.serial_number,
            signature_algorithm=unsigned.signature_algorithm,
            issuer_name=unsigned.issuer_name,
            not_before=unsigned.not_before,
            not_after=unsigned.not_after,
            subject_name=unsigned.subject_name,
            subject_public_key=unsigned.subject_public_key,
            ca_signature=self.key_pair.sign(unsigned.content_bytes()),
        )


def verify_certificate(cert: Certificate, ca_public_key: bytes, now: int) -> bool:
    """True iff the issuer's signature holds and now lies inside the window."""
    if not verify(ca_public_key, cert.content_bytes(), cert.ca_signature):
        return False
    return cert.not_before <= now <= cert.not_after
