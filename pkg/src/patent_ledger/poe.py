"""Proof of existence: commit document hashes before disclosure.

Only SHA-256 digests ever reach the ledger; the documents stay private.
Staged development is recorded as a chain where each record's prev_link is
the hash of the entire previous record, coupling content, time, and owner.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .codec import canon, sha256
from .errors import NotOwner
from .identity import IdentityDirectory


@dataclass(frozen=True)
class PoERecord:
    doc_hash: bytes
    prev_link: bytes | None
    recorded_at: int
    owner: str

    def to_bytes(self) -> bytes:
        return canon(self.doc_hash, self.prev_link, self.recorded_at, self.owner)


def link_hash(record: PoERecord) -> bytes:
    """Chain link: covers the whole record, not just the document hash."""
    return sha256(record.to_bytes())


@dataclass
class PoEChain:
    chain_id: int
    owner: str
    links: list[PoERecord] = field(default_factory=list)


class PoELog:
    """Ledger-side registry of existence records, grouped into chains."""

    def __init__(self):
        self.chains: dict[int, PoEChain] = {}
        self.next_chain_id = 1

    def record_hash(self, owner: str, doc_hash: bytes, tick: int,
                    directory: IdentityDirectory,
                    chain_id: int | None = None) -> tuple[int, PoERecord]:
        """Append a pre-computed digest; used by the transaction path."""
        directory.require(owner)
        if chain_id is None:
            chain = PoEChain(self.next_chain_id, owner)
            self.chains[chain.chain_id] = chain
            self.next_chain_id += 1
        else:
            chain = self.chains.get(chain_id)
            if chain is None:
                raise NotOwner(f"no chain {chain_id}")
            if chain.owner != owner:
                raise NotOwner(f"chain {chain_id} belongs to {chain.owner}")
        prev = link_hash(chain.links[-1]) if chain.links else None
        if chain.links and tick <= chain.links[-1].recorded_at:
            raise ValueError("chain ticks must strictly increase")
        record = PoERecord(doc_hash=doc_hash, prev_link=prev, recorded_at=tick, owner=owner)
        chain.links.append(record)
        return chain.chain_id, record

    def record_existence(self, owner: str, document: bytes, tick: int,
                         directory: IdentityDirectory,
                         chain_id: int | None = None) -> tuple[int, PoERecord]:
        """Hash the document locally and commit only the digest."""
        return self.record_hash(owner, sha256(document), tick, directory, chain_id)

    def chain(self, chain_id: int) -> PoEChain | None:
        return self.chains.get(chain_id)


def verify_existence(record: PoERecord, document: bytes) -> bool:
    return sha256(document) == record.doc_hash


def verify_chain(chain: PoEChain, documents: list[bytes]) -> bool:
    """Check every stage against its document and every link against its predecessor."""
    if len(chain.links) != len(documents):
        return False
    prev: PoERecord | None = None
    for record, document in zip(chain.links, documents):
        if not verify_existence(record, document):
            return False
        expected_prev = link_hash(prev) if prev is not None else None
        if record.prev_link != expected_prev:
            return False
        if prev is not None and record.recorded_at <= prev.recorded_at:
            return False
        prev = record
    return True
