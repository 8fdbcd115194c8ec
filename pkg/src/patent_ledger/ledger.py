"""Permissioned ledger core: transactions, blocks, and the replicated state.

Transactions are signed envelopes over canonical payloads; blocks chain by
SHA-256 of the full previous block and carry quorum votes from certified
validators. WorldState is the deterministic state machine every replica
runs: identities, proof-of-existence chains, the token registry, the
validator roster, patent examinations, and the marketplace. Replaying a
serialized chain from genesis reproduces the live state digest bit for bit.
"""

from __future__ import annotations

import copy
import hashlib
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum

from .certs import Certificate, verify_certificate
from .codec import Reader, canon, sha256
from .content_store import ContentId, ContentStore
from .errors import (
    AlreadyVoted,
    ExpiredCertificate,
    InconsistentVerdict,
    InvalidCertificate,
    InvalidTransaction,
    KeyMismatch,
    LedgerError,
    NotAValidator,
    QuorumNotReached,
    SubmissionNotPending,
    UnresolvableContent,
)
from .identity import IdentityDirectory, username_for
from .keys import KeyPair, verify
from .market import ListingMode, Marketplace
from .poe import PoELog
from .tokens import Fungibility, FtAsset, NftAsset, TokenRegistry

GENESIS_PREV_HASH = b"\x00" * 32
PATENT_CLASS = 1
PAYMENT_CLASS = 2
INITIAL_PAYMENT_SUPPLY = 1_000_000_000
SUBMISSION_TIMEOUT_BLOCKS = 3
TIMEOUT_COMMENT = "quorum timeout"

# Deterministic genesis accounts: the treasury funds scenarios and acts as
# the pre-admission block authority; the escrow account holds royalty pools.
TREASURY_SEED = sha256(b"patent-ledger:genesis:treasury")
ESCROW_SEED = sha256(b"patent-ledger:genesis:escrow")


def quorum(n: int) -> int:
    """Byzantine majority: floor(2n/3) + 1 distinct validator votes."""
    if n < 1:
        raise ValueError("quorum needs at least one validator")
    return (2 * n) // 3 + 1


class TxKind(Enum):
    IDENTITY_REG = "identity"
    POE_RECORD = "poe"
    PATENT_SUBMISSION = "patent"
    TOKEN_OP = "token"
    MARKET_OP = "market"


@dataclass(frozen=True)
class Transaction:
    kind: TxKind
    payload: bytes
    author: str
    signature: bytes

    def signing_bytes(self) -> bytes:
        return canon(self.kind.value, self.payload)

    def to_bytes(self) -> bytes:
        return canon(self.kind.value, self.payload, self.author, self.signature)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Transaction":
        r = Reader(raw)
        tx = cls(TxKind(r.take_str()), r.take(), r.take_str(), r.take())
        r.expect_end()
        return tx

    def digest(self) -> bytes:
        return sha256(self.to_bytes())


def sign_transaction(kind: TxKind, payload: bytes, author_kp: KeyPair) -> Transaction:
    return Transaction(
        kind=kind,
        payload=payload,
        author=username_for(author_kp.public_key),
        signature=author_kp.sign(canon(kind.value, payload)),
    )


@dataclass(frozen=True)
class Block:
    height: int
    tick: int
    prev_hash: bytes
    proposer: str
    txs: tuple[Transaction, ...]
    votes: tuple[tuple[str, bytes], ...]

    def content_bytes(self) -> bytes:
        fields: list = ["blk", self.height, self.tick, self.prev_hash, len(self.txs)]
        fields.extend(tx.to_bytes() for tx in self.txs)
        return canon(*fields)

    def content_hash(self) -> bytes:
        return sha256(self.content_bytes())

    def to_bytes(self) -> bytes:
        fields: list = [self.height, self.tick, self.prev_hash, self.proposer,
                        len(self.txs)]
        fields.extend(tx.to_bytes() for tx in self.txs)
        fields.append(len(self.votes))
        for voter, sig in self.votes:
            fields.extend([voter, sig])
        return canon(*fields)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Block":
        r = Reader(raw)
        height = r.take_int()
        tick = r.take_int()
        prev_hash = r.take()
        proposer = r.take_str()
        txs = tuple(Transaction.from_bytes(r.take()) for _ in range(r.take_int()))
        votes = tuple((r.take_str(), r.take()) for _ in range(r.take_int()))
        r.expect_end()
        return cls(height, tick, prev_hash, proposer, txs, votes)

    def block_hash(self) -> bytes:
        return sha256(self.to_bytes())


def vote_bytes(content_hash: bytes) -> bytes:
    return canon("vote", content_hash)


def genesis_block() -> Block:
    return Block(0, 0, GENESIS_PREV_HASH, "", (), ())


# ---------------------------------------------------------------------------
# payload construction

def payload_register(username: str, public_key: bytes) -> bytes:
    return canon("register", username, public_key)


def payload_register_ca(ca_name: str, public_key: bytes) -> bytes:
    return canon("register-ca", ca_name, public_key)


def payload_admit(username: str, cert: Certificate) -> bytes:
    return canon("admit", username, cert.to_bytes())


def payload_poe(owner: str, doc_hash: bytes, chain_id: int | None) -> bytes:
    return canon("poe", owner, doc_hash, chain_id or 0)


def payload_submit(applicant: str, doc_cid: str, poe_chain_id: int | None) -> bytes:
    return canon("submit", applicant, doc_cid, poe_chain_id or 0)


class Decision(Enum):
    GRANT = "grant"
    NEEDS_REFORMATION = "reform"
    REFUSE = "refuse"


class SubmissionStatus(Enum):
    PENDING = "pending"
    GRANTED = "granted"
    NEEDS_REFORMATION = "needs-reformation"
    REFUSED = "refused"
    REJECTED_MALICIOUS = "rejected-malicious"


@dataclass(frozen=True)
class Verdict:
    submission_id: int
    validator: str
    formal_exam: bool
    prior_art: bool
    substantive_exam: bool
    decision: Decision
    comments: str
    malicious: bool
    signature: bytes

    def signed_fields(self) -> bytes:
        return canon(self.submission_id, self.validator, self.formal_exam,
                     self.prior_art, self.substantive_exam, self.decision.value,
                     self.comments, self.malicious)

    def to_bytes(self) -> bytes:
        return self.signed_fields() + canon(self.signature)


def make_verdict(kp: KeyPair, submission_id: int, formal: bool, prior: bool,
                 substantive: bool, decision: Decision, comments: str = "",
                 malicious: bool = False) -> Verdict:
    unsigned = Verdict(submission_id, username_for(kp.public_key), formal, prior,
                       substantive, decision, comments, malicious, b"")
    return Verdict(submission_id, unsigned.validator, formal, prior, substantive,
                   decision, comments, malicious, kp.sign(unsigned.signed_fields()))


def payload_verdict(verdict: Verdict) -> bytes:
    return canon("verdict", verdict.submission_id, verdict.validator,
                 verdict.formal_exam, verdict.prior_art, verdict.substantive_exam,
                 verdict.decision.value, verdict.comments, verdict.malicious,
                 verdict.signature)


def payload_new_class(creator: str, fungibility: Fungibility, symbol: str,
                      metadata_cid: str = "") -> bytes:
    return canon("newclass", creator, fungibility.value, symbol, metadata_cid)


def payload_mint_nft(minter: str, class_id: int, metadata_cid: str) -> bytes:
    return canon("mint-nft", minter, class_id, metadata_cid)


def payload_mint_ft(minter: str, class_id: int, amount: int) -> bytes:
    return canon("mint-ft", minter, class_id, amount)


def payload_transfer_nft(frm: str, to: str, class_id: int, instance_id: int,
                         actor: str) -> bytes:
    return canon("xfer-nft", frm, to, class_id, instance_id, actor)


def payload_transfer_ft(frm: str, to: str, class_id: int, amount: int,
                        actor: str) -> bytes:
    return canon("xfer-ft", frm, to, class_id, amount, actor)


def payload_batch(frm: str, to: str, actor: str,
                  assets: list[NftAsset | FtAsset]) -> bytes:
    fields: list = ["batch", frm, to, actor, len(assets)]
    for asset in assets:
        if isinstance(asset, NftAsset):
            fields.extend(["nft", asset.class_id, asset.instance_id])
        else:
            fields.extend(["ft", asset.class_id, asset.amount])
    return canon(*fields)


def payload_approve(owner: str, operator: str, class_id: int | None) -> bytes:
    return canon("approve", owner, operator, class_id or 0)


def payload_revoke(owner: str, operator: str, class_id: int | None) -> bytes:
    return canon("revoke", owner, operator, class_id or 0)


def payload_fractionalize(owner: str, class_id: int, instance_id: int,
                          shares: int) -> bytes:
    return canon("frac", owner, class_id, instance_id, shares)


def payload_defractionalize(holder: str, shares_class_id: int) -> bytes:
    return canon("defrac", holder, shares_class_id)


def payload_list(seller: str, class_id: int, instance_id: int,
                 mode: ListingMode, price: int) -> bytes:
    return canon("list", seller, class_id, instance_id, mode.value, price)


def payload_cancel(seller: str, listing_id: int) -> bytes:
    return canon("cancel", seller, listing_id)


def payload_request(consumer: str, listing_id: int, agreement_id: int,
                    mode: ListingMode, nda_hash: bytes, signature: bytes) -> bytes:
    return canon("request", consumer, listing_id, agreement_id, mode.value,
                 nda_hash, signature)


def payload_settle(seller: str, agreement_id: int, signature: bytes) -> bytes:
    return canon("settle", seller, agreement_id, signature)


def payload_royalties(author: str, agreement_id: int) -> bytes:
    return canon("royalties", author, agreement_id)


def payload_portfolio(owner: str, metadata_cid: str,
                      constituents: list[tuple[int, int]]) -> bytes:
    fields: list = ["portfolio", owner, metadata_cid, len(constituents)]
    for class_id, instance_id in constituents:
        fields.extend([class_id, instance_id])
    return canon(*fields)


# ---------------------------------------------------------------------------
# examination book

@dataclass
class PatentSubmission:
    submission_id: int
    applicant: str
    doc_cid: ContentId
    poe_chain_ref: int | None
    status: SubmissionStatus = SubmissionStatus.PENDING
    verdicts: dict[str, Verdict] = field(default_factory=dict)
    minted: tuple[int, int] | None = None
    blocks_idle: int = 0
    resolution_note: str = ""
    decided_with: int = 0  # validator-set size at finalization


class ExaminationBook:
    def __init__(self):
        self.submissions: dict[int, PatentSubmission] = {}
        self.next_id = 1

    def add(self, applicant: str, doc_cid: ContentId,
            poe_chain_ref: int | None) -> PatentSubmission:
        sub = PatentSubmission(self.next_id, applicant, doc_cid, poe_chain_ref)
        self.submissions[sub.submission_id] = sub
        self.next_id += 1
        return sub

    def require(self, submission_id: int) -> PatentSubmission:
        sub = self.submissions.get(submission_id)
        if sub is None:
            raise SubmissionNotPending(f"no submission {submission_id}")
        return sub

    def record_verdict(self, verdict: Verdict) -> PatentSubmission:
        sub = self.require(verdict.submission_id)
        if sub.status is not SubmissionStatus.PENDING:
            raise SubmissionNotPending(
                f"submission {sub.submission_id} is {sub.status.value}")
        if verdict.validator in sub.verdicts:
            raise AlreadyVoted(
                f"{verdict.validator} already voted on submission {sub.submission_id}")
        all_pass = verdict.formal_exam and verdict.prior_art and verdict.substantive_exam
        if verdict.decision is Decision.GRANT and not all_pass:
            raise InconsistentVerdict("grant requires all three examinations to pass")
        if verdict.malicious and verdict.decision is not Decision.REFUSE:
            raise InconsistentVerdict("a malicious flag must accompany a refuse decision")
        sub.verdicts[verdict.validator] = verdict
        sub.blocks_idle = 0
        return sub

    def tally(self, submission_id: int, n_validators: int
              ) -> tuple[SubmissionStatus, str]:
        """Outcome implied by the verdicts collected so far.

        Raises QuorumNotReached when fewer than quorum(n) verdicts exist;
        returns PENDING when enough verdicts exist but none of the decisions
        holds a quorum.
        """
        sub = self.require(submission_id)
        q = quorum(n_validators)
        verdicts = list(sub.verdicts.values())
        if len(verdicts) < q:
            raise QuorumNotReached(
                f"{len(verdicts)} verdicts < quorum {q} of {n_validators}")
        if sum(1 for v in verdicts if v.malicious) >= q:
            return SubmissionStatus.REJECTED_MALICIOUS, "flagged malicious"
        counts = Counter(v.decision for v in verdicts)
        for decision, count in counts.most_common():
            if count >= q:
                status = {
                    Decision.GRANT: SubmissionStatus.GRANTED,
                    Decision.NEEDS_REFORMATION: SubmissionStatus.NEEDS_REFORMATION,
                    Decision.REFUSE: SubmissionStatus.REFUSED,
                }[decision]
                return status, f"{count}/{len(verdicts)} votes"
        return SubmissionStatus.PENDING, "no quorum decision"

    def by_status(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for sub in self.submissions.values():
            counts[sub.status.value] = counts.get(sub.status.value, 0) + 1
        return counts


# ---------------------------------------------------------------------------
# validator roster

class ValidatorRoster:
    def __init__(self):
        self.members: dict[str, Certificate] = {}
        self.epoch = 0

    def admit(self, username: str, cert: Certificate, ca_public_key: bytes,
              now: int, identities: IdentityDirectory) -> None:
        if not verify(ca_public_key, cert.content_bytes(), cert.ca_signature):
            raise InvalidCertificate(f"certificate for {username} fails CA verification")
        if not (cert.not_before <= now <= cert.not_after):
            raise ExpiredCertificate(
                f"certificate valid [{cert.not_before}, {cert.not_after}], now {now}")
        record = identities.require(username)
        if record.public_key != cert.subject_public_key:
            raise KeyMismatch(f"certificate subject key is not {username}'s key")
        self.members[username] = cert
        self.epoch += 1

    def current(self, now: int) -> list[str]:
        return sorted(u for u, c in self.members.items()
                      if c.not_before <= now <= c.not_after)


# ---------------------------------------------------------------------------
# world state

class WorldState:
    """Deterministic ledger state machine, one instance per replica."""

    def __init__(self, store: ContentStore | None = None):
        self.identities = IdentityDirectory()
        self.ca_keys: dict[str, bytes] = {}
        self.poe = PoELog()
        self.tokens = TokenRegistry(identities=self.identities)
        self.roster = ValidatorRoster()
        self.book = ExaminationBook()
        self.store = store

        treasury = KeyPair.from_seed(TREASURY_SEED)
        escrow = KeyPair.from_seed(ESCROW_SEED)
        self.treasury_username = username_for(treasury.public_key)
        self.escrow_username = username_for(escrow.public_key)
        self.identities.register_key(treasury.public_key, 0)
        self.identities.register_key(escrow.public_key, 0)

        patent_class = self.tokens.create_class(Fungibility.NON_FUNGIBLE, "PAT")
        payment_class = self.tokens.create_class(Fungibility.FUNGIBLE, "PAY")
        assert patent_class.class_id == PATENT_CLASS
        assert payment_class.class_id == PAYMENT_CLASS
        self.tokens.mint_ft(self.treasury_username, PAYMENT_CLASS,
                            INITIAL_PAYMENT_SUPPLY)

        self.market = Marketplace(self.tokens, self.identities,
                                  escrow_account=self.escrow_username,
                                  payment_class=PAYMENT_CLASS,
                                  patent_class=PATENT_CLASS)

    def __deepcopy__(self, memo):
        dup = object.__new__(WorldState)
        memo[id(self)] = dup
        for name, value in self.__dict__.items():
            if name == "store":
                setattr(dup, name, value)  # storage network is shared, not replicated
            else:
                setattr(dup, name, copy.deepcopy(value, memo))
        return dup

    def clone(self) -> "WorldState":
        return copy.deepcopy(self)

    # -- validators ------------------------------------------------------------

    def validator_usernames(self, now: int) -> list[str]:
        return self.roster.current(now)

    def admit_validator(self, username: str, cert: Certificate, now: int) -> None:
        ca_pk = self.ca_keys.get(cert.issuer_name)
        if ca_pk is None:
            raise InvalidCertificate(f"unknown certificate authority {cert.issuer_name}")
        self.roster.admit(username, cert, ca_pk, now, self.identities)

    # -- examination -------------------------------------------------------------

    def submit_patent(self, applicant: str, doc_cid: ContentId,
                      poe_chain_ref: int | None) -> PatentSubmission:
        self.identities.require(applicant)
        if self.store is not None and not self.store.has(doc_cid):
            raise UnresolvableContent(f"{doc_cid} is not resolvable in storage")
        if poe_chain_ref:
            chain = self.poe.chain(poe_chain_ref)
            if chain is None or chain.owner != applicant:
                raise InvalidTransaction(
                    f"poe chain {poe_chain_ref} missing or not owned by {applicant}")
        return self.book.add(applicant, doc_cid, poe_chain_ref)

    def cast_verdict(self, verdict: Verdict, now: int) -> PatentSubmission:
        members = self.validator_usernames(now)
        if verdict.validator not in members:
            raise NotAValidator(f"{verdict.validator} is not a certified validator")
        record = self.identities.require(verdict.validator)
        if not verify(record.public_key, verdict.signed_fields(), verdict.signature):
            raise InvalidTransaction("verdict signature invalid")
        sub = self.book.record_verdict(verdict)
        # finalize as soon as a quorum decision exists; otherwise stay pending
        try:
            self.finalize_submission(sub.submission_id, len(members))
        except QuorumNotReached:
            pass
        return sub

    def finalize_submission(self, submission_id: int, n_validators: int
                            ) -> tuple[SubmissionStatus, tuple[int, int] | None]:
        sub = self.book.require(submission_id)
        if sub.status is not SubmissionStatus.PENDING:
            return sub.status, sub.minted
        status, note = self.book.tally(submission_id, n_validators)
        if status is SubmissionStatus.PENDING:
            return status, None
        sub.status = status
        sub.resolution_note = note
        sub.decided_with = n_validators
        if status is SubmissionStatus.GRANTED:
            minted = self.tokens.mint_nft(sub.applicant, sub.doc_cid, PATENT_CLASS)
            sub.minted = (minted.class_id, minted.instance_id)
        return status, sub.minted

    # -- transaction application ---------------------------------------------------

    def apply_transaction(self, tx: Transaction, tick: int) -> None:
        try:
            self._apply(tx, tick)
        except LedgerError:
            raise
        except (ValueError, KeyError) as err:
            raise InvalidTransaction(f"malformed transaction: {err}") from err

    def _verify_author(self, tx: Transaction) -> None:
        record = self.identities.require(tx.author)
        if not verify(record.public_key, tx.signing_bytes(), tx.signature):
            raise InvalidTransaction(f"transaction signature invalid for {tx.author}")

    def _apply(self, tx: Transaction, tick: int) -> None:
        r = Reader(tx.payload)
        tag = r.take_str()
        if tx.kind is TxKind.IDENTITY_REG:
            self._apply_identity(tx, tag, r, tick)
        elif tx.kind is TxKind.POE_RECORD:
            self._apply_poe(tx, tag, r, tick)
        elif tx.kind is TxKind.PATENT_SUBMISSION:
            self._apply_patent(tx, tag, r, tick)
        elif tx.kind is TxKind.TOKEN_OP:
            self._apply_token(tx, tag, r)
        elif tx.kind is TxKind.MARKET_OP:
            self._apply_market(tx, tag, r)
        else:  # pragma: no cover - enum is closed
            raise InvalidTransaction(f"unknown transaction kind {tx.kind}")

    def _apply_identity(self, tx: Transaction, tag: str, r: Reader, tick: int) -> None:
        if tag == "register":
            username = r.take_str()
            public_key = r.take()
            r.expect_end()
            if username != username_for(public_key) or tx.author != username:
                raise InvalidTransaction("registration must be self-signed")
            if not verify(public_key, tx.signing_bytes(), tx.signature):
                raise InvalidTransaction("registration signature invalid")
            self.identities.register_key(public_key, tick)
        elif tag == "register-ca":
            ca_name = r.take_str()
            public_key = r.take()
            r.expect_end()
            self._verify_author(tx)
            if tx.author != username_for(public_key):
                raise InvalidTransaction("a CA publishes its own key")
            if ca_name in self.ca_keys:
                raise InvalidTransaction(f"CA name {ca_name} already bound")
            self.ca_keys[ca_name] = public_key
        elif tag == "admit":
            username = r.take_str()
            cert = Certificate.from_bytes(r.take())
            r.expect_end()
            self._verify_author(tx)
            if tx.author != username:
                raise InvalidTransaction("candidates present their own certificate")
            self.admit_validator(username, cert, tick)
        else:
            raise InvalidTransaction(f"unknown identity operation {tag!r}")

    def _apply_poe(self, tx: Transaction, tag: str, r: Reader, tick: int) -> None:
        if tag != "poe":
            raise InvalidTransaction(f"unknown poe operation {tag!r}")
        owner = r.take_str()
        doc_hash = r.take()
        chain_id = r.take_int()
        r.expect_end()
        self._verify_author(tx)
        if tx.author != owner:
            raise InvalidTransaction("existence records are owner-signed")
        self.poe.record_hash(owner, doc_hash, tick, self.identities,
                             chain_id or None)

    def _apply_patent(self, tx: Transaction, tag: str, r: Reader, tick: int) -> None:
        self._verify_author(tx)
        if tag == "submit":
            applicant = r.take_str()
            doc_cid = ContentId.parse(r.take_str())
            poe_ref = r.take_int()
            r.expect_end()
            if tx.author != applicant:
                raise InvalidTransaction("submissions are applicant-signed")
            self.submit_patent(applicant, doc_cid, poe_ref or None)
        elif tag == "verdict":
            verdict = Verdict(
                submission_id=r.take_int(),
                validator=r.take_str(),
                formal_exam=r.take_bool(),
                prior_art=r.take_bool(),
                substantive_exam=r.take_bool(),
                decision=Decision(r.take_str()),
                comments=r.take_str(),
                malicious=r.take_bool(),
                signature=r.take(),
            )
            r.expect_end()
            if tx.author != verdict.validator:
                raise InvalidTransaction("verdicts are validator-signed")
            self.cast_verdict(verdict, tick)
        else:
            raise InvalidTransaction(f"unknown patent operation {tag!r}")

    def _apply_token(self, tx: Transaction, tag: str, r: Reader) -> None:
        self._verify_author(tx)
        if tag == "newclass":
            creator = r.take_str()
            fungibility = Fungibility(r.take_str())
            symbol = r.take_str()
            metadata = r.take_str()
            r.expect_end()
            if tx.author != creator:
                raise InvalidTransaction("class creation is creator-signed")
            cid = ContentId.parse(metadata) if metadata else None
            self.tokens.create_class(fungibility, symbol, cid)
        elif tag == "mint-nft":
            minter = r.take_str()
            class_id = r.take_int()
            metadata = r.take_str()
            r.expect_end()
            if tx.author != minter:
                raise InvalidTransaction("mints are minter-signed")
            cid = ContentId.parse(metadata) if metadata else None
            self.tokens.mint_nft(minter, cid, class_id)
        elif tag == "mint-ft":
            minter = r.take_str()
            class_id = r.take_int()
            amount = r.take_int()
            r.expect_end()
            if tx.author != minter:
                raise InvalidTransaction("mints are minter-signed")
            self.tokens.mint_ft(minter, class_id, amount)
        elif tag == "xfer-nft":
            frm, to = r.take_str(), r.take_str()
            class_id, instance_id = r.take_int(), r.take_int()
            actor = r.take_str()
            r.expect_end()
            if tx.author != actor:
                raise InvalidTransaction("transfers are actor-signed")
            self.tokens.transfer(frm, to, NftAsset(class_id, instance_id), actor)
        elif tag == "xfer-ft":
            frm, to = r.take_str(), r.take_str()
            class_id, amount = r.take_int(), r.take_int()
            actor = r.take_str()
            r.expect_end()
            if tx.author != actor:
                raise InvalidTransaction("transfers are actor-signed")
            self.tokens.transfer(frm, to, FtAsset(class_id, amount), actor)
        elif tag == "batch":
            frm, to, actor = r.take_str(), r.take_str(), r.take_str()
            count = r.take_int()
            assets: list[NftAsset | FtAsset] = []
            for _ in range(count):
                asset_type = r.take_str()
                a, b = r.take_int(), r.take_int()
                assets.append(NftAsset(a, b) if asset_type == "nft" else FtAsset(a, b))
            r.expect_end()
            if tx.author != actor:
                raise InvalidTransaction("transfers are actor-signed")
            self.tokens.batch_transfer(frm, to, assets, actor)
        elif tag == "approve":
            owner, operator = r.take_str(), r.take_str()
            scope = r.take_int()
            r.expect_end()
            if tx.author != owner:
                raise InvalidTransaction("approvals are owner-signed")
            self.tokens.approve_operator(owner, operator, scope or None)
        elif tag == "revoke":
            owner, operator = r.take_str(), r.take_str()
            scope = r.take_int()
            r.expect_end()
            if tx.author != owner:
                raise InvalidTransaction("revocations are owner-signed")
            self.tokens.revoke_operator(owner, operator, scope or None)
        elif tag == "frac":
            owner = r.take_str()
            class_id, instance_id, shares = r.take_int(), r.take_int(), r.take_int()
            r.expect_end()
            if tx.author != owner:
                raise InvalidTransaction("fractionalization is owner-signed")
            self.tokens.fractionalize(owner, class_id, instance_id, shares)
        elif tag == "defrac":
            holder = r.take_str()
            shares_class_id = r.take_int()
            r.expect_end()
            if tx.author != holder:
                raise InvalidTransaction("defractionalization is holder-signed")
            record = self.tokens.fractionalizations.get(shares_class_id)
            if record is None:
                raise InvalidTransaction(f"no fractionalization {shares_class_id}")
            self.tokens.defractionalize(holder, record)
        else:
            raise InvalidTransaction(f"unknown token operation {tag!r}")

    def _apply_market(self, tx: Transaction, tag: str, r: Reader) -> None:
        self._verify_author(tx)
        if tag == "list":
            seller = r.take_str()
            class_id, instance_id = r.take_int(), r.take_int()
            mode = ListingMode(r.take_str())
            price = r.take_int()
            r.expect_end()
            if tx.author != seller:
                raise InvalidTransaction("listings are seller-signed")
            self.market.create_listing(seller, (class_id, instance_id), mode, price)
        elif tag == "cancel":
            seller = r.take_str()
            listing_id = r.take_int()
            r.expect_end()
            if tx.author != seller:
                raise InvalidTransaction("cancellations are seller-signed")
            self.market.cancel_listing(seller, listing_id)
        elif tag == "request":
            consumer = r.take_str()
            listing_id = r.take_int()
            agreement_id = r.take_int()
            mode = ListingMode(r.take_str())
            nda_hash = r.take()
            signature = r.take()
            r.expect_end()
            if tx.author != consumer:
                raise InvalidTransaction("requests are consumer-signed")
            if agreement_id != self.market.peek_agreement_id():
                raise InvalidTransaction(
                    f"agreement id {agreement_id} out of sequence")
            if mode is ListingMode.LICENSE:
                self.market.request_license(consumer, listing_id, nda_hash, signature)
            else:
                self.market.request_purchase(consumer, listing_id, nda_hash, signature)
        elif tag == "settle":
            seller = r.take_str()
            agreement_id = r.take_int()
            signature = r.take()
            r.expect_end()
            if tx.author != seller:
                raise InvalidTransaction("settlements are seller-signed")
            self.market.approve_and_settle(seller, agreement_id, signature)
        elif tag == "royalties":
            author = r.take_str()
            agreement_id = r.take_int()
            r.expect_end()
            if tx.author != author:
                raise InvalidTransaction("distribution requests are author-signed")
            self.market.distribute_royalties(agreement_id)
        elif tag == "portfolio":
            owner = r.take_str()
            metadata_cid = ContentId.parse(r.take_str())
            constituents = [(r.take_int(), r.take_int()) for _ in range(r.take_int())]
            r.expect_end()
            if tx.author != owner:
                raise InvalidTransaction("portfolios are owner-signed")
            from .market import portfolio_metadata_bytes
            from .content_store import content_id
            expected = content_id(portfolio_metadata_bytes(constituents))
            if expected != metadata_cid:
                raise InvalidTransaction("portfolio metadata cid does not match contents")
            if self.store is not None and not self.store.has(metadata_cid):
                self.store.put_object(portfolio_metadata_bytes(constituents))
            self.market.compound_portfolio(owner, constituents, metadata_cid)
        else:
            raise InvalidTransaction(f"unknown market operation {tag!r}")

    # -- block application -----------------------------------------------------------

    def apply_block(self, block: Block) -> None:
        for index, tx in enumerate(block.txs):
            try:
                self.apply_transaction(tx, block.tick)
            except LedgerError as err:
                raise InvalidTransaction(f"tx {index}: {err}", index=index) from err
        self._post_block()

    def _post_block(self) -> None:
        """Per-rotation bookkeeping: stuck submissions time out to refusal."""
        for sub in self.book.submissions.values():
            if sub.status is not SubmissionStatus.PENDING:
                continue
            sub.blocks_idle += 1
            if sub.blocks_idle > SUBMISSION_TIMEOUT_BLOCKS:
                sub.status = SubmissionStatus.REFUSED
                sub.resolution_note = TIMEOUT_COMMENT

    # -- digests and invariants ---------------------------------------------------------

    def state_digest(self) -> bytes:
        h = hashlib.sha256()

        def put(*fields) -> None:
            h.update(canon(*fields))

        for record in self.identities.all_records():
            put(record.username, record.public_key, record.registered_at)
        for name in sorted(self.ca_keys):
            put(name, self.ca_keys[name])
        for chain_id in sorted(self.poe.chains):
            chain = self.poe.chains[chain_id]
            put(chain_id, chain.owner, len(chain.links))
            for record in chain.links:
                h.update(record.to_bytes())
        for class_id in sorted(self.tokens.classes):
            cls = self.tokens.classes[class_id]
            put(class_id, cls.fungibility.value, cls.symbol,
                cls.metadata_cid.text if cls.metadata_cid else "",
                class_id in self.tokens.retired_classes)
        for key in sorted(self.tokens.instances):
            inst = self.tokens.instances[key]
            put(inst.class_id, inst.instance_id, inst.owner,
                inst.metadata_cid.text if inst.metadata_cid else "",
                inst.frozen, inst.frozen_reason)
        for (class_id, owner) in sorted(self.tokens.balances):
            put(class_id, owner, self.tokens.balances[(class_id, owner)])
        for class_id in sorted(self.tokens.supply):
            put(class_id, self.tokens.supply[class_id])
        for owner, operator, scope in sorted(
                self.tokens.approvals, key=lambda a: (a[0], a[1], a[2] or 0)):
            put(owner, operator, scope or 0)
        for shares_class_id in sorted(self.tokens.fractionalizations):
            record = self.tokens.fractionalizations[shares_class_id]
            put(shares_class_id, record.parent[0], record.parent[1],
                record.total_shares, record.active)
        for username in sorted(self.roster.members):
            put(username)
            h.update(self.roster.members[username].to_bytes())
        put(self.roster.epoch)
        for submission_id in sorted(self.book.submissions):
            sub = self.book.submissions[submission_id]
            put(sub.submission_id, sub.applicant, sub.doc_cid.text,
                sub.poe_chain_ref or 0, sub.status.value,
                sub.minted[0] if sub.minted else 0,
                sub.minted[1] if sub.minted else 0,
                sub.blocks_idle, sub.resolution_note, sub.decided_with)
            for validator in sorted(sub.verdicts):
                h.update(sub.verdicts[validator].to_bytes())
        for listing_id in sorted(self.market.listings):
            listing = self.market.listings[listing_id]
            put(listing_id, listing.patent[0], listing.patent[1], listing.seller,
                listing.mode.value, listing.price, listing.active)
        for agreement_id in sorted(self.market.agreements):
            a = self.market.agreements[agreement_id]
            put(agreement_id, a.listing_id, a.consumer, a.nda_hash,
                a.consumer_signature, a.seller_signature, a.settled)
        for agreement_id in sorted(self.market.distributions):
            d = self.market.distributions[agreement_id]
            put(agreement_id, d.gross)
            for owner, amount in d.payouts:
                put(owner, amount)
        for agreement_id in sorted(self.market.pools):
            put(agreement_id, self.market.pools[agreement_id])
        for key in sorted(self.market.portfolios):
            portfolio = self.market.portfolios[key]
            put(key[0], key[1])
            for class_id, instance_id in portfolio.constituents:
                put(class_id, instance_id)
        for text in sorted(self.market.access):
            put(text, *sorted(self.market.access[text]))
        return h.digest()

    def check_invariants(self) -> list[str]:
        problems = self.tokens.check_conservation()
        for sub in self.book.submissions.values():
            if sub.status is SubmissionStatus.GRANTED:
                if sub.minted is None:
                    problems.append(f"submission {sub.submission_id} granted but unminted")
                q = quorum(sub.decided_with) if sub.decided_with else 1
                grants = [v for v in sub.verdicts.values()
                          if v.decision is Decision.GRANT]
                if len(grants) < q:
                    problems.append(
                        f"submission {sub.submission_id} granted with {len(grants)} < {q}")
                if any(not (v.formal_exam and v.prior_art and v.substantive_exam)
                       for v in grants):
                    problems.append(
                        f"submission {sub.submission_id} has a grant without passes")
        return problems


# ---------------------------------------------------------------------------
# chain verification, replay, audit

def block_violations(block: Block, prev: Block, state_before: WorldState) -> list[str]:
    """Structural checks: linkage, proposer legitimacy, quorum of valid votes."""
    problems = []
    if block.height != prev.height + 1:
        problems.append(f"height {block.height} does not follow {prev.height}")
    if block.tick < prev.tick:
        problems.append(f"tick {block.tick} precedes parent tick {prev.tick}")
    if block.prev_hash != prev.block_hash():
        problems.append("prev_hash does not match the parent block")
    voters = [name for name, _ in block.votes]
    if len(set(voters)) != len(voters):
        problems.append("duplicate voter")
    members = state_before.validator_usernames(block.tick)
    content_hash = block.content_hash()
    if members:
        if block.proposer not in members:
            problems.append(f"proposer {block.proposer} not in validator set")
        valid = 0
        for name, sig in block.votes:
            if name not in members:
                problems.append(f"vote from non-member {name}")
                continue
            record = state_before.identities.get(name)
            if record is not None and verify(record.public_key,
                                             vote_bytes(content_hash), sig):
                valid += 1
            else:
                problems.append(f"invalid vote signature from {name}")
        if valid < quorum(len(members)):
            problems.append(
                f"{valid} valid votes < quorum {quorum(len(members))}"
                f" of {len(members)}")
    else:
        # pre-admission bootstrap: the genesis treasury account is the sole authority
        treasury = state_before.treasury_username
        if block.proposer != treasury:
            problems.append("bootstrap block not proposed by the genesis authority")
        if len(block.votes) != 1 or block.votes[0][0] != treasury:
            problems.append("bootstrap block needs exactly the genesis authority vote")
        else:
            record = state_before.identities.get(treasury)
            if record is None or not verify(record.public_key,
                                            vote_bytes(content_hash),
                                            block.votes[0][1]):
                problems.append("bootstrap vote signature invalid")
    return problems


@dataclass
class AuditReport:
    ok: bool
    violations: list[tuple[int, str]]
    blocks: int
    final_state_hash: str | None

    def render(self) -> str:
        lines = [f"blocks: {self.blocks}"]
        if self.ok:
            lines.append(f"state: {self.final_state_hash}")
            lines.append("audit: clean")
        else:
            for height, message in self.violations:
                lines.append(f"height {height}: {message}")
            lines.append(f"audit: {len(self.violations)} violation(s)")
        return "\n".join(lines)


def replay_chain(blocks: list[Block], store: ContentStore | None = None
                 ) -> tuple[WorldState, AuditReport]:
    """Re-run a chain from genesis, re-checking every hash, vote, and transaction."""
    violations: list[tuple[int, str]] = []
    state = WorldState(store)
    if not blocks or blocks[0].to_bytes() != genesis_block().to_bytes():
        violations.append((0, "missing or altered genesis block"))
        return state, AuditReport(False, violations, len(blocks), None)
    prev = blocks[0]
    broken = False
    for block in blocks[1:]:
        if broken:
            violations.append((block.height, "untrusted ancestry"))
            continue
        errs = block_violations(block, prev, state)
        if errs:
            violations.extend((block.height, e) for e in errs)
            broken = True
            continue
        try:
            state.apply_block(block)
        except LedgerError as err:
            violations.append((block.height, f"apply failed: {err}"))
            broken = True
            continue
        prev = block
    ok = not violations
    return state, AuditReport(ok, violations, len(blocks),
                              state.state_digest().hex() if ok else None)


def dump_chain(blocks: list[Block]) -> str:
    return "\n".join(block.to_bytes().hex() for block in blocks) + "\n"


def load_chain(text: str) -> list[Block]:
    from .errors import CorruptDump
    blocks = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            blocks.append(Block.from_bytes(bytes.fromhex(line)))
        except ValueError as err:
            raise CorruptDump(f"line {line_no}: {err}") from err
    if not blocks:
        raise CorruptDump("dump contains no blocks")
    return blocks
