"""Voting consensus over the permissioned ledger.

Single-round vote collection with a rotating proposer. Each validator signs
at most one block content per height (its lock), so two conflicting blocks
can never both gather floor(2n/3)+1 votes while fewer than a third of the
validators misbehave. A proposer that fails to commit simply loses its turn;
there is no view-change machinery. Commits carry the full vote set and are
re-verified by every node before being applied, so a forged or under-voted
commit is rejected uniformly.

Byzantine behaviors modeled: ABSTAIN (withholds proposals and votes) and
EQUIVOCATE (proposes conflicting contents, votes for everything, and
attempts to broadcast under-voted commits).

Until the first validators are admitted, the genesis treasury account
commits blocks alone, which is how admission transactions themselves reach
the chain.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum

from .certs import CertificateAuthority
from .codec import sha256
from .content_store import ContentStore
from .errors import InsufficientVotes, InvalidTransaction, LedgerError, NotAValidator
from .identity import username_for
from .keys import KeyPair, verify
from .ledger import (
    PAYMENT_CLASS,
    Block,
    Transaction,
    TxKind,
    WorldState,
    block_violations,
    genesis_block,
    payload_admit,
    payload_register,
    payload_register_ca,
    payload_transfer_ft,
    quorum,
    sign_transaction,
    vote_bytes,
)

TREASURY_SEED = sha256(b"patent-ledger:genesis:treasury")
MAX_TXS_PER_BLOCK = 64


class Behavior(Enum):
    HONEST = "honest"
    ABSTAIN = "abstain"
    EQUIVOCATE = "equivocate"


@dataclass(frozen=True)
class BlockDraft:
    """Proposal content: everything a vote signs. The proposer is excluded so
    a locked content can be re-proposed by a later proposer."""

    height: int
    tick: int
    prev_hash: bytes
    txs: tuple[Transaction, ...]

    def content_hash(self) -> bytes:
        return Block(self.height, self.tick, self.prev_hash, "", self.txs,
                     ()).content_hash()


class Node:
    """One validator (or the archive observer): a chain, a state replica,
    a mempool, and per-height vote locks."""

    def __init__(self, name: str, kp: KeyPair, state: WorldState,
                 chain: list[Block]):
        self.name = name
        self.kp = kp
        self.state = state
        self.chain = chain
        self.behavior = Behavior.HONEST
        self.mempool: list[Transaction] = []
        self._seen: set[bytes] = set()
        self.locks: dict[int, BlockDraft] = {}
        self.rejected_commits = 0

    @property
    def tip(self) -> Block:
        return self.chain[-1]

    def enqueue(self, tx: Transaction) -> None:
        digest = tx.digest()
        if digest not in self._seen:
            self._seen.add(digest)
            self.mempool.append(tx)

    def _valid_tx_prefix(self, tick: int) -> list[Transaction]:
        """Greedily keep mempool transactions that apply cleanly in order;
        drop the ones that can never apply."""
        if not self.mempool:
            return []
        scratch = self.state.clone()
        kept: list[Transaction] = []
        dropped: list[Transaction] = []
        for tx in self.mempool:
            if len(kept) >= MAX_TXS_PER_BLOCK:
                break
            try:
                scratch.apply_transaction(tx, tick)
            except LedgerError:
                dropped.append(tx)
                continue
            kept.append(tx)
        for tx in dropped:
            self.mempool.remove(tx)
        return kept

    def build_draft(self, tick: int) -> BlockDraft:
        height = self.tip.height + 1
        if height in self.locks:
            return self.locks[height]
        return BlockDraft(height, tick, self.tip.block_hash(),
                          tuple(self._valid_tx_prefix(tick)))

    def build_equivocation(self, draft: BlockDraft) -> BlockDraft | None:
        """A second, conflicting but individually valid content for the same
        height: reorder the transactions, or propose the empty variant."""
        if len(draft.txs) >= 2:
            variant = BlockDraft(draft.height, draft.tick, draft.prev_hash,
                                 tuple(reversed(draft.txs)))
            if self.validate_draft(variant):
                return variant
        if draft.txs:
            return BlockDraft(draft.height, draft.tick, draft.prev_hash, ())
        return None

    def validate_draft(self, draft: BlockDraft) -> bool:
        if draft.height != self.tip.height + 1:
            return False
        if draft.prev_hash != self.tip.block_hash():
            return False
        if not draft.txs:
            return True
        scratch = self.state.clone()
        try:
            for tx in draft.txs:
                scratch.apply_transaction(tx, draft.tick)
        except LedgerError:
            return False
        return True

    def consider_proposal(self, draft: BlockDraft, proposer: str,
                          expected_proposer: str) -> tuple[str, bytes] | None:
        """Return a vote, or None. Honest nodes vote once per height: after
        the first vote they only re-sign the identical content."""
        if self.behavior is Behavior.ABSTAIN:
            return None
        if self.behavior is Behavior.EQUIVOCATE:
            return (self.name, self.kp.sign(vote_bytes(draft.content_hash())))
        if proposer != expected_proposer:
            return None
        locked = self.locks.get(draft.height)
        if locked is not None:
            if locked.content_hash() != draft.content_hash():
                return None
        elif not self.validate_draft(draft):
            return None
        self.locks[draft.height] = draft
        return (self.name, self.kp.sign(vote_bytes(draft.content_hash())))

    def receive_commit(self, block: Block) -> bool:
        """Verify a broadcast commit against the local replica and apply it."""
        problems = block_violations(block, self.tip, self.state)
        if problems:
            self.rejected_commits += 1
            return False
        try:
            self.state.apply_block(block)
        except LedgerError:
            self.rejected_commits += 1
            return False
        self.chain.append(block)
        self.locks.pop(block.height, None)
        committed = {tx.digest() for tx in block.txs}
        self.mempool = [tx for tx in self.mempool if tx.digest() not in committed]
        return True


class ConsensusNetwork:
    """Deterministic synchronous scheduler for a set of validator nodes plus
    an always-honest archive observer that records the canonical chain."""

    def __init__(self, store: ContentStore | None = None, seed: int = 0,
                 ticks_per_round: int = 1, start_tick: int = 0):
        self.rng = random.Random(seed)
        self.ticks_per_round = ticks_per_round
        self.tick = start_tick
        self.round_no = 0
        self.treasury_kp = KeyPair.from_seed(TREASURY_SEED)
        self.archive = Node("archive", self.treasury_kp, WorldState(store),
                            [genesis_block()])
        self.nodes: dict[str, Node] = {}
        self.node_keys: dict[str, KeyPair] = {}
        self.drop_rate = 0.0
        self._round_drops: set[tuple[str, str]] = set()  # (message kind, node name)
        self.commits_rejected = 0

    # -- wiring -------------------------------------------------------------

    def register_validator_key(self, kp: KeyPair) -> str:
        """Make a validator's key available so a replica can be spun up once
        its admission commits."""
        username = username_for(kp.public_key)
        self.node_keys[username] = kp
        return username

    def set_behavior(self, username: str, behavior: Behavior) -> None:
        self.nodes[username].behavior = behavior

    def submit_tx(self, tx: Transaction) -> None:
        self.archive.enqueue(tx)
        for node in self.nodes.values():
            node.enqueue(tx)

    def drop_once(self, kind: str, name: str) -> None:
        """Schedule a one-round message fault: kind is 'proposal' or 'vote'."""
        self._round_drops.add((kind, name))

    def _dropped(self, kind: str, name: str) -> bool:
        if (kind, name) in self._round_drops:
            return True
        if self.drop_rate > 0.0 and self.rng.random() < self.drop_rate:
            return True
        return False

    def _ensure_replicas(self) -> None:
        for username in self.archive.state.roster.members:
            if username in self.nodes:
                continue
            kp = self.node_keys.get(username)
            if kp is None:
                continue
            self.nodes[username] = Node(username, kp, self.archive.state.clone(),
                                        list(self.archive.chain))

    def members(self) -> list[str]:
        return self.archive.state.validator_usernames(self.tick)

    # -- rounds ---------------------------------------------------------------

    def _assemble(self, draft: BlockDraft, proposer: str,
                  votes: list[tuple[str, bytes]]) -> Block:
        return Block(draft.height, draft.tick, draft.prev_hash, proposer,
                     draft.txs, tuple(sorted(votes)))

    def _broadcast_commit(self, block: Block) -> bool:
        accepted = self.archive.receive_commit(block)
        for name in sorted(self.nodes):
            self.nodes[name].receive_commit(block)
        if not accepted:
            self.commits_rejected += 1
        self._ensure_replicas()
        return accepted

    def _bootstrap_round(self) -> Block | None:
        draft = self.archive.build_draft(self.tick)
        vote = (self.archive.state.treasury_username,
                self.treasury_kp.sign(vote_bytes(draft.content_hash())))
        block = self._assemble(draft, self.archive.state.treasury_username, [vote])
        return block if self._broadcast_commit(block) else None

    def run_round(self) -> Block | None:
        """One proposer rotation. Returns the committed block, if any."""
        committed: Block | None = None
        members = self.members()
        if not members:
            committed = self._bootstrap_round()
        else:
            proposer_name = members[self.round_no % len(members)]
            proposer = self.nodes[proposer_name]
            if proposer.behavior is not Behavior.ABSTAIN:
                committed = self._voting_round(members, proposer)
        self.round_no += 1
        self.tick += self.ticks_per_round
        self._round_drops.clear()
        return committed

    def _voting_round(self, members: list[str], proposer: Node) -> Block | None:
        draft = proposer.build_draft(self.tick)
        variants = [draft]
        if proposer.behavior is Behavior.EQUIVOCATE:
            second = proposer.build_equivocation(draft)
            if second is not None:
                variants.append(second)

        tally: dict[bytes, list[tuple[str, bytes]]] = {
            v.content_hash(): [] for v in variants}
        drafts_by_hash = {v.content_hash(): v for v in variants}
        for index, name in enumerate(members):
            node = self.nodes[name]
            # an equivocating proposer shows different halves different contents
            variant = variants[index % len(variants)] if len(variants) > 1 else draft
            if node is not proposer and self._dropped("proposal", name):
                continue
            vote = node.consider_proposal(variant, proposer.name, proposer.name)
            if vote is None:
                continue
            if node is not proposer and self._dropped("vote", name):
                continue
            voter, sig = vote
            record = self.archive.state.identities.get(voter)
            if record is None or not verify(record.public_key,
                                            vote_bytes(variant.content_hash()), sig):
                continue
            tally[variant.content_hash()].append(vote)
            if node.behavior is Behavior.EQUIVOCATE:
                # double-vote: sign every variant it has seen
                for other in variants:
                    if other.content_hash() != variant.content_hash():
                        extra = (name, node.kp.sign(vote_bytes(other.content_hash())))
                        tally[other.content_hash()].append(extra)

        needed = quorum(len(members))
        committed: Block | None = None
        for content_hash, votes in tally.items():
            unique = {voter: sig for voter, sig in votes}
            votes_list = [(voter, unique[voter]) for voter in sorted(unique)]
            block = self._assemble(drafts_by_hash[content_hash], proposer.name,
                                   votes_list)
            if len(votes_list) >= needed:
                if self._broadcast_commit(block) and committed is None:
                    committed = block
            elif proposer.behavior is Behavior.EQUIVOCATE and votes_list:
                # byzantine proposer pushes an under-voted commit; honest
                # nodes must reject it on quorum verification
                self._broadcast_commit(block)
        return committed

    # -- direct single-round commit (spec operation surface) --------------------

    def propose_and_commit(self, proposer_name: str,
                           txs: list[Transaction]) -> Block:
        members = self.members()
        if proposer_name not in members:
            raise NotAValidator(f"{proposer_name} is not in the validator set")
        proposer = self.nodes[proposer_name]
        scratch = proposer.state.clone()
        for index, tx in enumerate(txs):
            try:
                scratch.apply_transaction(tx, self.tick)
            except LedgerError as err:
                raise InvalidTransaction(f"tx {index}: {err}", index=index) from err
        draft = BlockDraft(proposer.tip.height + 1, self.tick,
                           proposer.tip.block_hash(), tuple(txs))
        votes = []
        for name in members:
            vote = self.nodes[name].consider_proposal(draft, proposer_name,
                                                      proposer_name)
            if vote is not None:
                votes.append(vote)
        self.round_no += 1
        self.tick += self.ticks_per_round
        if len(votes) < quorum(len(members)):
            raise InsufficientVotes(
                f"{len(votes)} votes < quorum {quorum(len(members))} of {len(members)}")
        block = self._assemble(draft, proposer_name, votes)
        if not self._broadcast_commit(block):
            raise InsufficientVotes("commit rejected by replicas")
        return block


# ---------------------------------------------------------------------------
# seeded byzantine experiments

@dataclass
class ExperimentResult:
    n: int
    byzantine: int
    seed: int
    rounds: int
    admission_height: int
    final_height: int
    conflicts: list[str] = field(default_factory=list)
    forged_commits_rejected: int = 0

    @property
    def blocks_after_admission(self) -> int:
        return self.final_height - self.admission_height


def _conflicting_heights(nodes: list[Node]) -> list[str]:
    by_height: dict[int, set[bytes]] = {}
    for node in nodes:
        for block in node.chain[1:]:
            by_height.setdefault(block.height, set()).add(block.block_hash())
    return [f"height {h}: {len(hashes)} distinct blocks"
            for h, hashes in sorted(by_height.items()) if len(hashes) > 1]


def run_byzantine_experiment(n: int, byzantine: int, seed: int, rounds: int = 10,
                             behavior: Behavior = Behavior.EQUIVOCATE,
                             drop_rate: float = 0.15) -> ExperimentResult:
    """Admit n validators, mark `byzantine` of them, and run seeded rounds of
    random payment traffic under message loss. Used by the safety harness."""
    rng = random.Random(seed)
    store = ContentStore()
    net = ConsensusNetwork(store, seed=seed)

    ca = CertificateAuthority("office", KeyPair.from_seed(sha256(b"exp-ca")))
    ca_username = net.register_validator_key(ca.key_pair)
    validators: list[KeyPair] = [
        KeyPair.from_seed(sha256(b"exp-validator-%d" % i)) for i in range(n)]

    setup: list[Transaction] = [
        sign_transaction(TxKind.IDENTITY_REG,
                         payload_register(ca_username, ca.public_key), ca.key_pair),
        sign_transaction(TxKind.IDENTITY_REG,
                         payload_register_ca(ca.name, ca.public_key), ca.key_pair),
    ]
    for kp in validators:
        username = net.register_validator_key(kp)
        setup.append(sign_transaction(
            TxKind.IDENTITY_REG, payload_register(username, kp.public_key), kp))
    treasury = net.archive.state.treasury_username
    for kp in validators:
        setup.append(sign_transaction(
            TxKind.TOKEN_OP,
            payload_transfer_ft(treasury, username_for(kp.public_key),
                                PAYMENT_CLASS, 1000, treasury),
            net.treasury_kp))
    for tx in setup:
        net.submit_tx(tx)
    net.run_round()

    for kp in validators:
        username = username_for(kp.public_key)
        cert = ca.issue(username, kp.public_key, 0, 10_000)
        net.submit_tx(sign_transaction(
            TxKind.IDENTITY_REG, payload_admit(username, cert), kp))
    net.run_round()
    admission_height = net.archive.tip.height

    usernames = sorted(net.nodes)
    for name in rng.sample(usernames, byzantine):
        net.set_behavior(name, behavior)
    net.drop_rate = drop_rate

    for _ in range(rounds):
        sender, receiver = rng.sample(validators, 2)
        tx = sign_transaction(
            TxKind.TOKEN_OP,
            payload_transfer_ft(username_for(sender.public_key),
                                username_for(receiver.public_key),
                                PAYMENT_CLASS, 1 + rng.randrange(5),
                                username_for(sender.public_key)),
            sender)
        net.submit_tx(tx)
        net.run_round()

    all_nodes = [net.archive] + [net.nodes[name] for name in sorted(net.nodes)]
    return ExperimentResult(
        n=n,
        byzantine=byzantine,
        seed=seed,
        rounds=rounds,
        admission_height=admission_height,
        final_height=net.archive.tip.height,
        conflicts=_conflicting_heights(all_nodes),
        forged_commits_rejected=sum(node.rejected_commits for node in all_nodes),
    )
