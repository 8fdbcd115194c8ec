"""Deterministic end-to-end harness: scripted runs with fault injection.

Scripts are plain text, one step per line, `#` comments. A step usually
turns into one or more signed transactions followed by a consensus round,
so scripts read like a chronology of the simulated network. Faults are
scheduled by tick: message drops and delays last one round, byzantine flags
are permanent, storage corruption is immediate.

Same script, same seed, same final state hash - always.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field

from .codec import canon, sha256
from .consensus import Behavior, ConsensusNetwork
from .content_store import ContentStore, content_id
from .errors import CorruptDump, IntegrityViolation, LedgerError, NotFound, ScriptError
from .identity import answer_challenge, initiate_login, username_for, verify_login
from .keys import KeyPair
from .certs import CertificateAuthority, Certificate
from .ledger import (
    PAYMENT_CLASS,
    AuditReport,
    Decision,
    TxKind,
    dump_chain,
    load_chain,
    make_verdict,
    payload_admit,
    payload_approve,
    payload_batch,
    payload_cancel,
    payload_defractionalize,
    payload_fractionalize,
    payload_list,
    payload_mint_ft,
    payload_mint_nft,
    payload_new_class,
    payload_poe,
    payload_portfolio,
    payload_register,
    payload_register_ca,
    payload_request,
    payload_revoke,
    payload_royalties,
    payload_settle,
    payload_submit,
    payload_transfer_ft,
    payload_transfer_nft,
    payload_verdict,
    replay_chain,
    sign_transaction,
)
from .market import ListingMode, agreement_signing_bytes, portfolio_metadata_bytes
from .tokens import Fungibility, FtAsset, NftAsset

FAULT_KINDS = ("drop-message", "delay-message", "byzantine-equivocate",
               "byzantine-abstain", "corrupt-storage-chunk")

_FUNGIBILITY_WORDS = {
    "ft": Fungibility.FUNGIBLE,
    "nft": Fungibility.NON_FUNGIBLE,
    "sft": Fungibility.SEMI_FUNGIBLE,
}

_DECISION_WORDS = {
    "grant": (Decision.GRANT, False),
    "reform": (Decision.NEEDS_REFORMATION, False),
    "refuse": (Decision.REFUSE, False),
    "refuse-malicious": (Decision.REFUSE, True),
}


@dataclass(frozen=True)
class Step:
    command: str
    args: tuple[str, ...]
    line_no: int


@dataclass(frozen=True)
class Fault:
    tick: int
    kind: str
    target: str


@dataclass
class ScenarioScript:
    seed: int = 0
    ticks_per_round: int = 1
    steps: list[Step] = field(default_factory=list)
    faults: list[Fault] = field(default_factory=list)


def parse_script(text: str) -> ScenarioScript:
    script = ScenarioScript()
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        head, args = parts[0], parts[1:]
        if head == "seed":
            script.seed = int(args[0])
        elif head == "ticks-per-round":
            script.ticks_per_round = int(args[0])
        elif head == "fault":
            tick, kind, target = int(args[0]), args[1], args[2]
            if kind not in FAULT_KINDS:
                raise ScriptError(f"line {line_no}: unknown fault kind {kind!r}")
            script.faults.append(Fault(tick, kind, target))
        else:
            script.steps.append(Step(head, tuple(args), line_no))
    script.faults.sort(key=lambda f: f.tick)
    return script


def load_script(path: str) -> ScenarioScript:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_script(fh.read())


@dataclass
class RunReport:
    final_state_hash: str
    blocks_committed: int
    submissions_by_status: dict[str, int]
    invariant_violations: list[str]
    details: dict

    def to_json(self) -> str:
        return json.dumps({
            "final_state_hash": self.final_state_hash,
            "blocks_committed": self.blocks_committed,
            "submissions_by_status": self.submissions_by_status,
            "invariant_violations": self.invariant_violations,
            "details": self.details,
        }, indent=2, sort_keys=True)

    @property
    def ok(self) -> bool:
        return not self.invariant_violations


class ScenarioRunner:
    def __init__(self, script: ScenarioScript):
        self.script = script
        self.rng = random.Random(script.seed)
        self.store = ContentStore()
        self.net = ConsensusNetwork(self.store, seed=script.seed,
                                    ticks_per_round=script.ticks_per_round)
        self.actors: dict[str, KeyPair] = {}
        self.alias: dict[str, str] = {}  # username -> script name
        self.cas: dict[str, CertificateAuthority] = {}
        self.certs: dict[str, Certificate] = {}
        self.docs: dict[str, bytes] = {}
        self.doc_cids: dict[str, str] = {}
        self.chains: dict[str, int] = {}
        self.violations: list[str] = []
        self.logins: list[dict] = []
        self.fetches: list[dict] = []
        self.admission_height = 0
        self._pending_faults = list(script.faults)
        self._seed_bytes = script.seed.to_bytes(8, "big", signed=False)
        self.alias[self.net.archive.state.treasury_username] = "treasury"
        self.alias[self.net.archive.state.escrow_username] = "escrow"

    # -- identity helpers ---------------------------------------------------

    def _actor_seed(self, name: str) -> bytes:
        return sha256(self._seed_bytes + b":actor:" + name.encode())

    def _actor(self, name: str, step: Step) -> KeyPair:
        kp = self.actors.get(name)
        if kp is None:
            raise ScriptError(f"line {step.line_no}: unknown actor {name!r}")
        return kp

    def _username(self, name: str, step: Step) -> str:
        return username_for(self._actor(name, step).public_key)

    def _nice(self, username: str) -> str:
        return self.alias.get(username, username)

    # -- faults ------------------------------------------------------------------

    def _activate_faults(self) -> None:
        still_pending = []
        for fault in self._pending_faults:
            if fault.tick > self.net.tick:
                still_pending.append(fault)
                continue
            if fault.kind in ("drop-message", "delay-message"):
                kind, _, name = fault.target.partition(":")
                username = username_for(self.actors[name].public_key) \
                    if name in self.actors else name
                self.net.drop_once(kind, username)
            elif fault.kind in ("byzantine-equivocate", "byzantine-abstain"):
                username = username_for(self.actors[fault.target].public_key) \
                    if fault.target in self.actors else fault.target
                if username not in self.net.nodes:
                    still_pending.append(fault)  # replica not admitted yet
                    continue
                behavior = (Behavior.EQUIVOCATE if fault.kind.endswith("equivocate")
                            else Behavior.ABSTAIN)
                self.net.set_behavior(username, behavior)
            elif fault.kind == "corrupt-storage-chunk":
                doc, chunk, offset = fault.target.split(":")
                self.store.corrupt(self.doc_cids[doc], int(chunk), int(offset))
        self._pending_faults = still_pending

    # -- round driving ------------------------------------------------------------

    def _run_round(self) -> None:
        members_before = set(self.net.archive.state.roster.members)
        self._activate_faults()
        block = self.net.run_round()
        if block is None:
            return
        state = self.net.archive.state
        if set(state.roster.members) != members_before:
            self.admission_height = self.net.archive.tip.height
        for problem in state.check_invariants():
            self.violations.append(f"block {block.height}: {problem}")
        digest = state.state_digest()
        for name in sorted(self.net.nodes):
            node = self.net.nodes[name]
            if node.behavior is Behavior.HONEST and node.state.state_digest() != digest:
                self.violations.append(
                    f"block {block.height}: replica {self._nice(name)} diverged")

    def _dispatch_and_commit(self, txs: list) -> None:
        for tx in txs:
            self.net.submit_tx(tx)
        self._run_round()

    # -- document helpers -----------------------------------------------------------

    def _doc_bytes(self, spec: str, step: Step) -> bytes:
        form, _, rest = spec.partition(":")
        if form == "text":
            return rest.encode()
        if form == "hex":
            return bytes.fromhex(rest)
        if form == "random":
            return self.rng.randbytes(int(rest))
        raise ScriptError(f"line {step.line_no}: unknown content form {form!r}")

    def _doc(self, name: str, step: Step) -> bytes:
        data = self.docs.get(name)
        if data is None:
            raise ScriptError(f"line {step.line_no}: document {name!r} never stored")
        return data

    # -- step execution ----------------------------------------------------------------

    def run(self) -> RunReport:
        for index, step in enumerate(self.script.steps):
            try:
                self._execute(step)
            except ScriptError:
                raise
            except (LedgerError, ValueError, KeyError, IndexError) as err:
                raise ScriptError(
                    f"line {step.line_no}: step {step.command} failed: {err}",
                    step_index=index) from err
        state = self.net.archive.state
        details = {
            "admission_height": self.admission_height,
            "blocks_after_admission":
                self.net.archive.tip.height - self.admission_height,
            "logins": self.logins,
            "fetches": self.fetches,
            "minted": {
                str(sub.submission_id): list(sub.minted)
                for sub in state.book.submissions.values() if sub.minted},
            "settled_agreements": sorted(
                a.agreement_id for a in state.market.agreements.values() if a.settled),
            "royalties": {
                str(aid): [[self._nice(owner), amount] for owner, amount in d.payouts]
                for aid, d in sorted(state.market.distributions.items())},
        }
        return RunReport(
            final_state_hash=state.state_digest().hex(),
            blocks_committed=self.net.archive.tip.height,
            submissions_by_status=state.book.by_status(),
            invariant_violations=self.violations,
            details=details,
        )

    def chain(self):
        return list(self.net.archive.chain)

    def chain_dump(self) -> str:
        return dump_chain(self.chain())

    def _execute(self, step: Step) -> None:
        self.net.tick += 1
        handler = getattr(self, "_step_" + step.command.replace("-", "_"), None)
        if handler is None:
            raise ScriptError(f"line {step.line_no}: unknown command {step.command!r}")
        handler(step)

    # each handler builds the step's transactions and drives one round

    def _new_actor(self, name: str) -> KeyPair:
        kp = KeyPair.from_seed(self._actor_seed(name))
        self.actors[name] = kp
        self.alias[username_for(kp.public_key)] = name
        return kp

    def _step_ca(self, step: Step) -> None:
        name = step.args[0]
        kp = self._new_actor(name)
        self.cas[name] = CertificateAuthority(name, kp)
        username = username_for(kp.public_key)
        self._dispatch_and_commit([
            sign_transaction(TxKind.IDENTITY_REG,
                             payload_register(username, kp.public_key), kp),
            sign_transaction(TxKind.IDENTITY_REG,
                             payload_register_ca(name, kp.public_key), kp),
        ])

    def _step_register(self, step: Step) -> None:
        name = step.args[0]
        kp = self._new_actor(name)
        self.net.register_validator_key(kp)
        self._dispatch_and_commit([
            sign_transaction(TxKind.IDENTITY_REG,
                             payload_register(username_for(kp.public_key),
                                              kp.public_key), kp)])

    def _step_certify(self, step: Step) -> None:
        ca_name, actor, not_before, not_after = step.args
        ca = self.cas.get(ca_name)
        if ca is None:
            raise ScriptError(f"line {step.line_no}: unknown CA {ca_name!r}")
        kp = self._actor(actor, step)
        self.certs[actor] = ca.issue(actor, kp.public_key,
                                     int(not_before), int(not_after))

    def _step_admit(self, step: Step) -> None:
        actor = step.args[0]
        kp = self._actor(actor, step)
        cert = self.certs.get(actor)
        if cert is None:
            raise ScriptError(f"line {step.line_no}: {actor} holds no certificate")
        self._dispatch_and_commit([
            sign_transaction(TxKind.IDENTITY_REG,
                             payload_admit(username_for(kp.public_key), cert), kp)])

    def _step_fund(self, step: Step) -> None:
        actor, amount = step.args
        treasury = self.net.archive.state.treasury_username
        self._dispatch_and_commit([
            sign_transaction(TxKind.TOKEN_OP,
                             payload_transfer_ft(treasury,
                                                 self._username(actor, step),
                                                 PAYMENT_CLASS, int(amount), treasury),
                             self.net.treasury_kp)])

    def _step_store(self, step: Step) -> None:
        _actor, doc_name, content = step.args
        data = self._doc_bytes(content, step)
        self.docs[doc_name] = data
        self.doc_cids[doc_name] = self.store.put_object(data).text

    def _step_poe(self, step: Step) -> None:
        actor, doc_name = step.args[0], step.args[1]
        chain_name = step.args[2] if len(step.args) > 2 else None
        kp = self._actor(actor, step)
        chain_id = None
        if chain_name is not None:
            chain_id = self.chains.get(chain_name)
            if chain_id is None:
                chain_id = self.net.archive.state.poe.next_chain_id
                self.chains[chain_name] = chain_id
                wire_id = 0  # a zero chain reference opens a fresh chain
            else:
                wire_id = chain_id
        else:
            wire_id = 0
        doc_hash = sha256(self._doc(doc_name, step))
        self._dispatch_and_commit([
            sign_transaction(TxKind.POE_RECORD,
                             payload_poe(username_for(kp.public_key), doc_hash,
                                         wire_id), kp)])

    def _step_submit(self, step: Step) -> None:
        actor, doc_name = step.args[0], step.args[1]
        chain_name = step.args[2] if len(step.args) > 2 else None
        kp = self._actor(actor, step)
        cid = self.doc_cids.get(doc_name)
        if cid is None:
            raise ScriptError(f"line {step.line_no}: document {doc_name!r} not stored")
        chain_id = self.chains.get(chain_name) if chain_name else None
        self._dispatch_and_commit([
            sign_transaction(TxKind.PATENT_SUBMISSION,
                             payload_submit(username_for(kp.public_key), cid,
                                            chain_id), kp)])

    def _step_verdict(self, step: Step) -> None:
        actor, sid, formal, prior, substantive, decision_word = step.args[:6]
        comments = " ".join(step.args[6:])
        kp = self._actor(actor, step)
        decision, malicious = _DECISION_WORDS[decision_word]
        verdict = make_verdict(kp, int(sid), formal == "pass", prior == "pass",
                               substantive == "pass", decision, comments, malicious)
        self._dispatch_and_commit([
            sign_transaction(TxKind.PATENT_SUBMISSION, payload_verdict(verdict), kp)])

    def _step_round(self, step: Step) -> None:
        count = int(step.args[0]) if step.args else 1
        for _ in range(count):
            self._run_round()

    def _step_newclass(self, step: Step) -> None:
        actor, fungibility, symbol = step.args
        kp = self._actor(actor, step)
        self._dispatch_and_commit([
            sign_transaction(TxKind.TOKEN_OP,
                             payload_new_class(username_for(kp.public_key),
                                               _FUNGIBILITY_WORDS[fungibility],
                                               symbol), kp)])

    def _step_mint_nft(self, step: Step) -> None:
        actor, class_id = step.args[0], int(step.args[1])
        doc_name = step.args[2] if len(step.args) > 2 else None
        kp = self._actor(actor, step)
        metadata = self.doc_cids.get(doc_name, "") if doc_name else ""
        self._dispatch_and_commit([
            sign_transaction(TxKind.TOKEN_OP,
                             payload_mint_nft(username_for(kp.public_key), class_id,
                                              metadata), kp)])

    def _step_mint_ft(self, step: Step) -> None:
        actor, class_id, amount = step.args
        kp = self._actor(actor, step)
        self._dispatch_and_commit([
            sign_transaction(TxKind.TOKEN_OP,
                             payload_mint_ft(username_for(kp.public_key),
                                             int(class_id), int(amount)), kp)])

    def _step_send_nft(self, step: Step) -> None:
        frm, to, class_id, instance_id = step.args[:4]
        actor = step.args[4] if len(step.args) > 4 else frm
        kp = self._actor(actor, step)
        self._dispatch_and_commit([
            sign_transaction(TxKind.TOKEN_OP,
                             payload_transfer_nft(self._username(frm, step),
                                                  self._username(to, step),
                                                  int(class_id), int(instance_id),
                                                  username_for(kp.public_key)), kp)])

    def _step_send_ft(self, step: Step) -> None:
        frm, to, class_id, amount = step.args[:4]
        actor = step.args[4] if len(step.args) > 4 else frm
        kp = self._actor(actor, step)
        self._dispatch_and_commit([
            sign_transaction(TxKind.TOKEN_OP,
                             payload_transfer_ft(self._username(frm, step),
                                                 self._username(to, step),
                                                 int(class_id), int(amount),
                                                 username_for(kp.public_key)), kp)])

    def _step_approve(self, step: Step) -> None:
        owner, operator = step.args[:2]
        scope = int(step.args[2]) if len(step.args) > 2 else None
        kp = self._actor(owner, step)
        self._dispatch_and_commit([
            sign_transaction(TxKind.TOKEN_OP,
                             payload_approve(username_for(kp.public_key),
                                             self._username(operator, step), scope),
                             kp)])

    def _step_revoke(self, step: Step) -> None:
        owner, operator = step.args[:2]
        scope = int(step.args[2]) if len(step.args) > 2 else None
        kp = self._actor(owner, step)
        self._dispatch_and_commit([
            sign_transaction(TxKind.TOKEN_OP,
                             payload_revoke(username_for(kp.public_key),
                                            self._username(operator, step), scope),
                             kp)])

    def _step_batch(self, step: Step) -> None:
        frm, to = step.args[:2]
        assets: list[NftAsset | FtAsset] = []
        for item in step.args[2:]:
            kind, a, b = item.split(":")
            assets.append(NftAsset(int(a), int(b)) if kind == "nft"
                          else FtAsset(int(a), int(b)))
        kp = self._actor(frm, step)
        self._dispatch_and_commit([
            sign_transaction(TxKind.TOKEN_OP,
                             payload_batch(username_for(kp.public_key),
                                           self._username(to, step),
                                           username_for(kp.public_key), assets), kp)])

    def _step_frac(self, step: Step) -> None:
        owner, class_id, instance_id, shares = step.args
        kp = self._actor(owner, step)
        self._dispatch_and_commit([
            sign_transaction(TxKind.TOKEN_OP,
                             payload_fractionalize(username_for(kp.public_key),
                                                   int(class_id), int(instance_id),
                                                   int(shares)), kp)])

    def _step_defrac(self, step: Step) -> None:
        holder, shares_class_id = step.args
        kp = self._actor(holder, step)
        self._dispatch_and_commit([
            sign_transaction(TxKind.TOKEN_OP,
                             payload_defractionalize(username_for(kp.public_key),
                                                     int(shares_class_id)), kp)])

    def _step_list(self, step: Step) -> None:
        seller, class_id, instance_id, mode, price = step.args
        kp = self._actor(seller, step)
        self._dispatch_and_commit([
            sign_transaction(TxKind.MARKET_OP,
                             payload_list(username_for(kp.public_key),
                                          int(class_id), int(instance_id),
                                          ListingMode(mode), int(price)), kp)])

    def _step_cancel(self, step: Step) -> None:
        seller, listing_id = step.args
        kp = self._actor(seller, step)
        self._dispatch_and_commit([
            sign_transaction(TxKind.MARKET_OP,
                             payload_cancel(username_for(kp.public_key),
                                            int(listing_id)), kp)])

    def _step_request(self, step: Step) -> None:
        consumer, listing_id, nda_doc = step.args
        kp = self._actor(consumer, step)
        state = self.net.archive.state
        listing = state.market.listings.get(int(listing_id))
        if listing is None:
            raise ScriptError(f"line {step.line_no}: listing {listing_id} unknown")
        agreement_id = state.market.peek_agreement_id()
        nda_hash = sha256(self._doc(nda_doc, step))
        username = username_for(kp.public_key)
        signature = kp.sign(agreement_signing_bytes(
            agreement_id, int(listing_id), username, nda_hash))
        self._dispatch_and_commit([
            sign_transaction(TxKind.MARKET_OP,
                             payload_request(username, int(listing_id), agreement_id,
                                             listing.mode, nda_hash, signature), kp)])

    def _step_settle(self, step: Step) -> None:
        seller, agreement_id = step.args
        kp = self._actor(seller, step)
        agreement = self.net.archive.state.market.agreements.get(int(agreement_id))
        if agreement is None:
            raise ScriptError(f"line {step.line_no}: agreement {agreement_id} unknown")
        signature = kp.sign(agreement.signed_fields())
        self._dispatch_and_commit([
            sign_transaction(TxKind.MARKET_OP,
                             payload_settle(username_for(kp.public_key),
                                            int(agreement_id), signature), kp)])

    def _step_royalties(self, step: Step) -> None:
        actor, agreement_id = step.args
        kp = self._actor(actor, step)
        self._dispatch_and_commit([
            sign_transaction(TxKind.MARKET_OP,
                             payload_royalties(username_for(kp.public_key),
                                               int(agreement_id)), kp)])

    def _step_portfolio(self, step: Step) -> None:
        owner = step.args[0]
        constituents = []
        for item in step.args[1:]:
            class_id, instance_id = item.split(":")
            constituents.append((int(class_id), int(instance_id)))
        kp = self._actor(owner, step)
        metadata = portfolio_metadata_bytes(constituents)
        cid = self.store.put_object(metadata)
        self._dispatch_and_commit([
            sign_transaction(TxKind.MARKET_OP,
                             payload_portfolio(username_for(kp.public_key), cid.text,
                                               constituents), kp)])

    def _step_login(self, step: Step) -> None:
        user, provider = step.args
        user_kp = self._actor(user, step)
        provider_kp = self._actor(provider, step)
        directory = self.net.archive.state.identities
        now = self.net.tick
        try:
            request = initiate_login(username_for(user_kp.public_key), provider_kp,
                                     directory, now)
            credential = answer_challenge(
                user_kp, request, directory.require(username_for(provider_kp.public_key)))
            result = verify_login(credential, directory, now)
            self.logins.append({"user": user, "provider": provider,
                                "ok": result.ok, "code": result.code})
        except LedgerError as err:
            self.logins.append({"user": user, "provider": provider,
                                "ok": False, "code": type(err).__name__})

    def _step_fetch(self, step: Step) -> None:
        _actor, doc_name = step.args
        cid = self.doc_cids.get(doc_name)
        if cid is None:
            raise ScriptError(f"line {step.line_no}: document {doc_name!r} not stored")
        try:
            data = self.store.get_object(cid)
            self.fetches.append({"doc": doc_name, "ok": True,
                                 "matches": data == self.docs[doc_name]})
        except IntegrityViolation:
            self.fetches.append({"doc": doc_name, "ok": False,
                                 "code": "integrity-violation"})
        except NotFound:
            self.fetches.append({"doc": doc_name, "ok": False, "code": "not-found"})

    def _step_corrupt(self, step: Step) -> None:
        doc_name, chunk, offset = step.args
        self.store.corrupt(self.doc_cids[doc_name], int(chunk), int(offset))


def run_scenario(script: ScenarioScript) -> RunReport:
    return ScenarioRunner(script).run()


def audit_chain_text(text: str) -> AuditReport:
    blocks = load_chain(text)
    _, report = replay_chain(blocks)
    return report


def audit_chain(path: str) -> AuditReport:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as err:
        raise CorruptDump(str(err)) from err
    return audit_chain_text(text)
