"""Simulated permissioned ledger for patents as non-fungible tokens.

Layers: content-addressed document storage, key-pair identities with a
challenge/response login, certificate-gated validator admission, proof of
existence, a multi-standard token registry, voting consensus over signed
blocks, and a licensing marketplace with royalty distribution. Everything
is deterministic: logical ticks, seeded randomness, canonical encodings.
"""

from .content_store import ContentId, ContentStore, chunk_object, content_id, verify_retrieval
from .identity import (
    IdentityDirectory,
    answer_challenge,
    initiate_login,
    register_identity,
    username_for,
    verify_login,
)
from .certs import Certificate, CertificateAuthority, verify_certificate
from .keys import KeyPair, verify
from .poe import PoELog, verify_chain, verify_existence
from .tokens import (
    Fungibility,
    FtAsset,
    NftAsset,
    Profile,
    PROFILES,
    TokenRegistry,
    conformance_matrix,
)
from .ledger import (
    Block,
    Decision,
    SubmissionStatus,
    Transaction,
    TxKind,
    WorldState,
    quorum,
    replay_chain,
)
from .consensus import Behavior, ConsensusNetwork, run_byzantine_experiment
from .market import ListingMode, Marketplace, split_pro_rata
from .scenario import RunReport, ScenarioRunner, audit_chain, load_script, parse_script, run_scenario

__all__ = [
    "Behavior",
    "Block",
    "Certificate",
    "CertificateAuthority",
    "ConsensusNetwork",
    "ContentId",
    "ContentStore",
    "Decision",
    "Fungibility",
    "FtAsset",
    "IdentityDirectory",
    "KeyPair",
    "ListingMode",
    "Marketplace",
    "NftAsset",
    "PROFILES",
    "PoELog",
    "Profile",
    "RunReport",
    "ScenarioRunner",
    "SubmissionStatus",
    "TokenRegistry",
    "Transaction",
    "TxKind",
    "WorldState",
    "answer_challenge",
    "audit_chain",
    "chunk_object",
    "conformance_matrix",
    "content_id",
    "initiate_login",
    "load_script",
    "parse_script",
    "quorum",
    "register_identity",
    "replay_chain",
    "run_byzantine_experiment",
    "run_scenario",
    "split_pro_rata",
    "username_for",
    "verify",
    "verify_certificate",
    "verify_chain",
    "verify_existence",
    "verify_login",
    "verify_retrieval",
]
