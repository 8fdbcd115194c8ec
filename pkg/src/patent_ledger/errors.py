"""Exception types for every named failure contract in the system."""


class LedgerError(Exception):
    """Base class for all domain errors."""


# content store
class NotFound(LedgerError):
    pass


class IntegrityViolation(LedgerError):
    pass


class MalformedContentId(LedgerError):
    pass


# identity / login
class DuplicateIdentity(LedgerError):
    pass


class UnknownIdentity(LedgerError):
    pass


class InvalidProviderSignature(LedgerError):
    pass


# certificates
class EmptyValidity(LedgerError):
    pass


class InvalidCertificate(LedgerError):
    pass


class ExpiredCertificate(LedgerError):
    pass


class KeyMismatch(LedgerError):
    pass


# token registry
class WrongFungibility(LedgerError):
    pass


class ZeroAmount(LedgerError):
    pass


class NotOwner(LedgerError):
    pass


class NotApprovedOperator(LedgerError):
    pass


class InsufficientBalance(LedgerError):
    pass


class FrozenAsset(LedgerError):
    pass


class AlreadyFractionalized(LedgerError):
    pass


class TooFewShares(LedgerError):
    pass


class IncompleteShares(LedgerError):
    pass


class ProfileUnsupported(LedgerError):
    pass


# ledger / consensus
class NotAValidator(LedgerError):
    pass


class AlreadyVoted(LedgerError):
    pass


class InconsistentVerdict(LedgerError):
    pass


class SubmissionNotPending(LedgerError):
    pass


class QuorumNotReached(LedgerError):
    pass


class InsufficientVotes(LedgerError):
    pass


class UnresolvableContent(LedgerError):
    pass


class InvalidTransaction(LedgerError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


# marketplace
class DuplicateListing(LedgerError):
    pass


class InactiveListing(LedgerError):
    pass


class WrongMode(LedgerError):
    pass


class NotSeller(LedgerError):
    pass


class NotSettled(LedgerError):
    pass


class EmptyPortfolio(LedgerError):
    pass


# scenario harness
class ScriptError(LedgerError):
    def __init__(self, message: str, step_index: int | None = None):
        super().__init__(message)
        self.step_index = step_index


class InvariantViolation(LedgerError):
    pass


class CorruptDump(LedgerError):
    pass
