"""On-ledger identities and the six-step challenge/response login protocol.

A user's public key is their identity; the username is its canonical text
form. Login: the user asks a service provider to authenticate them, the
provider looks the user up on the ledger and returns a signed, timestamped
challenge, the user answers with a credential signed over five fields, and
the verifier checks signatures, freshness, and a per-provider replay cache.
"""

from __future__ import annotations

from dataclasses import dataclass

from .codec import canon, sha256
from .errors import DuplicateIdentity, InvalidProviderSignature, UnknownIdentity
from .keys import KeyPair, verify

DEFAULT_FRESHNESS_WINDOW = 10  # ticks; boundary inclusive


def username_for(public_key: bytes) -> str:
    return "u" + public_key.hex()


@dataclass(frozen=True)
class IdentityRecord:
    username: str
    public_key: bytes
    registered_at: int


@dataclass(frozen=True)
class AuthRequest:
    timestamp: int
    username: str
    provider_signature: bytes


@dataclass(frozen=True)
class LoginCredential:
    timestamp: int
    user_name: str
    user_pk: bytes
    provider_name: str
    provider_pk: bytes
    user_signature: bytes

    def signed_fields(self) -> bytes:
        return canon(self.timestamp, self.user_name, self.user_pk,
                     self.provider_name, self.provider_pk)

    def digest(self) -> bytes:
        return sha256(self.signed_fields() + canon(self.user_signature))


@dataclass(frozen=True)
class LoginResult:
    ok: bool
    code: str

    def __bool__(self) -> bool:
        return self.ok


class IdentityDirectory:
    """Ledger view of registered identities plus the login replay cache."""

    def __init__(self):
        self._by_username: dict[str, IdentityRecord] = {}
        self._accepted: set[tuple[str, bytes]] = set()

    def register_key(self, public_key: bytes, tick: int) -> IdentityRecord:
        username = username_for(public_key)
        if username in self._by_username:
            raise DuplicateIdentity(f"{username} already registered")
        record = IdentityRecord(username, public_key, tick)
        self._by_username[username] = record
        return record

    def get(self, username: str) -> IdentityRecord | None:
        return self._by_username.get(username)

    def require(self, username: str) -> IdentityRecord:
        record = self._by_username.get(username)
        if record is None:
            raise UnknownIdentity(f"no identity registered for {username}")
        return record

    def __contains__(self, username: str) -> bool:
        return username in self._by_username

    def __len__(self) -> int:
        return len(self._by_username)

    def all_records(self) -> list[IdentityRecord]:
        return sorted(self._by_username.values(), key=lambda r: r.username)

    # replay cache, one entry per (provider, credential)
    def credential_seen(self, provider_name: str, cred: LoginCredential) -> bool:
        return (provider_name, cred.digest()) in self._accepted

    def mark_credential(self, provider_name: str, cred: LoginCredential) -> None:
        self._accepted.add((provider_name, cred.digest()))


def register_identity(kp: KeyPair, directory: IdentityDirectory, tick: int) -> IdentityRecord:
    return directory.register_key(kp.public_key, tick)


def initiate_login(username: str, provider_kp: KeyPair,
                   directory: IdentityDirectory, now: int) -> AuthRequest:
    """Provider side: resolve the identity and hand back a signed challenge."""
    directory.require(username)
    directory.require(username_for(provider_kp.public_key))
    return AuthRequest(
        timestamp=now,
        username=username,
        provider_signature=provider_kp.sign(canon(now, username)),
    )


def answer_challenge(kp: KeyPair, req: AuthRequest,
                     provider_record: IdentityRecord) -> LoginCredential:
    """User side: check the provider's challenge, sign the five-field credential."""
    if not verify(provider_record.public_key,
                  canon(req.timestamp, req.username), req.provider_signature):
        raise InvalidProviderSignature("challenge not signed by the claimed provider")
    unsigned = LoginCredential(
        timestamp=req.timestamp,
        user_name=username_for(kp.public_key),
        user_pk=kp.public_key,
        provider_name=provider_record.username,
        provider_pk=provider_record.public_key,
        user_signature=b"",
    )
    return LoginCredential(
        timestamp=unsigned.timestamp,
        user_name=unsigned.user_name,
        user_pk=unsigned.user_pk,
        provider_name=unsigned.provider_name,
        provider_pk=unsigned.provider_pk,
        user_signature=kp.sign(unsigned.signed_fields()),
    )


def verify_login(cred: LoginCredential, directory: IdentityDirectory,
                 now: int, window: int = DEFAULT_FRESHNESS_WINDOW) -> LoginResult:
    """Final step: accept iff identities match the ledger, the signature holds,
    the timestamp is fresh, and the credential was not presented before."""
    user = directory.get(cred.user_name)
    if user is None:
        return LoginResult(False, "unknown-user")
    provider = directory.get(cred.provider_name)
    if provider is None:
        return LoginResult(False, "unknown-provider")
    if user.public_key != cred.user_pk or provider.public_key != cred.provider_pk:
        return LoginResult(False, "key-mismatch")
    if not verify(cred.user_pk, cred.signed_fields(), cred.user_signature):
        return LoginResult(False, "bad-signature")
    if now - cred.timestamp > window or cred.timestamp > now:
        return LoginResult(False, "stale")
    if directory.credential_seen(cred.provider_name, cred):
        return LoginResult(False, "replayed")
    directory.mark_credential(cred.provider_name, cred)
    return LoginResult(True, "ok")
