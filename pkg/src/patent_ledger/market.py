"""Patent marketplace: listings, NDA-backed license agreements, royalties.

Sale listings put the NFT into escrow (frozen) until settlement or
cancellation. License settlements route payment to the seller, or into an
escrow pool when the patent is fractionalized; distribute_royalties then
splits the pool pro-rata across share holders with a deterministic
floor-plus-remainder rule. A settled license also unlocks read access to
the patent's stored content for the consumer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .codec import canon, sha256
from .content_store import ContentId
from .errors import (
    DuplicateListing,
    EmptyPortfolio,
    FrozenAsset,
    InactiveListing,
    InsufficientBalance,
    InvalidTransaction,
    NotOwner,
    NotSeller,
    NotSettled,
    UnknownIdentity,
    WrongMode,
)
from .identity import IdentityDirectory
from .keys import verify
from .tokens import TokenRegistry


class ListingMode(Enum):
    SALE = "sale"
    LICENSE = "license"


@dataclass
class Listing:
    listing_id: int
    patent: tuple[int, int]
    seller: str
    mode: ListingMode
    price: int
    active: bool = True


@dataclass
class LicenseAgreement:
    agreement_id: int
    listing_id: int
    consumer: str
    nda_hash: bytes
    consumer_signature: bytes
    seller_signature: bytes = b""
    settled: bool = False

    def signed_fields(self) -> bytes:
        return canon(self.agreement_id, self.listing_id, self.consumer, self.nda_hash)


@dataclass(frozen=True)
class RoyaltyDistribution:
    agreement_id: int
    gross: int
    payouts: tuple[tuple[str, int], ...]


@dataclass
class Portfolio:
    instance: tuple[int, int]
    constituents: tuple[tuple[int, int], ...]


def agreement_signing_bytes(agreement_id: int, listing_id: int,
                            consumer: str, nda_hash: bytes) -> bytes:
    return canon(agreement_id, listing_id, consumer, nda_hash)


def split_pro_rata(gross: int, holders: list[tuple[str, int]]) -> list[tuple[str, int]]:
    """Floor each share, then hand the remainder out one unit at a time in
    descending share order, ties broken by username."""
    total = sum(stake for _, stake in holders)
    ordered = sorted(holders, key=lambda h: (-h[1], h[0]))
    payouts = {owner: gross * stake // total for owner, stake in ordered}
    remainder = gross - sum(payouts.values())
    for owner, _ in ordered:
        if remainder == 0:
            break
        payouts[owner] += 1
        remainder -= 1
    return [(owner, payouts[owner]) for owner, _ in ordered]


def portfolio_metadata_bytes(constituents: list[tuple[int, int]]) -> bytes:
    """Canonical metadata content binding a portfolio to its constituents."""
    fields: list = ["portfolio", len(constituents)]
    for class_id, instance_id in constituents:
        fields.extend([class_id, instance_id])
    return canon(*fields)


class Marketplace:
    def __init__(self, tokens: TokenRegistry, identities: IdentityDirectory,
                 escrow_account: str, payment_class: int, patent_class: int):
        self.tokens = tokens
        self.identities = identities
        self.escrow_account = escrow_account
        self.payment_class = payment_class
        self.patent_class = patent_class
        self.listings: dict[int, Listing] = {}
        self.agreements: dict[int, LicenseAgreement] = {}
        self.distributions: dict[int, RoyaltyDistribution] = {}
        self.pools: dict[int, int] = {}  # agreement_id -> escrowed gross
        self.portfolios: dict[tuple[int, int], Portfolio] = {}
        self.access: dict[str, set[str]] = {}  # cid text -> usernames
        self._next_listing_id = 1
        self._next_agreement_id = 1

    # -- listings ------------------------------------------------------------

    def active_listing_for(self, patent: tuple[int, int]) -> Listing | None:
        for listing in self.listings.values():
            if listing.active and listing.patent == patent:
                return listing
        return None

    def create_listing(self, seller: str, patent: tuple[int, int],
                       mode: ListingMode, price: int) -> Listing:
        instance = self.tokens.instances.get(patent)
        if instance is None or instance.owner != seller:
            raise NotOwner(f"{seller} does not own patent {patent}")
        if instance.frozen:
            raise FrozenAsset(f"patent {patent} is frozen ({instance.frozen_reason})")
        if self.active_listing_for(patent) is not None:
            raise DuplicateListing(f"patent {patent} already has an active listing")
        if price < 0:
            raise InvalidTransaction("price must be non-negative")
        listing = Listing(self._next_listing_id, patent, seller, mode, price)
        self.listings[listing.listing_id] = listing
        self._next_listing_id += 1
        if mode is ListingMode.SALE:
            self.tokens.set_frozen(*patent, True, reason="escrow")
        return listing

    def cancel_listing(self, seller: str, listing_id: int) -> Listing:
        listing = self.listings.get(listing_id)
        if listing is None or not listing.active:
            raise InactiveListing(f"no active listing {listing_id}")
        if listing.seller != seller:
            raise NotSeller(f"{seller} did not create listing {listing_id}")
        listing.active = False
        if listing.mode is ListingMode.SALE:
            self.tokens.set_frozen(*listing.patent, False)
        return listing

    # -- license agreements ----------------------------------------------------

    def peek_agreement_id(self) -> int:
        return self._next_agreement_id

    def _request_agreement(self, consumer: str, listing_id: int, nda_hash: bytes,
                           consumer_signature: bytes,
                           expected_mode: ListingMode) -> LicenseAgreement:
        if consumer not in self.identities:
            raise UnknownIdentity(f"{consumer} is not registered")
        listing = self.listings.get(listing_id)
        if listing is None or not listing.active:
            raise InactiveListing(f"no active listing {listing_id}")
        if listing.mode is not expected_mode:
            raise WrongMode(
                f"listing {listing_id} is {listing.mode.value}-mode,"
                f" expected {expected_mode.value}")
        agreement = LicenseAgreement(
            agreement_id=self._next_agreement_id,
            listing_id=listing_id,
            consumer=consumer,
            nda_hash=nda_hash,
            consumer_signature=consumer_signature,
        )
        record = self.identities.require(consumer)
        if not verify(record.public_key, agreement.signed_fields(), consumer_signature):
            raise InvalidTransaction("consumer signature does not cover the agreement")
        self.agreements[agreement.agreement_id] = agreement
        self._next_agreement_id += 1
        return agreement

    def request_license(self, consumer: str, listing_id: int, nda_hash: bytes,
                        consumer_signature: bytes) -> LicenseAgreement:
        return self._request_agreement(consumer, listing_id, nda_hash,
                                       consumer_signature, ListingMode.LICENSE)

    def request_purchase(self, consumer: str, listing_id: int, nda_hash: bytes,
                         consumer_signature: bytes) -> LicenseAgreement:
        """Sale-mode counterpart of request_license; settling it moves the NFT."""
        return self._request_agreement(consumer, listing_id, nda_hash,
                                       consumer_signature, ListingMode.SALE)

    def approve_and_settle(self, seller: str, agreement_id: int,
                           seller_signature: bytes) -> LicenseAgreement:
        agreement = self.agreements.get(agreement_id)
        if agreement is None:
            raise NotSettled(f"no agreement {agreement_id}")
        listing = self.listings[agreement.listing_id]
        if listing.seller != seller:
            raise NotSeller(f"{seller} is not the seller of listing {listing.listing_id}")
        if agreement.settled:
            raise InactiveListing(f"agreement {agreement_id} already settled")
        if not listing.active:
            raise InactiveListing(f"listing {listing.listing_id} is no longer active")
        record = self.identities.require(seller)
        if not verify(record.public_key, agreement.signed_fields(), seller_signature):
            raise InvalidTransaction("seller signature does not cover the agreement")
        price = listing.price
        if self.tokens.balance_of(self.payment_class, agreement.consumer) < price:
            raise InsufficientBalance(
                f"{agreement.consumer} cannot cover price {price}")
        # Payment first: to the royalty pool when fractionalized, else the seller.
        fractional = self.tokens.active_fractionalization(*listing.patent)
        if fractional is not None:
            self.tokens.force_move_ft(self.payment_class, agreement.consumer,
                                      self.escrow_account, price)
            self.pools[agreement_id] = price
        else:
            self.tokens.force_move_ft(self.payment_class, agreement.consumer,
                                      seller, price)
        agreement.seller_signature = seller_signature
        agreement.settled = True
        if listing.mode is ListingMode.SALE:
            self.tokens.set_frozen(*listing.patent, False)
            self.tokens.force_move_nft(*listing.patent, agreement.consumer)
            listing.active = False
        self._grant_access(listing.patent, agreement.consumer)
        return agreement

    def _grant_access(self, patent: tuple[int, int], username: str) -> None:
        instance = self.tokens.instances.get(patent)
        if instance is not None and instance.metadata_cid is not None:
            self.access.setdefault(instance.metadata_cid.text, set()).add(username)

    def can_access(self, username: str, cid: ContentId | str) -> bool:
        """Owners of an NFT carrying the content plus settled licensees."""
        text = cid.text if isinstance(cid, ContentId) else cid
        if username in self.access.get(text, set()):
            return True
        return any(inst.metadata_cid is not None and inst.metadata_cid.text == text
                   and inst.owner == username
                   for inst in self.tokens.instances.values())

    # -- royalties -----------------------------------------------------------------

    def distribute_royalties(self, agreement_id: int) -> RoyaltyDistribution:
        agreement = self.agreements.get(agreement_id)
        if agreement is None or not agreement.settled:
            raise NotSettled(f"agreement {agreement_id} is not settled")
        if agreement_id in self.distributions:
            raise NotSettled(f"agreement {agreement_id} already distributed")
        listing = self.listings[agreement.listing_id]
        gross = listing.price
        pooled = self.pools.pop(agreement_id, None)
        if pooled is None:
            # Unfractionalized: settlement already paid the seller in full.
            distribution = RoyaltyDistribution(
                agreement_id, gross, ((listing.seller, gross),))
        else:
            record = self.tokens.active_fractionalization(*listing.patent)
            if record is None:
                raise NotSettled("royalty pool exists but shares were retired")
            holders = self.tokens.share_holders(record)
            payouts = split_pro_rata(pooled, holders)
            for owner, amount in payouts:
                self.tokens.force_move_ft(self.payment_class, self.escrow_account,
                                          owner, amount)
            distribution = RoyaltyDistribution(agreement_id, pooled, tuple(payouts))
        self.distributions[agreement_id] = distribution
        return distribution

    # -- portfolios -------------------------------------------------------------------

    def compound_portfolio(self, owner: str, constituents: list[tuple[int, int]],
                           metadata_cid: ContentId) -> tuple[int, int]:
        if not constituents:
            raise EmptyPortfolio("a portfolio needs at least one patent")
        for patent in constituents:
            instance = self.tokens.instances.get(patent)
            if instance is None or instance.owner != owner:
                raise NotOwner(f"{owner} does not own patent {patent}")
            if instance.frozen:
                raise FrozenAsset(f"patent {patent} is frozen ({instance.frozen_reason})")
        for patent in constituents:
            self.tokens.set_frozen(*patent, True, reason="portfolio")
        minted = self.tokens.mint_nft(owner, metadata_cid, self.patent_class)
        key = (minted.class_id, minted.instance_id)
        self.portfolios[key] = Portfolio(key, tuple(constituents))
        return key
