"""Token registry: fungible, non-fungible, and semi-fungible assets.

One registry instance tracks classes, instances, balances, operator
approvals, and fractionalizations. A registry can be scoped to a standards
profile; the profile's capability mask gates which operations it permits,
and conformance_matrix() emits the full profile-by-feature table.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from enum import Enum

from .content_store import ContentId
from .errors import (
    AlreadyFractionalized,
    FrozenAsset,
    IncompleteShares,
    InsufficientBalance,
    NotApprovedOperator,
    NotOwner,
    ProfileUnsupported,
    TooFewShares,
    UnknownIdentity,
    WrongFungibility,
    ZeroAmount,
)
from .identity import IdentityDirectory


class Fungibility(Enum):
    FUNGIBLE = "fungible"
    NON_FUNGIBLE = "non-fungible"
    SEMI_FUNGIBLE = "semi-fungible"


@dataclass(frozen=True)
class TokenClass:
    class_id: int
    fungibility: Fungibility
    symbol: str
    metadata_cid: ContentId | None = None


@dataclass
class TokenInstance:
    class_id: int
    instance_id: int
    owner: str
    metadata_cid: ContentId | None  # write-once, set at mint
    frozen: bool = False
    frozen_reason: str = ""


@dataclass(frozen=True)
class BalanceEntry:
    class_id: int
    owner: str
    amount: int


@dataclass(frozen=True)
class OperatorApproval:
    owner: str
    operator: str
    class_id: int | None  # None = all classes


@dataclass
class FractionalizationRecord:
    parent: tuple[int, int]
    shares_class_id: int
    total_shares: int
    active: bool = True


@dataclass(frozen=True)
class NftAsset:
    class_id: int
    instance_id: int


@dataclass(frozen=True)
class FtAsset:
    class_id: int
    amount: int


Asset = NftAsset | FtAsset


@dataclass(frozen=True)
class Profile:
    name: str
    fungible: bool
    non_fungible: bool
    batch: bool
    operator: bool
    fractional: bool


# Feature support per standard, kept in publication order.
PROFILES: dict[str, Profile] = {
    "ERC-721": Profile("ERC-721", False, True, False, True, False),
    "ERC-1155": Profile("ERC-1155", True, True, True, True, False),
    "dGoods": Profile("dGoods", True, True, True, False, False),
    "Algorand": Profile("Algorand", True, True, True, True, True),
    "Tezos": Profile("Tezos", True, True, True, True, True),
    "Flow": Profile("Flow", True, True, True, True, False),
}

FULL_PROFILE = Profile("full", True, True, True, True, True)

FEATURE_NAMES = ("fungible", "non_fungible", "batch", "operator", "fractional")


def conformance_matrix() -> dict[str, dict[str, bool]]:
    """Profile-by-feature table of the six supported standards."""
    return {
        name: {feature: getattr(profile, feature) for feature in FEATURE_NAMES}
        for name, profile in PROFILES.items()
    }


class TokenRegistry:
    def __init__(self, profile: Profile = FULL_PROFILE,
                 identities: IdentityDirectory | None = None):
        self.profile = profile
        self.identities = identities
        self.classes: dict[int, TokenClass] = {}
        self.instances: dict[tuple[int, int], TokenInstance] = {}
        self.balances: dict[tuple[int, str], int] = {}
        self.supply: dict[int, int] = {}
        self.approvals: set[tuple[str, str, int | None]] = set()
        self.fractionalizations: dict[int, FractionalizationRecord] = {}
        self.retired_classes: set[int] = set()
        self.history: list[tuple] = []
        self._next_class_id = 1

    # -- capability gating -------------------------------------------------

    def _require(self, feature: str) -> None:
        if not getattr(self.profile, feature):
            raise ProfileUnsupported(
                f"profile {self.profile.name} does not support {feature}")

    def _require_registered(self, username: str) -> None:
        if self.identities is not None and username not in self.identities:
            raise UnknownIdentity(f"{username} is not registered")

    # -- classes and minting -----------------------------------------------

    def create_class(self, fungibility: Fungibility, symbol: str,
                     metadata_cid: ContentId | None = None) -> TokenClass:
        if not symbol:
            raise ValueError("class symbol must be non-empty")
        cls = TokenClass(self._next_class_id, fungibility, symbol, metadata_cid)
        self.classes[cls.class_id] = cls
        self.supply[cls.class_id] = 0
        self._next_class_id += 1
        return cls

    def class_of(self, class_id: int) -> TokenClass:
        cls = self.classes.get(class_id)
        if cls is None:
            raise WrongFungibility(f"no such class {class_id}")
        return cls

    def mint_nft(self, minter: str, metadata_cid: ContentId | None,
                 class_id: int) -> TokenInstance:
        self._require("non_fungible")
        self._require_registered(minter)
        cls = self.class_of(class_id)
        if cls.fungibility is Fungibility.FUNGIBLE:
            raise WrongFungibility(f"class {class_id} is fungible; cannot mint an instance")
        next_iid = 1 + max(
            (iid for (cid, iid) in self.instances if cid == class_id), default=0)
        instance = TokenInstance(class_id, next_iid, minter, metadata_cid)
        self.instances[(class_id, next_iid)] = instance
        self.history.append(("mint-nft", class_id, next_iid, minter))
        return instance

    def mint_ft(self, minter: str, class_id: int, amount: int) -> BalanceEntry:
        self._require("fungible")
        cls = self.class_of(class_id)
        if cls.fungibility is Fungibility.NON_FUNGIBLE:
            raise WrongFungibility(f"class {class_id} is non-fungible; cannot mint balance")
        if amount <= 0:
            raise ZeroAmount("mint amount must be positive")
        key = (class_id, minter)
        self.balances[key] = self.balances.get(key, 0) + amount
        self.supply[class_id] += amount
        self.history.append(("mint-ft", class_id, minter, amount))
        return BalanceEntry(class_id, minter, self.balances[key])

    def balance_of(self, class_id: int, owner: str) -> int:
        return self.balances.get((class_id, owner), 0)

    def owner_of(self, class_id: int, instance_id: int) -> str:
        instance = self.instances.get((class_id, instance_id))
        if instance is None:
            raise NotOwner(f"no instance ({class_id}, {instance_id})")
        return instance.owner

    # -- approvals -----------------------------------------------------------

    def approve_operator(self, owner: str, operator: str,
                         class_id: int | None = None) -> OperatorApproval:
        self._require("operator")
        self.approvals.add((owner, operator, class_id))
        return OperatorApproval(owner, operator, class_id)

    def revoke_operator(self, owner: str, operator: str,
                        class_id: int | None = None) -> None:
        self._require("operator")
        self.approvals.discard((owner, operator, class_id))

    def is_approved(self, owner: str, operator: str, class_id: int) -> bool:
        return ((owner, operator, None) in self.approvals
                or (owner, operator, class_id) in self.approvals)

    # -- transfers -----------------------------------------------------------

    def _authorize(self, frm: str, actor: str, class_id: int) -> None:
        if actor != frm and not self.is_approved(frm, actor, class_id):
            raise NotApprovedOperator(f"{actor} may not move assets of {frm}")

    def transfer(self, frm: str, to: str, asset: Asset, actor: str) -> None:
        """Move one asset; authorization is ownership or a covering approval."""
        self._authorize(frm, actor, asset.class_id)
        if isinstance(asset, NftAsset):
            instance = self.instances.get((asset.class_id, asset.instance_id))
            if instance is None or instance.owner != frm:
                raise NotOwner(
                    f"{frm} does not own instance ({asset.class_id}, {asset.instance_id})")
            if instance.frozen:
                raise FrozenAsset(
                    f"instance ({asset.class_id}, {asset.instance_id}) is frozen"
                    f" ({instance.frozen_reason})")
            instance.owner = to
            self.history.append(("xfer-nft", asset.class_id, asset.instance_id, frm, to))
        else:
            if asset.amount <= 0:
                raise ZeroAmount("transfer amount must be positive")
            key_from = (asset.class_id, frm)
            if self.balances.get(key_from, 0) < asset.amount:
                raise InsufficientBalance(
                    f"{frm} holds {self.balances.get(key_from, 0)} of class"
                    f" {asset.class_id}, needs {asset.amount}")
            key_to = (asset.class_id, to)
            self.balances[key_from] -= asset.amount
            self.balances[key_to] = self.balances.get(key_to, 0) + asset.amount
            if self.balances[key_from] == 0:
                del self.balances[key_from]
            self.history.append(("xfer-ft", asset.class_id, frm, to, asset.amount))

    def batch_transfer(self, frm: str, to: str, assets: list[Asset], actor: str) -> None:
        """All-or-nothing: any failing element restores the pre-batch state."""
        self._require("batch")
        snap = self.snapshot()
        for index, asset in enumerate(assets):
            try:
                self.transfer(frm, to, asset, actor)
            except Exception as err:
                self.restore(snap)
                err.args = (f"asset {index}: {err}",)
                err.asset_index = index  # type: ignore[attr-defined]
                raise

    # -- fractionalization -----------------------------------------------------

    def active_fractionalization(self, class_id: int, instance_id: int
                                 ) -> FractionalizationRecord | None:
        for record in self.fractionalizations.values():
            if record.active and record.parent == (class_id, instance_id):
                return record
        return None

    def fractionalize(self, owner: str, class_id: int, instance_id: int,
                      total_shares: int) -> FractionalizationRecord:
        self._require("fractional")
        instance = self.instances.get((class_id, instance_id))
        if instance is None or instance.owner != owner:
            raise NotOwner(f"{owner} does not own instance ({class_id}, {instance_id})")
        if self.active_fractionalization(class_id, instance_id) is not None:
            raise AlreadyFractionalized(
                f"instance ({class_id}, {instance_id}) already has active shares")
        if instance.frozen:
            raise FrozenAsset(
                f"instance ({class_id}, {instance_id}) is frozen ({instance.frozen_reason})")
        if total_shares < 2:
            raise TooFewShares("fractionalization needs at least 2 shares")
        parent_symbol = self.class_of(class_id).symbol
        shares_class = self.create_class(
            Fungibility.FUNGIBLE, f"{parent_symbol}.{instance_id}-SH")
        key = (shares_class.class_id, owner)
        self.balances[key] = total_shares
        self.supply[shares_class.class_id] = total_shares
        instance.frozen = True
        instance.frozen_reason = "fractionalized"
        record = FractionalizationRecord(
            (class_id, instance_id), shares_class.class_id, total_shares)
        self.fractionalizations[shares_class.class_id] = record
        self.history.append(("fractionalize", class_id, instance_id,
                             shares_class.class_id, total_shares))
        return record

    def defractionalize(self, holder: str, record: FractionalizationRecord) -> TokenInstance:
        self._require("fractional")
        if not record.active:
            raise IncompleteShares("share class already retired")
        held = self.balances.get((record.shares_class_id, holder), 0)
        if held != record.total_shares:
            raise IncompleteShares(
                f"{holder} holds {held}/{record.total_shares} shares")
        self.balances.pop((record.shares_class_id, holder), None)
        self.supply[record.shares_class_id] = 0
        self.retired_classes.add(record.shares_class_id)
        record.active = False
        instance = self.instances[record.parent]
        instance.frozen = False
        instance.frozen_reason = ""
        instance.owner = holder
        self.history.append(("defractionalize", *record.parent, record.shares_class_id))
        return instance

    def share_holders(self, record: FractionalizationRecord) -> list[tuple[str, int]]:
        """Holders of the share class, descending by stake then username."""
        holders = [(owner, amount)
                   for (cid, owner), amount in self.balances.items()
                   if cid == record.shares_class_id and amount > 0]
        return sorted(holders, key=lambda h: (-h[1], h[0]))

    # -- freezing (escrow hooks for the marketplace) ---------------------------

    def set_frozen(self, class_id: int, instance_id: int, frozen: bool,
                   reason: str = "") -> None:
        instance = self.instances[(class_id, instance_id)]
        instance.frozen = frozen
        instance.frozen_reason = reason if frozen else ""

    def force_move_ft(self, class_id: int, frm: str, to: str, amount: int) -> None:
        """Internal settlement move: authorization was established out of band
        (double-signed agreement); balances still checked and conserved."""
        if amount == 0:
            return
        key_from = (class_id, frm)
        if self.balances.get(key_from, 0) < amount:
            raise InsufficientBalance(
                f"{frm} holds {self.balances.get(key_from, 0)}, needs {amount}")
        key_to = (class_id, to)
        self.balances[key_from] -= amount
        self.balances[key_to] = self.balances.get(key_to, 0) + amount
        if self.balances[key_from] == 0:
            del self.balances[key_from]
        self.history.append(("settle-ft", class_id, frm, to, amount))

    def force_move_nft(self, class_id: int, instance_id: int, to: str) -> None:
        instance = self.instances[(class_id, instance_id)]
        frm = instance.owner
        instance.owner = to
        self.history.append(("settle-nft", class_id, instance_id, frm, to))

    # -- snapshots ---------------------------------------------------------------

    def snapshot(self) -> dict:
        return {
            "instances": copy.deepcopy(self.instances),
            "balances": dict(self.balances),
            "supply": dict(self.supply),
            "approvals": set(self.approvals),
            "history_len": len(self.history),
        }

    def restore(self, snap: dict) -> None:
        self.instances = snap["instances"]
        self.balances = snap["balances"]
        self.supply = snap["supply"]
        self.approvals = snap["approvals"]
        del self.history[snap["history_len"]:]

    # -- integrity -----------------------------------------------------------------

    def check_conservation(self) -> list[str]:
        problems = []
        for class_id, cls in self.classes.items():
            if cls.fungibility is Fungibility.NON_FUNGIBLE:
                continue
            total = sum(amount for (cid, _), amount in self.balances.items()
                        if cid == class_id)
            if total != self.supply.get(class_id, 0):
                problems.append(
                    f"class {class_id}: balances sum {total} != supply"
                    f" {self.supply.get(class_id, 0)}")
        for (cid, _), amount in self.balances.items():
            if amount < 0:
                problems.append(f"negative balance in class {cid}")
        return problems
