"""The platform service: gang registry + market behind one lock and one journal.

Every state-changing call is captured as an operation record (with its
timestamp and any random nonce already resolved), applied, and then appended
to the journal. Reopening the platform replays the journal through the same
code paths, so a replayed platform is indistinguishable from the live one.
"""

from __future__ import annotations

import copy
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from ..canon import (
    DecodingError,
    Digest,
    KeyPair,
    PublicKey,
    RandomSource,
    Signature,
    decode_canonical,
    encode_canonical,
    from_tree,
    system_rng,
    to_tree,
)
from ..enclave import VENDOR_PUBLIC, AnchorCommitment, AttestationReport, DeliveryReceipt, PurchaseToken
from ..gang import GangRegistry, GangTemplate, MembershipCertificate
from .core import Market, TradeListing, TradeStatus
from .journal import Journal, read_journal
from .reputation import ReputationConfig

log = logging.getLogger(__name__)

JOURNAL_FILE = "journal.bin"
KEY_FILE = "platform.key"


# ---------------------------------------------------------------- operations


@dataclass(frozen=True)
class CreateGang:
    template: GangTemplate


@dataclass(frozen=True)
class ReserveSlot:
    gang_id: Digest
    nonce: bytes
    now: int


@dataclass(frozen=True)
class OpenSession:
    gang_id: Digest
    slot_id: int
    nonce: bytes
    now: int


@dataclass(frozen=True)
class RegisterMember:
    gang_id: Digest
    report: AttestationReport
    nonce: bytes
    now: int


@dataclass(frozen=True)
class Reregister:
    gang_id: Digest
    old_cert: MembershipCertificate
    report: AttestationReport
    nonce: bytes
    now: int


@dataclass(frozen=True)
class PublishVulnerability:
    security_version: int
    note: str
    now: int


@dataclass(frozen=True)
class Deposit:
    account: PublicKey
    amount: int


@dataclass(frozen=True)
class PostListing:
    listing: TradeListing
    now: int


@dataclass(frozen=True)
class LockFunds:
    listing_id: str
    buyer: PublicKey
    amount: int
    now: int
    idempotency_key: str = ""


@dataclass(frozen=True)
class Cancel:
    trade_id: str
    party: PublicKey
    now: int


@dataclass(frozen=True)
class MarkDelivered:
    trade_id: str
    now: int


@dataclass(frozen=True)
class SubmitReceipt:
    trade_id: str
    receipt: DeliveryReceipt
    container: bytes | None
    token: PurchaseToken | None
    now: int
    idempotency_key: str = ""


@dataclass(frozen=True)
class Dispute:
    trade_id: str
    party: PublicKey
    now: int


@dataclass(frozen=True)
class Resolve:
    trade_id: str
    outcome: TradeStatus
    arbiter_signature: Signature
    now: int


@dataclass(frozen=True)
class Expire:
    trade_id: str
    now: int


@dataclass(frozen=True)
class RedeemToken:
    token: PurchaseToken
    now: int


@dataclass(frozen=True)
class SubmitReview:
    trade_id: str
    reviewer: PublicKey
    rating: int
    comment: str
    now: int


@dataclass(frozen=True)
class RecordAnchor:
    commitment: AnchorCommitment
    now: int


OPS: dict[str, type] = {
    cls.__name__: cls
    for cls in (
        CreateGang, ReserveSlot, OpenSession, RegisterMember, Reregister, PublishVulnerability,
        Deposit, PostListing, LockFunds, Cancel, MarkDelivered, SubmitReceipt, Dispute, Resolve,
        Expire, RedeemToken, SubmitReview, RecordAnchor,
    )
}


def encode_op(op) -> bytes:
    return encode_canonical((type(op).__name__, to_tree(op)))


def decode_op(record: bytes):
    tree = decode_canonical(record)
    if not (isinstance(tree, tuple) and len(tree) == 2 and tree[0] in OPS):
        raise DecodingError("unknown journal operation")
    return from_tree(tree[1], OPS[tree[0]])


# ---------------------------------------------------------------- service


class Platform:
    def __init__(
        self,
        key: KeyPair,
        *,
        journal_path: str | os.PathLike | None = None,
        clock: Callable[[], int] | None = None,
        rng: RandomSource | None = None,
        vendor_public: bytes = VENDOR_PUBLIC,
        config: ReputationConfig | None = None,
        fsync: bool = False,
    ):
        self.key = key
        self.clock = clock or (lambda: int(time.time() * 1000))
        self.rng = rng or system_rng
        self.registry = GangRegistry(key, vendor_public=vendor_public, clock=self.clock, rng=self.rng)
        self.market = Market(self.registry, config=config, clock=self.clock)
        self._lock = threading.RLock()
        self._idempotent: dict[str, Any] = {}
        self.applied = 0
        self._journal = None
        if journal_path is not None:
            for record in read_journal(journal_path):
                self._apply(decode_op(record))
            self._journal = Journal(journal_path, fsync=fsync)

    @classmethod
    def open(cls, state_dir: str | os.PathLike, **kwargs) -> Platform:
        """Load (or initialise) a platform persisted under ``state_dir``."""
        state_dir = Path(state_dir)
        state_dir.mkdir(parents=True, exist_ok=True)
        key_path = state_dir / KEY_FILE
        if key_path.exists():
            key = KeyPair.from_seed(bytes.fromhex(key_path.read_text().strip()))
        else:
            key = KeyPair.generate(kwargs.get("rng"))
            key_path.write_text(key.secret.hex() + "\n")
            os.chmod(key_path, 0o600)
        return cls(key, journal_path=state_dir / JOURNAL_FILE, **kwargs)

    @property
    def public(self) -> PublicKey:
        return self.key.public

    def close(self) -> None:
        if self._journal is not None:
            self._journal.close()

    # -- dispatch

    def _apply(self, op) -> Any:
        reg, mkt = self.registry, self.market
        match op:
            case CreateGang(template):
                result = reg.create_gang(template)
            case ReserveSlot(gang_id, nonce, now):
                result = reg.reserve_slot(gang_id, nonce=nonce, now=now)
            case OpenSession(gang_id, slot_id, nonce, now):
                result = reg.open_session(gang_id, slot_id, nonce=nonce, now=now)
            case RegisterMember(gang_id, report, nonce, now):
                result = reg.register_member(gang_id, report, nonce, now=now)
            case Reregister(gang_id, old_cert, report, nonce, now):
                result = reg.reregister(gang_id, old_cert, report, nonce, now=now)
            case PublishVulnerability(version, note, now):
                result = reg.publish_vulnerability(version, note, now=now)
            case Deposit(account, amount):
                result = mkt.deposit(account, amount)
            case PostListing(listing, now):
                result = mkt.post_listing(listing, now=now)
            case LockFunds(listing_id, buyer, amount, now, key):
                result = mkt.lock_funds(listing_id, buyer, amount, now=now)
                if key:
                    self._idempotent["lock:" + key] = result
            case Cancel(trade_id, party, now):
                result = mkt.cancel(trade_id, party, now=now)
            case MarkDelivered(trade_id, now):
                result = mkt.mark_delivered(trade_id, now=now)
            case SubmitReceipt(trade_id, receipt, container, token, now, key):
                result = mkt.submit_receipt(trade_id, receipt, container, token, now=now)
                if key:
                    self._idempotent["receipt:" + key] = result
            case Dispute(trade_id, party, now):
                result = mkt.dispute(trade_id, party, now=now)
            case Resolve(trade_id, outcome, sig, now):
                result = mkt.resolve(trade_id, outcome, sig, now=now)
            case Expire(trade_id, now):
                result = mkt.expire(trade_id, now=now)
            case RedeemToken(token, now):
                result = mkt.redeem_token(token, now=now)
            case SubmitReview(trade_id, reviewer, rating, comment, now):
                result = mkt.submit_review(trade_id, reviewer, rating, comment, now=now)
            case RecordAnchor(commitment, now):
                result = mkt.record_anchor(commitment, now=now)
            case _:
                raise TypeError(f"unknown operation {op!r}")
        self.applied += 1
        return result

    def _commit(self, op) -> Any:
        # caller holds the lock; failed operations are not journaled
        result = self._apply(op)
        if self._journal is not None:
            self._journal.append(encode_op(op))
        return result

    def submit(self, op) -> Any:
        with self._lock:
            return self._commit(op)

    # -- gang lifecycle

    def create_gang(self, template: GangTemplate) -> Digest:
        return self.submit(CreateGang(template))

    def reserve_slot(self, gang_id: bytes):
        with self._lock:
            return self._commit(ReserveSlot(Digest(bytes(gang_id)), self.rng(16), self.clock()))

    def open_session(self, gang_id: bytes, slot_id: int):
        with self._lock:
            return self._commit(OpenSession(Digest(bytes(gang_id)), slot_id, self.rng(16), self.clock()))

    def register_member(self, gang_id: bytes, report: AttestationReport, nonce: bytes):
        with self._lock:
            return self._commit(RegisterMember(Digest(bytes(gang_id)), report, bytes(nonce), self.clock()))

    def reregister(self, gang_id: bytes, old_cert, report: AttestationReport, nonce: bytes):
        with self._lock:
            return self._commit(
                Reregister(Digest(bytes(gang_id)), old_cert, report, bytes(nonce), self.clock())
            )

    def publish_vulnerability(self, security_version: int, note: str):
        with self._lock:
            return self._commit(PublishVulnerability(security_version, note, self.clock()))

    def members(self, gang_id: bytes):
        with self._lock:
            return self.registry.members(gang_id)

    def verify_membership(self, cert: MembershipCertificate) -> bool:
        with self._lock:
            return self.registry.verify_membership(cert)

    # -- market

    def open_account(self, account: bytes) -> None:
        with self._lock:
            self.market.open_account(account)

    def deposit(self, account: bytes, amount: int) -> int:
        return self.submit(Deposit(PublicKey(bytes(account)), amount))

    def balance_of(self, account: bytes) -> int:
        with self._lock:
            return self.market.balance_of(account)

    def post_listing(self, listing: TradeListing) -> str:
        with self._lock:
            return self._commit(PostListing(listing, self.clock()))

    def lock_funds(self, listing_id: str, buyer: bytes, amount: int, idempotency_key: str = "") -> str:
        """``listing_id`` may also name the listing's trade (``T...``)."""
        with self._lock:
            if idempotency_key and "lock:" + idempotency_key in self._idempotent:
                return self._idempotent["lock:" + idempotency_key]
            if listing_id in self.market.trades:
                listing_id = self.market.trades[listing_id].listing_id
            return self._commit(
                LockFunds(listing_id, PublicKey(bytes(buyer)), amount, self.clock(), idempotency_key)
            )

    def cancel(self, trade_id: str, party: bytes):
        with self._lock:
            return self._commit(Cancel(trade_id, PublicKey(bytes(party)), self.clock()))

    def mark_delivered(self, trade_id: str):
        with self._lock:
            return self._commit(MarkDelivered(trade_id, self.clock()))

    def submit_receipt(
        self, trade_id: str, receipt: DeliveryReceipt, container: bytes | None = None,
        token: PurchaseToken | None = None, idempotency_key: str = "",
    ):
        with self._lock:
            if idempotency_key and "receipt:" + idempotency_key in self._idempotent:
                return self._idempotent["receipt:" + idempotency_key]
            trade = self.market.trades.get(trade_id)
            if trade is not None and trade.status is TradeStatus.SETTLED and trade.receipt == receipt:
                return trade  # replay is a no-op and is not journaled
            return self._commit(
                SubmitReceipt(trade_id, receipt, container, token, self.clock(), idempotency_key)
            )

    def dispute(self, trade_id: str, party: bytes):
        with self._lock:
            return self._commit(Dispute(trade_id, PublicKey(bytes(party)), self.clock()))

    def resolve(self, trade_id: str, outcome: TradeStatus, arbiter_signature: bytes):
        with self._lock:
            return self._commit(
                Resolve(trade_id, TradeStatus(outcome), Signature(bytes(arbiter_signature)), self.clock())
            )

    def expire(self, trade_id: str):
        with self._lock:
            return self._commit(Expire(trade_id, self.clock()))

    def redeem_token(self, token: PurchaseToken):
        with self._lock:
            return self._commit(RedeemToken(token, self.clock()))

    def submit_review(self, trade_id: str, reviewer: bytes, rating: int, comment: str = ""):
        with self._lock:
            return self._commit(SubmitReview(trade_id, PublicKey(bytes(reviewer)), rating, comment, self.clock()))

    def reputation(self, seller: bytes):
        with self._lock:
            return self.market.reputation(seller)

    def record_anchor(self, commitment: AnchorCommitment) -> int:
        with self._lock:
            return self._commit(RecordAnchor(commitment, self.clock()))

    def verify_trace(self, manifest):
        with self._lock:
            return self.market.verify_trace(manifest)

    # -- read-only queries (shared surface with the HTTP client)

    def gangs(self) -> dict[str, GangTemplate]:
        with self._lock:
            return {g.hex(): self.registry.template(g) for g in self.registry.gang_ids()}

    def template(self, gang_id: bytes) -> GangTemplate:
        with self._lock:
            return self.registry.template(gang_id)

    def membership_status(self, cert: MembershipCertificate):
        with self._lock:
            return self.registry.membership_status(cert)

    def bulletin(self):
        with self._lock:
            return list(self.registry.bulletin)

    def browse(self, include_closed: bool = False) -> dict[str, tuple[TradeListing, str | None]]:
        with self._lock:
            mkt = self.market
            return {lid: (l, mkt.listing_trade.get(lid))
                    for lid, l in mkt.browse(open_only=not include_closed).items()}

    def trade(self, trade_id: str):
        with self._lock:
            return copy.deepcopy(self.market._trade(trade_id))

    def anchors(self, agent: bytes | None = None) -> list[tuple[Any, str]]:
        with self._lock:
            mkt = self.market
            entries = mkt.anchors if agent is None else mkt.anchors_for(agent)
            return [(e, mkt.anchor_status(e)) for e in entries]
