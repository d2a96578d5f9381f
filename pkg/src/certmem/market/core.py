"""Trade postings, receipt-gated escrow, purchase tokens, reviews and anchors.

Credits are plain integers. Funds only ever move through :meth:`Market._move`,
which records a cause for every transfer so tests can audit that sellers are
paid only on a verified receipt or an arbiter's Settled decision.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field
from typing import Callable

from ..canon import Digest, KeyPair, PublicKey, Signature, Tag, encode_canonical, verify
from ..enclave import (
    AnchorCommitment,
    DeliveryReceipt,
    MetadataStatement,
    PurchaseToken,
    verify_receipt,
    verify_token,
)
from ..gang import GangRegistry, MembershipCertificate, certificate_genesis
from ..ledger import artifact_hash, verify_container
from .reputation import DAY_MS, ReputationConfig, ReputationScore, Review, aggregate
from .trace import LineageReport, TraceManifest, verify_trace


class MarketError(Exception):
    pass


class InsufficientFunds(MarketError):
    pass


class IllegalTransition(MarketError):
    pass


class InvalidListing(MarketError):
    pass


class InvalidReceipt(MarketError):
    pass


class NotEligible(MarketError):
    pass


class InvalidAnchor(MarketError):
    pass


class TradeStatus(str, enum.Enum):
    POSTED = "Posted"
    LOCKED = "Locked"
    DELIVERED = "Delivered"
    SETTLED = "Settled"
    DISPUTED = "Disputed"
    REFUNDED = "Refunded"
    CANCELLED = "Cancelled"


LEGAL_TRANSITIONS: dict[TradeStatus, frozenset[TradeStatus]] = {
    TradeStatus.POSTED: frozenset({TradeStatus.LOCKED, TradeStatus.CANCELLED}),
    TradeStatus.LOCKED: frozenset(
        {TradeStatus.DELIVERED, TradeStatus.SETTLED, TradeStatus.DISPUTED, TradeStatus.REFUNDED}
    ),
    # a seller-declared delivery that never yields a receipt must stay disputable
    TradeStatus.DELIVERED: frozenset({TradeStatus.SETTLED, TradeStatus.DISPUTED}),
    TradeStatus.DISPUTED: frozenset({TradeStatus.SETTLED, TradeStatus.REFUNDED}),
    TradeStatus.SETTLED: frozenset(),
    TradeStatus.REFUNDED: frozenset(),
    TradeStatus.CANCELLED: frozenset(),
}


class ListingKind(str, enum.Enum):
    OFFER = "offer"
    REQUEST = "request"


@dataclass(frozen=True)
class TradeListing:
    kind: ListingKind
    price: int
    seller_endpoint: str = ""
    seller_cert: MembershipCertificate | None = None
    metadata: MetadataStatement | None = None
    # artifact container with an empty or partial selection, shown to browsers
    advertisement: bytes | None = None
    # hash of the artifact container that will be delivered (encrypted) off-platform
    encrypted_artifact_hash: Digest | None = None
    resale_allowed: bool = False
    requester: PublicKey | None = None
    note: str = ""


@dataclass(frozen=True)
class Transition:
    status: TradeStatus
    at: int


@dataclass
class TradeState:
    trade_id: str
    listing_id: str
    seller: bytes
    price: int
    status: TradeStatus = TradeStatus.POSTED
    buyer: bytes | None = None
    escrow_amount: int = 0
    locked_at: int | None = None
    receipt: DeliveryReceipt | None = None
    token: PurchaseToken | None = None
    history: list[Transition] = field(default_factory=list)


@dataclass(frozen=True)
class Transfer:
    account: bytes
    amount: int
    cause: str
    trade_id: str = ""


@dataclass(frozen=True)
class AnchorEntry:
    position: int
    commitment: AnchorCommitment
    received_at: int
    security_version: int
    platform_signature: Signature


def arbiter_payload(trade_id: str, outcome: TradeStatus) -> bytes:
    return encode_canonical((trade_id, outcome.value))


def arbiter_sign(platform_key: KeyPair, trade_id: str, outcome: TradeStatus) -> Signature:
    return platform_key.sign(Tag.ARBITER, arbiter_payload(trade_id, outcome))


class Market:
    def __init__(
        self,
        registry: GangRegistry,
        *,
        config: ReputationConfig | None = None,
        clock: Callable[[], int] | None = None,
        lock_timeout_ms: int = 7 * DAY_MS,
    ):
        self.registry = registry
        self.config = config or ReputationConfig()
        self.clock = clock or (lambda: int(time.time() * 1000))
        self.lock_timeout_ms = lock_timeout_ms
        self.balances: dict[bytes, int] = {}
        self.total_deposits = 0
        self.listings: dict[str, TradeListing] = {}
        self.trades: dict[str, TradeState] = {}
        self.listing_trade: dict[str, str] = {}
        self.transfers: list[Transfer] = []
        self.eligible: set[tuple[str, bytes]] = set()
        self.redeemed: set[tuple[str, bytes]] = set()
        self.off_platform: dict[tuple[str, bytes], PurchaseToken] = {}
        self.reviews: list[Review] = []
        self.anchors: list[AnchorEntry] = []

    def _now(self, now: int | None) -> int:
        return self.clock() if now is None else now

    # -- accounts

    def open_account(self, account: bytes) -> None:
        self.balances.setdefault(bytes(account), 0)

    def deposit(self, account: bytes, amount: int) -> int:
        if not isinstance(amount, int) or amount <= 0:
            raise MarketError("deposit amount must be a positive integer")
        self.open_account(account)
        self.total_deposits += amount
        self._move(bytes(account), amount, "deposit")
        return self.balances[bytes(account)]

    def balance_of(self, account: bytes) -> int:
        return self.balances.get(bytes(account), 0)

    @property
    def escrow_total(self) -> int:
        return sum(t.escrow_amount for t in self.trades.values())

    def _move(self, account: bytes, amount: int, cause: str, trade_id: str = "") -> None:
        new = self.balances.get(account, 0) + amount
        if new < 0:
            raise InsufficientFunds(f"balance {self.balances.get(account, 0)} < {-amount}")
        self.balances[account] = new
        self.transfers.append(Transfer(account, amount, cause, trade_id))

    # -- listings

    def post_listing(self, listing: TradeListing, *, now: int | None = None) -> str:
        now = self._now(now)
        if listing.price < 0:
            raise InvalidListing("negative price")
        if listing.kind is ListingKind.OFFER:
            self._check_offer(listing)
        elif listing.requester is None:
            raise InvalidListing("a request needs a requester identity")
        listing_id = f"L{len(self.listings) + 1:06d}"
        self.listings[listing_id] = listing
        if listing.kind is ListingKind.OFFER:
            trade_id = f"T{len(self.trades) + 1:06d}"
            trade = TradeState(trade_id, listing_id, bytes(listing.seller_cert.agent_public), listing.price)
            trade.history.append(Transition(TradeStatus.POSTED, now))
            self.trades[trade_id] = trade
            self.listing_trade[listing_id] = trade_id
        return listing_id

    def _check_offer(self, listing: TradeListing) -> None:
        cert = listing.seller_cert
        if cert is None or listing.metadata is None or listing.encrypted_artifact_hash is None:
            raise InvalidListing("an offer needs a certificate, metadata and an artifact hash")
        status = self.registry.membership_status(cert)
        if not status.valid:
            raise InvalidListing(f"invalid certificate: {status.problems}")
        if status.superseded:
            raise InvalidListing("certificate superseded; re-registered identity required")
        meta = listing.metadata
        if meta.agent_public != cert.agent_public or not meta.verify():
            raise InvalidListing("metadata statement not signed by the certified agent")
        if meta.interaction_count != meta.root.length:
            raise InvalidListing("interaction count disagrees with the claimed root")
        if listing.advertisement is not None:
            template = self.registry.template(cert.gang_id)
            report = verify_container(
                listing.advertisement, meta.root, certificate_genesis(cert, template)
            )
            if not report.accepted:
                raise InvalidListing(f"advertisement fails verification: {report.failed()}")

    def browse(self, kind: ListingKind | None = None, open_only: bool = True) -> dict[str, TradeListing]:
        out = {}
        for lid, listing in self.listings.items():
            if kind is not None and listing.kind is not kind:
                continue
            tid = self.listing_trade.get(lid)
            if open_only and tid and self.trades[tid].status is not TradeStatus.POSTED:
                continue
            out[lid] = listing
        return out

    def trade_for(self, listing_id: str) -> TradeState:
        try:
            return self.trades[self.listing_trade[listing_id]]
        except KeyError:
            raise MarketError(f"no trade for listing {listing_id}") from None

    # -- the escrow state machine

    def _trade(self, trade_id: str) -> TradeState:
        try:
            return self.trades[trade_id]
        except KeyError:
            raise MarketError(f"unknown trade {trade_id}") from None

    def _transition(self, trade: TradeState, to: TradeStatus, now: int) -> None:
        if to not in LEGAL_TRANSITIONS[trade.status]:
            raise IllegalTransition(f"{trade.trade_id}: {trade.status.value} -> {to.value}")
        trade.status = to
        trade.history.append(Transition(to, now))

    def _release(self, trade: TradeState, to: bytes, cause: str) -> None:
        amount = trade.escrow_amount
        trade.escrow_amount = 0
        self._move(to, amount, cause, trade.trade_id)

    def lock_funds(
        self, listing_id: str, buyer: bytes, amount: int, *, now: int | None = None
    ) -> str:
        now = self._now(now)
        trade = self.trade_for(listing_id)
        buyer = bytes(buyer)
        if trade.status is not TradeStatus.POSTED:
            raise IllegalTransition(f"listing {listing_id} is {trade.status.value}")
        if amount != trade.price:
            raise MarketError(f"amount {amount} != price {trade.price}")
        if self.balance_of(buyer) < amount:
            raise InsufficientFunds(f"balance {self.balance_of(buyer)} < {amount}")
        self._transition(trade, TradeStatus.LOCKED, now)
        self._move(buyer, -amount, "lock", trade.trade_id)
        trade.escrow_amount = amount
        trade.buyer = buyer
        trade.locked_at = now
        return trade.trade_id

    def cancel(self, trade_id: str, party: bytes, *, now: int | None = None) -> TradeState:
        trade = self._trade(trade_id)
        if bytes(party) != trade.seller:
            raise MarketError("only the seller may cancel a posting")
        self._transition(trade, TradeStatus.CANCELLED, self._now(now))
        return trade

    def mark_delivered(self, trade_id: str, *, now: int | None = None) -> TradeState:
        trade = self._trade(trade_id)
        self._transition(trade, TradeStatus.DELIVERED, self._now(now))
        return trade

    def submit_receipt(
        self,
        trade_id: str,
        receipt: DeliveryReceipt,
        container: bytes | None = None,
        token: PurchaseToken | None = None,
        *,
        now: int | None = None,
    ) -> TradeState:
        now = self._now(now)
        trade = self._trade(trade_id)
        if trade.status is TradeStatus.SETTLED and trade.receipt == receipt:
            return trade  # replayed receipt: no-op
        if trade.status not in (TradeStatus.LOCKED, TradeStatus.DELIVERED):
            raise IllegalTransition(f"{trade_id} is {trade.status.value}; receipt not accepted")
        listing = self.listings[trade.listing_id]
        if not verify_receipt(receipt, trade.seller):
            raise InvalidReceipt("receipt signature does not verify under the seller's key")
        if receipt.trade_id != trade_id or receipt.buyer != trade.buyer:
            raise InvalidReceipt("receipt is bound to another trade or buyer")
        if receipt.artifact_hash != listing.encrypted_artifact_hash:
            raise InvalidReceipt("receipt names another artifact")
        if receipt.referenced_root != listing.metadata.root:
            raise InvalidReceipt("receipt references another root")
        if container is not None:
            if artifact_hash(container) != receipt.artifact_hash:
                raise InvalidReceipt("delivered container does not match the receipt")
            cert = listing.seller_cert
            genesis = certificate_genesis(cert, self.registry.template(cert.gang_id))
            report = verify_container(container, receipt.referenced_root, genesis)
            if not report.accepted:
                raise InvalidReceipt(f"delivered artifact fails verification: {report.failed()}")
        if token is not None and not (
            verify_token(token) and token.trade_id == trade_id and token.buyer == trade.buyer
            and token.seller == trade.seller
        ):
            raise InvalidReceipt("purchase token does not match the trade")
        self._transition(trade, TradeStatus.SETTLED, now)
        self._release(trade, trade.seller, "receipt")
        trade.receipt = receipt
        trade.token = token
        self.eligible.add((trade_id, trade.buyer))
        return trade

    def dispute(self, trade_id: str, party: bytes, *, now: int | None = None) -> TradeState:
        trade = self._trade(trade_id)
        if bytes(party) not in (trade.buyer, trade.seller):
            raise MarketError("only a trade party may open a dispute")
        self._transition(trade, TradeStatus.DISPUTED, self._now(now))
        return trade

    def resolve(
        self, trade_id: str, outcome: TradeStatus, arbiter_signature: bytes, *, now: int | None = None
    ) -> TradeState:
        trade = self._trade(trade_id)
        outcome = TradeStatus(outcome)
        if trade.status is not TradeStatus.DISPUTED:
            raise IllegalTransition(f"{trade_id} is not disputed")
        if outcome not in (TradeStatus.SETTLED, TradeStatus.REFUNDED):
            raise MarketError("a dispute resolves to Settled or Refunded")
        if not verify(self.registry.public, Tag.ARBITER, arbiter_payload(trade_id, outcome),
                      arbiter_signature):
            raise MarketError("resolution not signed by the platform arbiter")
        self._transition(trade, outcome, self._now(now))
        if outcome is TradeStatus.SETTLED:
            self._release(trade, trade.seller, "arbiter")
            self.eligible.add((trade_id, trade.buyer))
        else:
            self._release(trade, trade.buyer, "refund")
        return trade

    def expire(self, trade_id: str, *, now: int | None = None) -> TradeState:
        now = self._now(now)
        trade = self._trade(trade_id)
        if trade.status is not TradeStatus.LOCKED or now < trade.locked_at + self.lock_timeout_ms:
            raise IllegalTransition(f"{trade_id} cannot time out yet")
        self._transition(trade, TradeStatus.REFUNDED, now)
        self._release(trade, trade.buyer, "refund")
        return trade

    # -- tokens and reviews

    def redeem_token(self, token: PurchaseToken, *, now: int | None = None) -> tuple[str, bytes]:
        key = (token.trade_id, bytes(token.buyer))
        if token.redeemed or key in self.redeemed:
            raise NotEligible("token already redeemed")
        if not verify_token(token):
            raise NotEligible("seller signature on token does not verify")
        if self.registry.certificate_for(token.seller) is None:
            raise NotEligible("token issued by an uncertified seller")
        trade = self.trades.get(token.trade_id)
        if trade is not None:
            if trade.status is not TradeStatus.SETTLED or trade.buyer != key[1] or trade.seller != bytes(token.seller):
                raise NotEligible("token does not match a settled platform trade")
        else:
            self.off_platform[key] = token
        self.redeemed.add(key)
        self.eligible.add(key)
        return key

    def submit_review(
        self, trade_id: str, reviewer: bytes, rating: int, comment: str = "", *, now: int | None = None
    ) -> Review:
        reviewer = bytes(reviewer)
        if not isinstance(rating, int) or not 1 <= rating <= 5:
            raise MarketError("rating must be an integer in 1..5")
        if (trade_id, reviewer) not in self.eligible:
            raise NotEligible("reviewer has no completed or redeemed purchase for this trade")
        if any(r.trade_id == trade_id and r.buyer == reviewer for r in self.reviews):
            raise NotEligible("trade already reviewed")
        trade = self.trades.get(trade_id)
        if trade is not None:
            seller, escrow = trade.seller, trade.price
        else:
            token = self.off_platform[(trade_id, reviewer)]
            seller, escrow = bytes(token.seller), token.amount
        review = Review(trade_id, seller, reviewer, rating, comment, self._now(now), escrow)
        self.reviews.append(review)
        return review

    def _same_owner(self, a: bytes, b: bytes) -> bool:
        ca, cb = self.registry.certificate_for(a), self.registry.certificate_for(b)
        return ca is not None and cb is not None and ca.owner_seed_hash == cb.owner_seed_hash

    def reputation(self, seller: bytes, *, now: int | None = None) -> ReputationScore:
        return aggregate(bytes(seller), self.reviews, self._now(now), self.config, self._same_owner)

    # -- anchors

    def record_anchor(self, commitment: AnchorCommitment, *, now: int | None = None) -> int:
        now = self._now(now)
        st = commitment.statement
        if not commitment.verify():
            raise InvalidAnchor("anchor signature does not verify")
        cert = self.registry.certificate_for(st.agent_public)
        if cert is None:
            raise InvalidAnchor("anchoring agent holds no membership certificate")
        prior = self.anchors_for(st.agent_public)
        if prior:
            last = prior[-1].commitment.statement
            if st.wallclock < last.wallclock:
                raise InvalidAnchor("anchor is backdated relative to the previous anchor")
            if st.at.length < last.at.length:
                raise InvalidAnchor("anchor covers a shorter prefix than the previous anchor")
        position = len(self.anchors)
        payload = encode_canonical((position, commitment.signature, now))
        self.anchors.append(
            AnchorEntry(position, commitment, now, cert.security_version,
                        self.registry.key.sign(Tag.ANCHOR, payload))
        )
        return position

    def anchors_for(self, agent: bytes) -> list[AnchorEntry]:
        return [a for a in self.anchors if a.commitment.statement.agent_public == bytes(agent)]

    def anchor_status(self, entry: AnchorEntry) -> str:
        """``unaffected``, ``pre-window credible`` or ``post-window`` for one bulletin entry."""
        published = self.registry.vulnerability_published_at(entry.security_version)
        if published is None:
            return "unaffected"
        return "pre-window credible" if entry.received_at < published else "post-window"

    # -- provenance

    def verify_trace(self, manifest: TraceManifest) -> LineageReport:
        return verify_trace(manifest, self)

    # -- invariants (used by tests and by replay checks)

    def conserved(self) -> bool:
        return sum(self.balances.values()) + self.escrow_total == self.total_deposits

    def histories_legal(self) -> bool:
        for t in self.trades.values():
            states = [h.status for h in t.history]
            if not states or states[0] is not TradeStatus.POSTED:
                return False
            if any(b not in LEGAL_TRANSITIONS[a] for a, b in zip(states, states[1:])):
                return False
            if states[-1] is not t.status:
                return False
        return True
