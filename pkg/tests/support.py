"""Shared drivers for the market tests: a random operation simulator and an
exhaustive explorer of the escrow state machine."""

from __future__ import annotations

import copy
import random
from collections import deque
from dataclasses import dataclass, field, replace

from certmem.canon import KeyPair
from certmem.enclave import Enclave, EnclaveError, verify_receipt
from certmem.gang import RegistrationError, TradePolicy
from certmem.harness.world import World
from certmem.ledger import open_all, pack_artifact
from certmem.market.core import (
    LEGAL_TRANSITIONS,
    Market,
    MarketError,
    TradeStatus,
    arbiter_sign,
)
from certmem.market.platform import Platform
from certmem.market.reputation import DAY_MS


def market_world(seed: int, journal_path=None, sellers: int = 3, buyers: int = 4):
    w = World(seed)
    if journal_path is not None:
        w.platform = Platform(KeyPair.generate(w.rng), journal_path=journal_path,
                              clock=w.clock, rng=w.rng)
    gid, _ = w.create_gang("simulated market task", b"sim-image", TradePolicy())
    members = [w.join(gid, f"s{i}") for i in range(sellers)]
    containers = {}
    for m in members:
        for j in range(3):
            w.call(m, f"{m.name} unit of work {j}".encode())
        containers[m.name] = pack_artifact(*m.enclave.build_artifact(range(3), open_all()))
    idents = [w.identity() for _ in range(buyers)]
    return w, gid, members, containers, idents


def state_summary(market: Market) -> tuple:
    return (
        tuple(sorted(market.balances.items())),
        market.total_deposits,
        tuple((t.trade_id, t.status.value, t.escrow_amount) for t in market.trades.values()),
        len(market.listings),
        len(market.reviews),
        len(market.anchors),
        tuple(sorted(market.redeemed)),
    )


def audit_transfers(market: Market) -> list[str]:
    """Every credit that is not a deposit must follow a receipt, an arbiter
    decision or a refund to the trade's own parties."""
    problems = []
    for t in market.transfers:
        if t.amount <= 0 or t.cause == "deposit":
            continue
        trade = market.trades.get(t.trade_id)
        if trade is None:
            problems.append(f"credit without trade: {t}")
        elif t.cause == "receipt":
            listing = market.listings[trade.listing_id]
            r = trade.receipt
            if not (t.account == trade.seller and r is not None and verify_receipt(r, trade.seller)
                    and r.trade_id == trade.trade_id and r.buyer == trade.buyer
                    and r.artifact_hash == listing.encrypted_artifact_hash):
                problems.append(f"receipt payout without a matching receipt: {t}")
        elif t.cause == "arbiter":
            if t.account != trade.seller or trade.history[-1].status is not TradeStatus.SETTLED:
                problems.append(f"arbiter payout to the wrong party: {t}")
        elif t.cause == "refund":
            if t.account != trade.buyer:
                problems.append(f"refund to a non-buyer: {t}")
        else:
            problems.append(f"unexplained credit: {t}")
    return problems


class MarketSim:
    """Random operations, valid and invalid, against a live platform."""

    OPS = ("deposit", "post", "lock", "lock", "deliver", "receipt", "receipt", "dispute",
           "resolve", "expire", "cancel", "redeem", "review", "anchor")

    def __init__(self, seed: int, journal_path=None):
        self.gen = random.Random(seed ^ 0x5EED)
        self.w, self.gid, self.sellers, self.containers, self.buyers = market_world(seed, journal_path)
        self.p = self.w.platform
        self.by_key = {bytes(s.public): s for s in self.sellers}
        self.accounts = [b.public for b in self.buyers] + [s.public for s in self.sellers]
        self.tokens = []
        self.outcomes: list[tuple[str, bool]] = []

    @property
    def market(self) -> Market:
        return self.p.market

    def _trade(self):
        trades = list(self.market.trades.values())
        if not trades:
            raise MarketError("no trades yet")
        return self.gen.choice(trades)

    def step(self) -> tuple[str, bool]:
        op = self.gen.choice(self.OPS)
        try:
            getattr(self, "op_" + op)()
            out = (op, True)
        except (MarketError, RegistrationError, EnclaveError):
            out = (op, False)
        self.outcomes.append(out)
        return out

    def op_deposit(self):
        self.p.deposit(self.gen.choice(self.accounts), self.gen.randrange(0, 60))

    def op_post(self):
        s = self.gen.choice(self.sellers)
        self.w.offer(s, self.containers[s.name], self.gen.randrange(0, 50))

    def op_lock(self):
        open_ = self.p.browse()
        if not open_:
            raise MarketError("nothing to lock")
        lid = self.gen.choice(sorted(open_))
        price = open_[lid][0].price
        amount = price if self.gen.random() < 0.9 else price + 1
        self.p.lock_funds(lid, self.gen.choice(self.buyers).public, amount)

    def op_deliver(self):
        self.p.mark_delivered(self._trade().trade_id)

    def op_receipt(self):
        t = self._trade()
        seller = self.by_key[t.seller]
        buyer = t.buyer if t.buyer is not None and self.gen.random() < 0.85 else \
            self.gen.choice(self.buyers).public
        container = self.containers[seller.name]
        receipt = seller.enclave.issue_receipt(t.trade_id, buyer, container)
        token = seller.enclave.issue_purchase_token(t.trade_id, buyer, t.price)
        self.p.submit_receipt(t.trade_id, receipt, container if self.gen.random() < 0.5 else None, token)
        self.tokens.append(token)

    def op_dispute(self):
        t = self._trade()
        party = self.gen.choice([t.buyer or t.seller, t.seller, self.gen.choice(self.buyers).public])
        self.p.dispute(t.trade_id, party)

    def op_resolve(self):
        t = self._trade()
        outcome = self.gen.choice([TradeStatus.SETTLED, TradeStatus.REFUNDED])
        key = self.p.key if self.gen.random() < 0.85 else KeyPair.generate(self.w.rng)
        self.p.resolve(t.trade_id, outcome, arbiter_sign(key, t.trade_id, outcome))

    def op_expire(self):
        if self.gen.random() < 0.3:
            self.w.clock.advance(8 * DAY_MS)
        self.p.expire(self._trade().trade_id)

    def op_cancel(self):
        t = self._trade()
        self.p.cancel(t.trade_id, t.seller if self.gen.random() < 0.7 else self.gen.choice(self.buyers).public)

    def op_redeem(self):
        if not self.tokens:
            raise MarketError("no tokens")
        self.p.redeem_token(self.gen.choice(self.tokens))

    def op_review(self):
        t = self._trade()
        reviewer = t.buyer or self.gen.choice(self.buyers).public
        self.p.submit_review(t.trade_id, reviewer, self.gen.randrange(0, 6))

    def op_anchor(self):
        s = self.gen.choice(self.sellers)
        wall = self.w.clock.now + self.gen.randrange(-5000, 5000)
        self.p.record_anchor(s.enclave.sign_anchor(self.gen.randrange(0, len(s.enclave) + 1), wall))


# ---------------------------------------------------------------- model check


@dataclass
class ModelCheckResult:
    states: set = field(default_factory=set)
    statuses: set = field(default_factory=set)
    edges: set = field(default_factory=set)
    violations: list = field(default_factory=list)
    explored: int = 0
    depth: int = 0


def model_check(max_events: int = 10, seed: int = 5) -> ModelCheckResult:
    """Breadth-first search over every event sequence up to ``max_events``,
    merging concrete markets that reach the same observable state."""
    w, gid, (seller,), containers, (buyer, other, poor) = market_world(seed, sellers=1, buyers=3)
    container = containers[seller.name]
    base = w.platform.market
    lid = w.offer(seller, container, 30)
    tid = base.listing_trade[lid]
    w.platform.deposit(buyer.public, 100)
    w.platform.deposit(other.public, 100)
    w.platform.deposit(poor.public, 10)

    # an enclave copy without the trade binding signs a receipt for the wrong buyer
    shadow = Enclave.unseal(seller.enclave.seal())
    wrong_buyer = shadow.issue_receipt(tid, other.public, container)
    good = seller.enclave.issue_receipt(tid, buyer.public, container)
    forged = replace(good, enclave_signature=bytes(64))
    stranger = KeyPair.generate(w.rng)
    t0 = 2_000_000_000_000
    late = t0 + 30 * DAY_MS

    events = {
        "lock": lambda m: m.lock_funds(lid, buyer.public, 30, now=t0),
        "lock_poor": lambda m: m.lock_funds(lid, poor.public, 30, now=t0),
        "lock_wrong_amount": lambda m: m.lock_funds(lid, other.public, 29, now=t0),
        "deliver": lambda m: m.mark_delivered(tid, now=t0),
        "receipt": lambda m: m.submit_receipt(tid, good, container, now=t0),
        "receipt_wrong_buyer": lambda m: m.submit_receipt(tid, wrong_buyer, now=t0),
        "receipt_forged": lambda m: m.submit_receipt(tid, forged, now=t0),
        "dispute_buyer": lambda m: m.dispute(tid, buyer.public, now=t0),
        "dispute_seller": lambda m: m.dispute(tid, seller.public, now=t0),
        "dispute_stranger": lambda m: m.dispute(tid, stranger.public, now=t0),
        "resolve_settled": lambda m: m.resolve(
            tid, TradeStatus.SETTLED, arbiter_sign(w.platform.key, tid, TradeStatus.SETTLED), now=t0),
        "resolve_refunded": lambda m: m.resolve(
            tid, TradeStatus.REFUNDED, arbiter_sign(w.platform.key, tid, TradeStatus.REFUNDED), now=t0),
        "resolve_forged": lambda m: m.resolve(
            tid, TradeStatus.SETTLED, arbiter_sign(stranger, tid, TradeStatus.SETTLED), now=t0),
        "expire_early": lambda m: m.expire(tid, now=t0 + 1),
        "expire_late": lambda m: m.expire(tid, now=late),
        "cancel_seller": lambda m: m.cancel(tid, seller.public, now=t0),
        "cancel_buyer": lambda m: m.cancel(tid, buyer.public, now=t0),
    }
    seller_key = bytes(seller.public)

    def observe(m: Market) -> tuple:
        t = m.trades[tid]
        return (t.status, t.escrow_amount, t.buyer, tuple(sorted(m.balances.items())),
                t.receipt is not None)

    result = ModelCheckResult()
    start = observe(base)
    result.states.add(start)
    frontier = deque([(base, 0)])
    while frontier:
        m, depth = frontier.popleft()
        result.depth = max(result.depth, depth)
        if depth == max_events:
            continue
        for name, event in events.items():
            nxt = copy.deepcopy(m)
            before, before_seller = observe(nxt), nxt.balance_of(seller_key)
            transfers = len(nxt.transfers)
            result.explored += 1
            try:
                event(nxt)
                ok = True
            except MarketError:
                ok = False
            after = observe(nxt)
            result.statuses.add(after[0])
            if not ok:
                if after != before or len(nxt.transfers) != transfers:
                    result.violations.append(f"{name}: failed event changed state")
                continue
            if after[0] is not before[0]:
                if after[0] not in LEGAL_TRANSITIONS[before[0]]:
                    result.violations.append(f"{name}: illegal {before[0].value}->{after[0].value}")
                result.edges.add((before[0], after[0]))
            if nxt.balance_of(seller_key) > before_seller:
                t = nxt.trades[tid]
                paid_by_receipt = name == "receipt" and t.receipt is not None and verify_receipt(
                    t.receipt, t.seller) and t.receipt.buyer == t.buyer
                if not (paid_by_receipt or name == "resolve_settled"):
                    result.violations.append(f"{name}: seller paid without receipt or arbiter")
            if not nxt.conserved():
                result.violations.append(f"{name}: conservation broken")
            result.violations.extend(f"{name}: {p}" for p in audit_transfers(nxt))
            if after not in result.states:
                result.states.add(after)
                frontier.append((nxt, depth + 1))
    result.statuses.add(start[0])
    return result


def all_legal_edges() -> set:
    return {(a, b) for a, targets in LEGAL_TRANSITIONS.items() for b in targets}
