"""Provenance manifests: self-produced ranges, purchases and inheritance chains."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Union

from ..canon import Digest, PublicKey
from ..enclave import InheritanceRecord, inheritance_failures
from ..ledger import AnchoredRoot

if TYPE_CHECKING:
    from .core import Market


@dataclass(frozen=True)
class SelfProduced:
    start: int
    end: int


@dataclass(frozen=True)
class Purchased:
    trade_id: str
    seller: PublicKey
    artifact_hash: Digest
    referenced_root: AnchoredRoot


@dataclass(frozen=True)
class Inherited:
    record: InheritanceRecord


TraceEntry = Union[SelfProduced, Purchased, Inherited]


@dataclass(frozen=True)
class TraceManifest:
    owner: PublicKey
    current_root: AnchoredRoot
    entries: list[TraceEntry]


@dataclass(frozen=True)
class EntryVerdict:
    index: int
    kind: str
    ok: bool
    reason: str = ""


@dataclass
class LineageReport:
    owner_ok: bool
    owner_reason: str
    entries: list[EntryVerdict] = field(default_factory=list)
    depth: int = 1
    composition: dict[str, int] = field(default_factory=dict)

    @property
    def accepted(self) -> bool:
        return self.owner_ok and all(e.ok for e in self.entries)

    def first_failure(self) -> int | None:
        return next((e.index for e in self.entries if not e.ok), None)

    def render(self) -> str:
        lines = [f"[{'PASS' if self.owner_ok else 'FAIL'}] owner" +
                 (f": {self.owner_reason}" if self.owner_reason else "")]
        for e in self.entries:
            lines.append(f"[{'PASS' if e.ok else 'FAIL'}] #{e.index} {e.kind}" +
                         (f": {e.reason}" if e.reason else ""))
        lines.append(f"depth={self.depth} composition={dict(sorted(self.composition.items()))}")
        lines.append("ACCEPTED" if self.accepted else "REJECTED")
        return "\n".join(lines)


def verify_trace(manifest: TraceManifest, market: Market) -> LineageReport:
    """Entry-by-entry lineage check; a broken entry never makes the report accept."""
    try:
        return _verify_trace(manifest, market)
    except Exception as exc:  # adversarial manifests must not crash the platform
        return LineageReport(False, f"malformed manifest: {type(exc).__name__}: {exc}")


def _verify_trace(manifest: TraceManifest, market: Market) -> LineageReport:
    from .core import TradeStatus

    registry = market.registry
    owner = bytes(manifest.owner)
    owner_cert = registry.certificate_for(owner)
    owner_reason = ""
    if owner_cert is None:
        owner_reason = "owner holds no membership certificate"
    elif not registry.membership_status(owner_cert).valid:
        owner_reason = "owner certificate invalid"
    else:
        for entry in market.anchors_for(owner):
            at = entry.commitment.statement.at
            if at.length == manifest.current_root.length and at != manifest.current_root:
                owner_reason = "current root contradicts a published anchor"
    report = LineageReport(not owner_reason, owner_reason)

    inherited = [(i, e.record) for i, e in enumerate(manifest.entries) if isinstance(e, Inherited)]
    # identities whose purchases count toward this lineage
    lineage = {owner} | {bytes(r.predecessor) for _, r in inherited}
    expected_next: dict[int, bytes] = {}
    for k, (i, rec) in enumerate(inherited):
        if k + 1 < len(inherited):
            expected_next[i] = bytes(inherited[k + 1][1].predecessor)
        else:
            expected_next[i] = owner

    ranges: list[tuple[int, int]] = []
    valid_inherits = 0
    for i, entry in enumerate(manifest.entries):
        kind = type(entry).__name__
        reason = ""
        if isinstance(entry, SelfProduced):
            if not 0 <= entry.start < entry.end <= manifest.current_root.length:
                reason = "range outside the owner's current root"
            elif any(entry.start < e and s < entry.end for s, e in ranges):
                reason = "overlaps another self-produced range"
            if not reason:
                ranges.append((entry.start, entry.end))
        elif isinstance(entry, Purchased):
            trade = market.trades.get(entry.trade_id)
            if trade is None:
                reason = "unknown trade"
            elif trade.status is not TradeStatus.SETTLED:
                reason = f"trade is {trade.status.value}, not Settled"
            elif trade.seller != bytes(entry.seller):
                reason = "seller does not match trade"
            elif trade.buyer not in lineage:
                reason = "trade buyer is outside this lineage"
            elif trade.receipt is None:
                reason = "trade settled without a receipt"
            elif (trade.receipt.artifact_hash != entry.artifact_hash
                  or trade.receipt.referenced_root != entry.referenced_root):
                reason = "artifact hash or root differs from the receipt"
        elif isinstance(entry, Inherited):
            rec = entry.record
            bad = inheritance_failures(rec)
            pred_cert = registry.certificate_for(rec.predecessor)
            if bad:
                reason = f"bad signature: {', '.join(bad)}"
            elif pred_cert is None:
                reason = "predecessor was never attested"
            elif bytes(rec.successor) != expected_next[i]:
                reason = "successor does not continue the chain"
            else:
                valid_inherits += 1
        else:
            reason = "unknown entry kind"
        report.entries.append(EntryVerdict(i, kind, not reason, reason))
    report.depth = 1 + valid_inherits
    report.composition = dict(Counter(type(e).__name__ for e in manifest.entries))
    return report
