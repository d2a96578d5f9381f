"""End-to-end scripted runs: a crowdfunded cleaning job and a selective
disclosure sale of exploration history.

Each run builds a fresh seeded world, executes the whole flow and records
every embedded assertion in a :class:`ScenarioReport` instead of raising, so
callers (CLI, tests) can print the full picture.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from importlib import resources

from ..canon import Tag, digest
from ..enclave import Refusal
from ..gang import TradePolicy
from ..ledger import (
    AnchoredRoot,
    Check,
    FIELDS,
    Hidden,
    Opened,
    hide,
    open_all,
    pack_artifact,
    unpack_artifact,
)
from ..market.core import TradeStatus, arbiter_sign
from ..market.trace import Inherited, Purchased, SelfProduced, TraceManifest
from .world import World, decrypt_delivery, encrypt_delivery

CLEANING_TEMPLATE = b"Normalize this CSV row: trim every cell, uppercase text|"


def _root_str(root: AnchoredRoot) -> str:
    return f"{root.length}:{root.root.hex()}"


@dataclass
class ScenarioReport:
    name: str
    seed: int
    checks: list[Check] = field(default_factory=list)
    roots: dict[str, str] = field(default_factory=dict)
    listings: list[str] = field(default_factory=list)
    outcomes: dict[str, str] = field(default_factory=dict)

    def check(self, name: str, ok: bool, detail: str = "") -> bool:
        self.checks.append(Check(name, bool(ok), detail))
        return bool(ok)

    @property
    def ok(self) -> bool:
        return bool(self.checks) and all(c.ok for c in self.checks)

    def render(self) -> str:
        lines = [f"scenario {self.name} (seed {self.seed})"]
        lines += [f"[{'PASS' if c.ok else 'FAIL'}] {c.name}" + (f": {c.detail}" if c.detail else "")
                  for c in self.checks]
        lines += [f"listing {lid}" for lid in self.listings]
        lines += [f"trade {tid}: {st}" for tid, st in self.outcomes.items()]
        lines += [f"final root {label} {r}" for label, r in self.roots.items()]
        lines.append("OK" if self.ok else "FAILED")
        return "\n".join(lines)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "ok": self.ok,
            "checks": [{"name": c.name, "ok": c.ok, "detail": c.detail} for c in self.checks],
            "roots": self.roots,
            "listings": self.listings,
            "outcomes": self.outcomes,
        }


# ---------------------------------------------------------------- cleaning


def load_toy_table() -> bytes:
    return resources.files("certmem.harness").joinpath("data/toy_table.csv").read_bytes()


def clean_response(response: bytes, columns: int) -> str:
    """Deterministic post-processing and validation of one model answer."""
    head, _, payload = response.partition(b":")
    prefix, _, payload = payload.partition(b":")
    if head != b"R" or len(prefix) != 16:
        raise ValueError("response does not follow the provider format")
    cells = [c.strip() for c in next(csv.reader([payload.decode()]))]
    if len(cells) != columns:
        raise ValueError(f"expected {columns} columns, got {len(cells)}")
    if not cells[0].isdigit():
        raise ValueError("row id must be numeric")
    return ",".join(cells)


def assemble_clean(header: str, responses: list[bytes]) -> bytes:
    columns = len(header.split(","))
    rows = [clean_response(r, columns) for r in responses]
    return ("\n".join([header, *rows]) + "\n").encode()


def _rows(table: bytes) -> tuple[str, list[bytes]]:
    lines = table.decode().splitlines()
    return lines[0], [line.encode() for line in lines[1:] if line.strip()]


def scenario_cleaning(seed: int = 7, *, inject_fault: bool = False, cofund: bool = False) -> ScenarioReport:
    """Crowdfunded data cleaning with full prompt disclosure.

    ``inject_fault`` corrupts the delivered container in flight (and drops a
    provider connection once); ``cofund`` sells the same artifact through two
    single-unit listings to two buyers.
    """
    variant = "cleaning" + ("+fault" if inject_fault else "") + ("+cofund" if cofund else "")
    report = ScenarioReport(variant, seed)
    w = World(seed)
    p = w.platform

    # 1: founder publishes the gang image with D_raw, T and policy G
    table = load_toy_table()
    header, raw_rows = _rows(table)
    task = ("Clean the bundled toy table into normalized CSV. "
            f"dataset={digest(Tag.FIELD, table).hex()} template={CLEANING_TEMPLATE.decode()}")
    gang_id, _ = w.create_gang(task, table + CLEANING_TEMPLATE,
                               TradePolicy(disclosure="full", resale_allowed=False))
    report.check("gang published", gang_id in [bytes.fromhex(g) for g in p.gangs()])

    # 2: seller joins and loads the reference image
    seller = w.join(gang_id, "seller")
    report.check("seller certified", p.verify_membership(seller.cert))

    # 3-7: prompt per row, certified call, post-processing and validation
    columns = len(header.split(","))
    responses, cleaned = [], []
    for i, row in enumerate(raw_rows):
        if inject_fault and i == 3:
            w.provider.fail_next = 1
        r = w.call(seller, CLEANING_TEMPLATE + row)
        responses.append(r)
        cleaned.append(clean_response(r, columns))
    report.check("rows processed", len(seller.enclave) == len(raw_rows) == 20, f"{len(seller.enclave)} rows")

    # 8: aggregate into D_clean
    d_clean = ("\n".join([header, *cleaned]) + "\n").encode()

    p.record_anchor(seller.enclave.sign_anchor(len(seller.enclave), w.clock()))

    # 9: listing with price, provenance and full prompts for auditing
    everything = list(range(len(seller.enclave)))
    artifact, proof = seller.enclave.build_artifact(everything, open_all(), attachment=d_clean)
    container = pack_artifact(artifact, proof)
    ad, ad_proof = seller.enclave.build_artifact(everything, hide("response"))
    advertisement = pack_artifact(ad, ad_proof)
    n_buyers = 2 if cofund else 1
    price = 30 // n_buyers
    listing_ids = [w.offer(seller, container, price, advertisement, note=f"D_clean share {k + 1}/{n_buyers}")
                   for k in range(n_buyers)]
    report.listings += listing_ids
    open_now = p.browse()
    report.check("listings discoverable", all(lid in open_now for lid in listing_ids))

    # 10: buyers purchase, receive the key directly and verify the delivery
    for k, lid in enumerate(listing_ids):
        buyer = w.identity()
        p.deposit(buyer.public, 100)
        listing, trade_id = p.browse()[lid]
        p.lock_funds(lid, buyer.public, price, idempotency_key=f"lock-{lid}")
        report.check(f"buyer{k} escrow locked", p.balance_of(buyer.public) == 100 - price)

        sealed, key = encrypt_delivery(trade_id, container, w.rng)
        p.mark_delivered(trade_id)
        received = decrypt_delivery(sealed, key)
        if inject_fault:
            received = _corrupt(received)

        check = w.check_delivery(listing, received)
        before = p.balance_of(seller.public)
        if inject_fault:
            report.check(f"buyer{k} rejects corrupted delivery", not check.accepted,
                         ",".join(check.failed()))
            try:
                seller.enclave.issue_receipt(trade_id, buyer.public, received)
                refused = False
            except Refusal:
                refused = True
            report.check(f"buyer{k} receipt refused", refused)
            p.dispute(trade_id, buyer.public)
            p.resolve(trade_id, TradeStatus.REFUNDED,
                      arbiter_sign(p.key, trade_id, TradeStatus.REFUNDED))
            report.check(f"buyer{k} escrow refunded", p.balance_of(buyer.public) == 100)
            report.check(f"buyer{k} seller unpaid", p.balance_of(seller.public) == before)
            report.outcomes[trade_id] = p.trade(trade_id).status.value
            continue

        report.check(f"buyer{k} verifies artifact", check.accepted, ",".join(check.failed()))
        delivered, _ = unpack_artifact(received)
        recomputed = assemble_clean(header, [delivered.opened_value(s, "response") for s in delivered.selection])
        report.check(f"buyer{k} recomputes D_clean", recomputed == delivered.attachment == d_clean)

        receipt = seller.enclave.issue_receipt(trade_id, buyer.public, received)
        token = seller.enclave.issue_purchase_token(trade_id, buyer.public, price)
        trade = p.submit_receipt(trade_id, receipt, received, token, idempotency_key=f"rcpt-{trade_id}")
        p.submit_receipt(trade_id, receipt, received, token, idempotency_key=f"rcpt-{trade_id}")
        report.check(f"buyer{k} escrow settled", trade.status is TradeStatus.SETTLED
                     and p.balance_of(seller.public) == before + price)
        p.submit_review(trade_id, buyer.public, 5, "clean table as advertised")
        report.outcomes[trade_id] = p.trade(trade_id).status.value

        # 11: the buyer reuses D_clean without calling the model at all
        parsed = list(csv.reader(io.StringIO(delivered.attachment.decode())))
        report.check(f"buyer{k} reuses D_clean", len(parsed) == 21 and parsed[0] == header.split(","))

    score = p.reputation(seller.public)
    if inject_fault:
        report.check("no review without settlement", score.score is None)
    else:
        report.check("review recorded", score.score is not None and len(score.inputs) == n_buyers,
                     f"score={score.score}")
    usage = w.provider.usage[seller.credential]
    meta = seller.enclave.certify_metadata()
    report.check("token metadata matches provider",
                 (usage.token_in, usage.token_out) == (meta.total_token_in, meta.total_token_out))
    report.check("market conserved", p.market.conserved() and p.market.histories_legal())
    report.roots["seller"] = _root_str(seller.enclave.root)
    return report


def _corrupt(container: bytes) -> bytes:
    # flip one byte inside the encoded payload (never the magic)
    pos = len(container) * 2 // 3
    return container[:pos] + bytes([container[pos] ^ 0x20]) + container[pos + 1:]


# ---------------------------------------------------------------- exploration

PRODUCTS = ("trail running shoe", "cold brew kit", "standing desk", "noise cancelling earbuds")
ANGLES = ("price anchor", "social proof", "scarcity", "founder story", "benefit-first", "humor")


def exploration_prompt(w: World, i: int) -> bytes:
    product = w.random.choice(PRODUCTS)
    angle = w.random.choice(ANGLES)
    words = " ".join(w.random.choice(("bold", "quiet", "fresh", "rugged", "smart", "lean", "warm"))
                     for _ in range(3))
    return f"round {i}: headline for {product}, angle {angle}|{words} {product} for {angle} seekers".encode()


def _hiding_scan(container: bytes, secrets: list[bytes]) -> list[int]:
    """Indices of hidden plaintexts that leak into the container bytes."""
    leaks = []
    for i, s in enumerate(secrets):
        parts = [s, *(part for part in s.split(b":", 2) if len(part) >= 8)]
        if any(part in container for part in parts):
            leaks.append(i)
    return leaks


def scenario_exploration(seed: int = 7) -> ScenarioReport:
    report = ScenarioReport("exploration", seed)
    w = World(seed)
    p = w.platform

    gang_id, _ = w.create_gang(
        "Ad creative exploration: search headlines, hooks and framings for consumer products.",
        b"exploration-image-v1", TradePolicy(resale_allowed=False, disclosure="selective"),
    )
    seller = w.join(gang_id, "explorer")
    buyer = w.join(gang_id, "buyer")
    outsider = w.identity()

    for i in range(50):
        w.call(seller, exploration_prompt(w, i))
    report.check("50 exploration calls certified", len(seller.enclave) == 50)
    p.record_anchor(seller.enclave.sign_anchor(50, w.clock()))

    selection = sorted(w.random.sample(range(50), 10))
    contiguous = selection == list(range(selection[0], selection[0] + 10))
    report.check("selection non-contiguous", not contiguous, str(selection))

    ad, ad_proof = seller.enclave.build_artifact(selection, hide("response"))
    advertisement = pack_artifact(ad, ad_proof)
    full, full_proof = seller.enclave.build_artifact(selection, open_all())
    container = pack_artifact(full, full_proof)

    shown = all(isinstance(row[FIELDS.index("prompt")], Opened)
                and isinstance(row[FIELDS.index("response")], Hidden) for row in ad.opened)
    report.check("advertisement opens prompts only", shown)
    hidden = [seller.enclave.records[s].response for s in selection]
    leaks = _hiding_scan(advertisement, hidden)
    report.check("hidden responses do not leak", not leaks, f"leaking rows {leaks}" if leaks else "")

    lid = w.offer(seller, container, 40, advertisement, note="10 curated exploration rounds")
    report.listings.append(lid)
    listing, trade_id = p.browse()[lid]
    ad_check = w.check_delivery(listing, advertisement)
    report.check("advertisement verifies", all(c.ok for c in ad_check.checks if c.name != "listing_hash"))

    p.deposit(buyer.public, 100)
    p.lock_funds(lid, buyer.public, 40)
    sealed, key = encrypt_delivery(trade_id, container, w.rng)
    p.mark_delivered(trade_id)
    received = decrypt_delivery(sealed, key)
    check = w.check_delivery(listing, received)
    report.check("buyer verifies disclosure", check.accepted, ",".join(check.failed()))
    delivered, _ = unpack_artifact(received)
    report.check("delivery matches advertisement",
                 delivered.selection == ad.selection
                 and all(delivered.opened_value(s, "prompt") == ad.opened_value(s, "prompt") for s in selection))

    receipt = seller.enclave.issue_receipt(trade_id, buyer.public, received)
    p.submit_receipt(trade_id, receipt, received)
    report.check("trade settled", p.trade(trade_id).status is TradeStatus.SETTLED)
    report.outcomes[trade_id] = p.trade(trade_id).status.value
    p.submit_review(trade_id, buyer.public, 4, "useful angles, a few duplicates")
    report.check("seller reputation present", p.reputation(seller.public).score is not None)

    ahash = receipt.artifact_hash
    conf = seller.enclave.confirm_artifact(ahash, buyer.public, b"n1")
    report.check("buyer confirmation issued", conf.requester == buyer.public)
    try:
        seller.enclave.confirm_artifact(ahash, outsider.public, b"n2", fee_paid=True)
        refused = False
    except Refusal:
        refused = True
    report.check("resale confirmation refused", refused)

    # the buyer keeps exploring on top of the purchase
    for i in range(3):
        w.call(buyer, exploration_prompt(w, 100 + i))
    buyer_manifest = TraceManifest(buyer.public, buyer.enclave.root, [
        SelfProduced(0, len(buyer.enclave)),
        Purchased(trade_id, seller.public, receipt.artifact_hash, receipt.referenced_root),
    ])
    lineage = p.verify_trace(buyer_manifest)
    report.check("buyer trace accepted", lineage.accepted, lineage.render().replace("\n", "; "))

    # one inheritance step: the explorer hands its memory to a fresh instance
    heir = w.join(gang_id, "explorer-2", owner_seed=seller.owner_seed)
    record = seller.enclave.authorize_inheritance(seller.owner_seed, heir.public)
    heir.enclave.import_inheritance(record)
    for i in range(5):
        w.call(heir, exploration_prompt(w, 200 + i))
    manifest = TraceManifest(heir.public, heir.enclave.root,
                             [Inherited(record), SelfProduced(0, len(heir.enclave))])
    lineage = p.verify_trace(manifest)
    report.check("inherited trace accepted", lineage.accepted and lineage.depth == 2,
                 f"depth={lineage.depth}")
    try:
        seller.enclave.authorize_inheritance(w.rng(32), heir.public)
        wrong_seed = False
    except Refusal:
        wrong_seed = True
    report.check("wrong owner seed refused", wrong_seed)

    report.check("market conserved", p.market.conserved() and p.market.histories_legal())
    for m in (seller, buyer, heir):
        report.roots[m.name] = _root_str(m.enclave.root)
    return report


SCENARIOS = {"cleaning": scenario_cleaning, "exploration": scenario_exploration}
