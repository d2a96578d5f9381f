"""Sell part of an agent's history without revealing the model's answers.

A seller agent does some work through its enclave, then offers a
non-contiguous slice of it with every response hidden. The buyer checks the
advertisement, pays into escrow, verifies the full delivery against the
anchored root and hands back a receipt that releases the funds.

    python demos/disclosure_sale.py
"""

from certmem.gang import TradePolicy
from certmem.harness.world import World
from certmem.ledger import Hidden, hide, open_all, pack_artifact, unpack_artifact
from certmem.market.core import TradeStatus

w = World(seed=2024)
p = w.platform

gang_id, template = w.create_gang("map the maze, one probe per call", b"maze-image-v3", TradePolicy())
seller = w.join(gang_id, "explorer")
for step in range(12):
    w.call(seller, f"probe {step}: try corridor {step % 4}|corridor {step % 4} ok".encode())
print(f"explorer certified in slot {seller.cert.slot_id}, log holds {len(seller.enclave)} entries")

# anchor the current root so later claims about this history can be dated
p.record_anchor(seller.enclave.sign_anchor(len(seller.enclave), w.clock()))

picked = [1, 4, 5, 9]
artifact, proof = seller.enclave.build_artifact(picked, hide("response"))
advert = pack_artifact(artifact, proof)
full = pack_artifact(*seller.enclave.build_artifact(picked, open_all()))
lid = w.offer(seller, full, 40, advertisement=advert, note="four probes, answers sealed")

listing, tid = p.browse()[lid]
ad, _ = unpack_artifact(listing.advertisement)
sealed = sum(isinstance(f, Hidden) for row in ad.opened for f in row)
print(f"listing {lid}: {len(ad.selection)} interactions, {sealed} hidden fields, "
      f"{listing.metadata.total_token_out} certified output tokens")

buyer = w.identity()
p.deposit(buyer.public, 100)
p.lock_funds(lid, buyer.public, 40)

report = w.check_delivery(listing, full)
print(report.render())

receipt = seller.enclave.issue_receipt(tid, buyer.public, full)
token = seller.enclave.issue_purchase_token(tid, buyer.public, 40)
trade = p.submit_receipt(tid, receipt, full, token)
assert trade.status is TradeStatus.SETTLED
p.submit_review(tid, buyer.public, 5, "exactly the probes advertised")

print(f"trade {tid} {trade.status.value}; seller balance {p.balance_of(seller.public)}, "
      f"buyer balance {p.balance_of(buyer.public)}")
print(f"seller reputation {p.reputation(seller.public).score:.2f}")
