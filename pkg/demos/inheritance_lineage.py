"""Hand an agent's memory to a successor and prove the lineage afterwards.

Two enclaves share an owner seed. The first does some work and buys an
artifact; the owner then authorizes a transfer to the second. The successor's
trace manifest cites the inheritance, the purchase and its own work, and the
platform checks each entry. A forged transfer is caught at its own entry.

    python demos/inheritance_lineage.py
"""

from dataclasses import replace

from certmem.gang import TradePolicy
from certmem.harness.world import World
from certmem.ledger import open_all, pack_artifact
from certmem.market.trace import Inherited, Purchased, SelfProduced, TraceManifest

w = World(seed=99)
p = w.platform
gang_id, _ = w.create_gang("summarise support tickets", b"tickets-image", TradePolicy())

vendor = w.join(gang_id, "vendor")
for i in range(3):
    w.call(vendor, f"ticket {i}|printer jams on page {i + 2}".encode())
container = pack_artifact(*vendor.enclave.build_artifact(range(3), open_all()))
lid = w.offer(vendor, container, 15)

owner_seed = bytes(range(32))
old = w.join(gang_id, "old-agent", owner_seed=owner_seed)
new = w.join(gang_id, "new-agent", owner_seed=owner_seed)

p.deposit(old.public, 15)
tid = p.lock_funds(lid, old.public, 15)
receipt = vendor.enclave.issue_receipt(tid, old.public, container)
p.submit_receipt(tid, receipt, container)
w.call(old, b"ticket 7|screen flickers")

record = old.enclave.authorize_inheritance(owner_seed, new.public)
new.enclave.import_inheritance(record)
w.call(new, b"ticket 8|keyboard sticky")
print(f"transfer signed at root length {record.root_at_transfer.length}")

entries = [
    Inherited(record),
    Purchased(tid, vendor.public, receipt.artifact_hash, receipt.referenced_root),
    SelfProduced(0, len(new.enclave)),
]
print(p.verify_trace(TraceManifest(new.public, new.enclave.root, entries)).render())

print("\nwith the enclave signature on the transfer zeroed:")
entries[0] = Inherited(replace(record, enclave_signature=bytes(64)))
print(p.verify_trace(TraceManifest(new.public, new.enclave.root, entries)).render())
