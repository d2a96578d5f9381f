from __future__ import annotations

import json
import urllib.request

import pytest

from certmem.canon import KeyPair
from certmem.gang import TradePolicy
from certmem.harness.world import World
from certmem.ledger import hide, open_all, pack_artifact
from certmem.market.core import TradeStatus, arbiter_sign
from certmem.market.platform import Platform
from certmem.market.trace import SelfProduced, TraceManifest
from certmem.market.wire import PlatformClient, RemoteError, serve_in_thread


@pytest.fixture
def remote():
    local = World(seed=5)
    server, url = serve_in_thread(local.platform)
    yield local, PlatformClient(url), url
    server.shutdown()
    server.server_close()


def raw(url, method, path, body=None):
    data = None if body is None else (body if isinstance(body, bytes) else json.dumps(body).encode())
    req = urllib.request.Request(url + path, data=data, method=method)
    try:
        with urllib.request.urlopen(req) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read())


def test_full_trade_over_http(remote):
    local, client, _ = remote
    w = World(seed=5, platform=client)
    w.clock, w.rng = local.clock, local.rng
    assert client.public == local.platform.public

    gid, template = w.create_gang("tag rows", b"img", TradePolicy())
    assert client.template(gid) == template and gid.hex() in client.gangs()
    seller = w.join(gid, "seller")
    assert client.verify_membership(seller.cert)
    assert client.members(gid).verify(client.public)
    for i in range(3):
        w.call(seller, f"row {i}".encode())
    container = pack_artifact(*seller.enclave.build_artifact(range(3), open_all()))
    ad = pack_artifact(*seller.enclave.build_artifact([0], hide("response")))
    lid = w.offer(seller, container, 12, advertisement=ad)
    listing, tid = client.browse()[lid]
    assert w.check_delivery(listing, container).accepted

    buyer = w.identity()
    assert client.deposit(buyer.public, 50) == 50
    assert client.lock_funds(lid, buyer.public, 12) == tid
    receipt = seller.enclave.issue_receipt(tid, buyer.public, container)
    token = seller.enclave.issue_purchase_token(tid, buyer.public, 12)
    settled = client.submit_receipt(tid, receipt, container, token)
    assert settled.status is TradeStatus.SETTLED
    assert client.trade(tid) == local.platform.trade(tid)
    assert client.balance_of(seller.public) == 12 and client.balance_of(buyer.public) == 38

    client.redeem_token(token)
    client.submit_review(tid, buyer.public, 4, "fine")
    assert client.reputation(seller.public).score == pytest.approx(0.8)

    assert client.record_anchor(seller.enclave.sign_anchor(3, 99)) == 0
    assert [s for _, s in client.anchors(seller.public)] == ["unaffected"]
    report = client.verify_trace(TraceManifest(seller.public, seller.enclave.root, [SelfProduced(0, 3)]))
    assert report.accepted and report.depth == 1
    entry = client.publish_vulnerability(1, "note")
    assert client.bulletin() == [entry]


def test_dispute_over_http(remote):
    local, client, _ = remote
    w = World(seed=5, platform=client)
    gid, _ = w.create_gang("t", b"i", TradePolicy())
    seller = w.join(gid, "s")
    w.call(seller, b"p")
    lid = w.offer(seller, pack_artifact(*seller.enclave.build_artifact([0], open_all())), 9)
    buyer = w.identity()
    client.deposit(buyer.public, 9)
    tid = client.lock_funds(lid, buyer.public, 9)
    client.mark_delivered(tid)
    client.dispute(tid, buyer.public)
    key = local.platform.key
    done = client.resolve(tid, TradeStatus.REFUNDED, arbiter_sign(key, tid, TradeStatus.REFUNDED))
    assert done.status is TradeStatus.REFUNDED and client.balance_of(buyer.public) == 9


def test_errors_map_to_status_codes(remote):
    local, client, url = remote
    gid, template = local.create_gang("t", b"i", TradePolicy())
    poor = KeyPair.from_seed(b"\x02" * 32).public
    seller = local.join(gid, "s")
    local.call(seller, b"p")
    lid = local.offer(seller, pack_artifact(*seller.enclave.build_artifact([0], open_all())), 9)

    assert raw(url, "GET", "/nowhere")[0] == 404
    assert raw(url, "GET", "/gangs/" + "00" * 32 + "/template")[0] == 404
    assert raw(url, "DELETE", "/listings")[0] == 405
    assert raw(url, "GET", "/trades/T1/lock")[0] == 405
    assert raw(url, "POST", "/listings", b"{not json")[0] == 400
    assert raw(url, "POST", "/listings", [1, 2])[0] == 400
    assert raw(url, "POST", "/listings", {"listing": {"kind": "bogus"}})[0] == 400

    with pytest.raises(RemoteError) as exc:
        client.lock_funds(lid, poor, 9)
    assert exc.value.status == 409 and exc.value.error == "InsufficientFunds"
    with pytest.raises(RemoteError) as exc:
        client.create_gang(template)
    assert exc.value.status == 409
    assert local.platform.market.conserved()


def test_client_against_journaled_platform(tmp_path):
    p = Platform.open(tmp_path)
    server, url = serve_in_thread(p)
    try:
        c = PlatformClient(url)
        acct = b"\x07" * 32
        c.deposit(acct, 11)
        c.deposit(acct, 4)
    finally:
        server.shutdown()
        server.server_close()
        p.close()
    again = Platform.open(tmp_path)
    assert again.balance_of(b"\x07" * 32) == 15
    again.close()
