"""HTTP/JSON wire protocol for the platform.

Bodies mirror the canonical types one to one (see ``canon.to_json``): digests
and public keys are lowercase hex, other byte strings base64, tagged unions
carry a ``kind`` field. Hashes are always computed over the binary canonical
encoding, never over these JSON bytes.

Endpoints (``{id}`` is a hex gang id, a trade id, or a hex identity)::

    GET  /platform
    GET  /gangs                    POST /gangs
    POST /gangs/{id}/slots         POST /gangs/{id}/register
    POST /gangs/{id}/reregister    GET  /gangs/{id}/members
    GET  /gangs/{id}/template      POST /certificates/status
    GET  /listings                 POST /listings
    GET  /trades/{id}              POST /trades/{id}/lock
    POST /trades/{id}/deliver      POST /trades/{id}/receipt
    POST /trades/{id}/dispute      POST /trades/{id}/resolve
    POST /tokens/redeem            POST /reviews
    GET  /reputation/{seller}      GET  /anchors[?agent=hex]
    POST /anchors                  POST /trace/verify
    GET  /bulletin                 POST /bulletin
    GET  /accounts/{id}            POST /accounts/{id}/deposit
"""

from __future__ import annotations

import json
import logging
import re
import threading
import urllib.error
import urllib.request
from dataclasses import asdict
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable
from urllib.parse import parse_qs, urlparse

from ..canon import DecodingError, Digest, PublicKey, Signature, from_json, to_json
from ..enclave import AnchorCommitment, AttestationReport, DeliveryReceipt, PurchaseToken
from ..gang import (
    BulletinEntry,
    CertStatus,
    DuplicateGang,
    GangTemplate,
    MemberList,
    MembershipCertificate,
    RegistrationError,
    SlotReservation,
    SlotReuse,
    UnknownGang,
)
from .core import (
    AnchorEntry,
    IllegalTransition,
    InsufficientFunds,
    MarketError,
    TradeListing,
    TradeState,
    TradeStatus,
)
from .platform import Platform
from .reputation import ReputationScore
from .trace import EntryVerdict, LineageReport, TraceManifest

log = logging.getLogger(__name__)


class RemoteError(Exception):
    def __init__(self, status: int, error: str, message: str):
        super().__init__(f"{status} {error}: {message}")
        self.status = status
        self.error = error
        self.message = message


def lineage_to_json(report: LineageReport) -> dict:
    return {
        "owner_ok": report.owner_ok,
        "owner_reason": report.owner_reason,
        "entries": [asdict(e) for e in report.entries],
        "depth": report.depth,
        "composition": report.composition,
        "accepted": report.accepted,
    }


def lineage_from_json(obj: dict) -> LineageReport:
    return LineageReport(
        obj["owner_ok"], obj["owner_reason"], [EntryVerdict(**e) for e in obj["entries"]],
        obj["depth"], dict(obj["composition"]),
    )


def _status_for(exc: Exception) -> int:
    if isinstance(exc, UnknownGang):
        return HTTPStatus.NOT_FOUND
    if isinstance(exc, (IllegalTransition, InsufficientFunds, DuplicateGang, SlotReuse)):
        return HTTPStatus.CONFLICT
    return HTTPStatus.BAD_REQUEST


# ---------------------------------------------------------------- server

Route = tuple[str, re.Pattern, Callable[..., Any]]


class PlatformAPI:
    """Maps HTTP requests onto a :class:`Platform`."""

    def __init__(self, platform: Platform):
        self.p = platform
        self.routes: list[Route] = []
        r = self._route
        r("GET", r"/platform", self.info)
        r("GET", r"/gangs", self.list_gangs)
        r("POST", r"/gangs", self.create_gang)
        r("GET", r"/gangs/(?P<gid>[0-9a-f]{64})/template", self.get_template)
        r("POST", r"/gangs/(?P<gid>[0-9a-f]{64})/slots", self.reserve_slot)
        r("POST", r"/gangs/(?P<gid>[0-9a-f]{64})/register", self.register)
        r("POST", r"/gangs/(?P<gid>[0-9a-f]{64})/reregister", self.reregister)
        r("GET", r"/gangs/(?P<gid>[0-9a-f]{64})/members", self.members)
        r("POST", r"/certificates/status", self.cert_status)
        r("GET", r"/listings", self.browse)
        r("POST", r"/listings", self.post_listing)
        r("GET", r"/trades/(?P<tid>[\w-]+)", self.get_trade)
        r("POST", r"/trades/(?P<tid>[\w-]+)/lock", self.lock)
        r("POST", r"/trades/(?P<tid>[\w-]+)/deliver", self.deliver)
        r("POST", r"/trades/(?P<tid>[\w-]+)/receipt", self.receipt)
        r("POST", r"/trades/(?P<tid>[\w-]+)/dispute", self.dispute)
        r("POST", r"/trades/(?P<tid>[\w-]+)/resolve", self.resolve)
        r("POST", r"/tokens/redeem", self.redeem)
        r("POST", r"/reviews", self.review)
        r("GET", r"/reputation/(?P<seller>[0-9a-f]{64})", self.reputation)
        r("GET", r"/anchors", self.list_anchors)
        r("POST", r"/anchors", self.record_anchor)
        r("POST", r"/trace/verify", self.verify_trace)
        r("GET", r"/bulletin", self.bulletin)
        r("POST", r"/bulletin", self.publish)
        r("GET", r"/accounts/(?P<acct>[0-9a-f]{64})", self.balance)
        r("POST", r"/accounts/(?P<acct>[0-9a-f]{64})/deposit", self.deposit)

    def _route(self, method: str, pattern: str, fn) -> None:
        self.routes.append((method, re.compile(pattern + r"/?\Z"), fn))

    def dispatch(self, method: str, path: str, body: dict) -> tuple[int, Any]:
        url = urlparse(path)
        matched_path = False
        for m, pattern, fn in self.routes:
            match = pattern.match(url.path)
            if not match:
                continue
            matched_path = True
            if m != method:
                continue
            query = {k: v[0] for k, v in parse_qs(url.query).items()}
            try:
                return HTTPStatus.OK, fn(body=body, query=query, **match.groupdict())
            except (MarketError, RegistrationError, DecodingError, KeyError, TypeError, ValueError) as exc:
                log.info("%s %s rejected: %s", method, url.path, exc)
                return _status_for(exc), {"error": type(exc).__name__, "message": str(exc)}
        if matched_path:
            return HTTPStatus.METHOD_NOT_ALLOWED, {"error": "MethodNotAllowed", "message": method}
        return HTTPStatus.NOT_FOUND, {"error": "NotFound", "message": url.path}

    # -- handlers

    def info(self, body, query):
        return {"platform_public": self.p.public.hex()}

    def list_gangs(self, body, query):
        return {"gangs": [{"gang_id": gid, "template": to_json(t)} for gid, t in self.p.gangs().items()]}

    def create_gang(self, body, query):
        gid = self.p.create_gang(from_json(body["template"], GangTemplate))
        return {"gang_id": gid.hex()}

    def get_template(self, body, query, gid):
        return to_json(self.p.template(bytes.fromhex(gid)))

    def reserve_slot(self, body, query, gid):
        if body.get("slot_id") is not None:
            res = self.p.open_session(bytes.fromhex(gid), int(body["slot_id"]))
        else:
            res = self.p.reserve_slot(bytes.fromhex(gid))
        return to_json(res)

    def register(self, body, query, gid):
        report = from_json(body["report"], AttestationReport)
        nonce = from_json(body["nonce"], bytes)
        return to_json(self.p.register_member(bytes.fromhex(gid), report, nonce))

    def reregister(self, body, query, gid):
        old = from_json(body["old_cert"], MembershipCertificate)
        report = from_json(body["report"], AttestationReport)
        nonce = from_json(body["nonce"], bytes)
        return to_json(self.p.reregister(bytes.fromhex(gid), old, report, nonce))

    def members(self, body, query, gid):
        return to_json(self.p.members(bytes.fromhex(gid)))

    def cert_status(self, body, query):
        return to_json(self.p.membership_status(from_json(body["certificate"], MembershipCertificate)))

    def browse(self, body, query):
        listings = self.p.browse(include_closed=query.get("all") in ("1", "true"))
        return {"listings": {lid: {"listing": to_json(l), "trade_id": tid}
                             for lid, (l, tid) in listings.items()}}

    def post_listing(self, body, query):
        return {"listing_id": self.p.post_listing(from_json(body["listing"], TradeListing))}

    def get_trade(self, body, query, tid):
        return to_json(self.p.trade(tid))

    def lock(self, body, query, tid):
        trade_id = self.p.lock_funds(
            tid, from_json(body["buyer"], PublicKey), int(body["amount"]),
            body.get("idempotency_key", ""),
        )
        return {"trade_id": trade_id}

    def deliver(self, body, query, tid):
        return to_json(self.p.mark_delivered(tid))

    def receipt(self, body, query, tid):
        trade = self.p.submit_receipt(
            tid,
            from_json(body["receipt"], DeliveryReceipt),
            from_json(body.get("container"), bytes | None),
            from_json(body.get("token"), PurchaseToken | None),
            body.get("idempotency_key", ""),
        )
        return to_json(trade)

    def dispute(self, body, query, tid):
        return to_json(self.p.dispute(tid, from_json(body["party"], PublicKey)))

    def resolve(self, body, query, tid):
        trade = self.p.resolve(
            tid, TradeStatus(body["outcome"]), from_json(body["arbiter_signature"], Signature)
        )
        return to_json(trade)

    def redeem(self, body, query):
        trade_id, buyer = self.p.redeem_token(from_json(body["token"], PurchaseToken))
        return {"trade_id": trade_id, "buyer": buyer.hex(), "eligible": True}

    def review(self, body, query):
        review = self.p.submit_review(
            body["trade_id"], from_json(body["reviewer"], PublicKey), int(body["rating"]),
            body.get("comment", ""),
        )
        return {"trade_id": review.trade_id, "rating": review.rating, "at": review.at}

    def reputation(self, body, query, seller):
        return to_json(self.p.reputation(bytes.fromhex(seller)))

    def list_anchors(self, body, query):
        agent = bytes.fromhex(query["agent"]) if "agent" in query else None
        return {"anchors": [{"entry": to_json(e), "status": st} for e, st in self.p.anchors(agent)]}

    def record_anchor(self, body, query):
        return {"position": self.p.record_anchor(from_json(body["commitment"], AnchorCommitment))}

    def verify_trace(self, body, query):
        return lineage_to_json(self.p.verify_trace(from_json(body["manifest"], TraceManifest)))

    def bulletin(self, body, query):
        return {"entries": [to_json(e) for e in self.p.bulletin()]}

    def publish(self, body, query):
        entry = self.p.publish_vulnerability(int(body["security_version"]), body.get("note", ""))
        return to_json(entry)

    def balance(self, body, query, acct):
        return {"account": acct, "balance": self.p.balance_of(bytes.fromhex(acct))}

    def deposit(self, body, query, acct):
        return {"account": acct, "balance": self.p.deposit(bytes.fromhex(acct), int(body["amount"]))}


def make_handler(api: PlatformAPI) -> type[BaseHTTPRequestHandler]:
    class Handler(BaseHTTPRequestHandler):
        server_version = "certmem-platform/1"

        def _handle(self, method: str) -> None:
            length = int(self.headers.get("Content-Length") or 0)
            raw = self.rfile.read(length) if length else b""
            try:
                body = json.loads(raw) if raw else {}
                if not isinstance(body, dict):
                    raise ValueError("body must be a JSON object")
            except ValueError as exc:
                status, payload = HTTPStatus.BAD_REQUEST, {"error": "BadJSON", "message": str(exc)}
            else:
                status, payload = api.dispatch(method, self.path, body)
            data = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self) -> None:
            self._handle("GET")

        def do_POST(self) -> None:
            self._handle("POST")

        def do_PUT(self) -> None:
            self._handle("PUT")

        def do_DELETE(self) -> None:
            self._handle("DELETE")

        def do_PATCH(self) -> None:
            self._handle("PATCH")

        def log_message(self, fmt, *args) -> None:
            log.debug("%s " + fmt, self.address_string(), *args)

    return Handler


def make_server(platform: Platform, host: str = "127.0.0.1", port: int = 8750) -> ThreadingHTTPServer:
    return ThreadingHTTPServer((host, port), make_handler(PlatformAPI(platform)))


def serve_in_thread(platform: Platform, host: str = "127.0.0.1", port: int = 0):
    """Start a server on a background thread; returns (server, base_url)."""
    server = make_server(platform, host, port)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    h, p = server.server_address[:2]
    return server, f"http://{h}:{p}"


# ---------------------------------------------------------------- client


class PlatformClient:
    """Same method surface as :class:`Platform`, over HTTP."""

    def __init__(self, base_url: str, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self._public: PublicKey | None = None

    def _call(self, method: str, path: str, body: dict | None = None) -> Any:
        data = None if body is None else json.dumps(body).encode()
        req = urllib.request.Request(
            self.base_url + path, data=data, method=method,
            headers={"Content-Type": "application/json"},
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read())
        except urllib.error.HTTPError as exc:
            try:
                payload = json.loads(exc.read())
            except ValueError:
                payload = {"error": "HTTPError", "message": str(exc)}
            raise RemoteError(exc.code, payload.get("error", ""), payload.get("message", "")) from None

    # -- gangs

    @property
    def public(self) -> PublicKey:
        if self._public is None:
            self._public = PublicKey(bytes.fromhex(self._call("GET", "/platform")["platform_public"]))
        return self._public

    def close(self) -> None:
        pass

    def gangs(self) -> dict[str, GangTemplate]:
        out = self._call("GET", "/gangs")
        return {g["gang_id"]: from_json(g["template"], GangTemplate) for g in out["gangs"]}

    def template(self, gang_id: bytes) -> GangTemplate:
        return from_json(self._call("GET", f"/gangs/{bytes(gang_id).hex()}/template"), GangTemplate)

    def create_gang(self, template: GangTemplate) -> Digest:
        out = self._call("POST", "/gangs", {"template": to_json(template)})
        return Digest(bytes.fromhex(out["gang_id"]))

    def reserve_slot(self, gang_id: bytes) -> SlotReservation:
        return from_json(self._call("POST", f"/gangs/{bytes(gang_id).hex()}/slots", {}), SlotReservation)

    def open_session(self, gang_id: bytes, slot_id: int) -> SlotReservation:
        out = self._call("POST", f"/gangs/{bytes(gang_id).hex()}/slots", {"slot_id": slot_id})
        return from_json(out, SlotReservation)

    def register_member(self, gang_id: bytes, report: AttestationReport, nonce: bytes):
        out = self._call("POST", f"/gangs/{bytes(gang_id).hex()}/register",
                         {"report": to_json(report), "nonce": to_json(bytes(nonce))})
        return from_json(out, MembershipCertificate)

    def reregister(self, gang_id: bytes, old_cert, report: AttestationReport, nonce: bytes):
        out = self._call("POST", f"/gangs/{bytes(gang_id).hex()}/reregister",
                         {"old_cert": to_json(old_cert), "report": to_json(report),
                          "nonce": to_json(bytes(nonce))})
        return from_json(out, MembershipCertificate)

    def members(self, gang_id: bytes) -> MemberList:
        return from_json(self._call("GET", f"/gangs/{bytes(gang_id).hex()}/members"), MemberList)

    def membership_status(self, cert: MembershipCertificate) -> CertStatus:
        out = self._call("POST", "/certificates/status", {"certificate": to_json(cert)})
        return from_json(out, CertStatus)

    def verify_membership(self, cert: MembershipCertificate) -> bool:
        return self.membership_status(cert).ok

    def publish_vulnerability(self, security_version: int, note: str) -> BulletinEntry:
        out = self._call("POST", "/bulletin", {"security_version": security_version, "note": note})
        return from_json(out, BulletinEntry)

    def bulletin(self) -> list[BulletinEntry]:
        return [from_json(e, BulletinEntry) for e in self._call("GET", "/bulletin")["entries"]]

    # -- market

    def deposit(self, account: bytes, amount: int) -> int:
        return self._call("POST", f"/accounts/{bytes(account).hex()}/deposit", {"amount": amount})["balance"]

    def balance_of(self, account: bytes) -> int:
        return self._call("GET", f"/accounts/{bytes(account).hex()}")["balance"]

    def post_listing(self, listing: TradeListing) -> str:
        return self._call("POST", "/listings", {"listing": to_json(listing)})["listing_id"]

    def browse(self, include_closed: bool = False) -> dict[str, tuple[TradeListing, str | None]]:
        out = self._call("GET", "/listings" + ("?all=1" if include_closed else ""))
        return {lid: (from_json(v["listing"], TradeListing), v["trade_id"])
                for lid, v in out["listings"].items()}

    def trade(self, trade_id: str) -> TradeState:
        return from_json(self._call("GET", f"/trades/{trade_id}"), TradeState)

    def lock_funds(self, listing_id: str, buyer: bytes, amount: int, idempotency_key: str = "") -> str:
        out = self._call("POST", f"/trades/{listing_id}/lock",
                         {"buyer": bytes(buyer).hex(), "amount": amount,
                          "idempotency_key": idempotency_key})
        return out["trade_id"]

    def mark_delivered(self, trade_id: str) -> TradeState:
        return from_json(self._call("POST", f"/trades/{trade_id}/deliver", {}), TradeState)

    def submit_receipt(self, trade_id: str, receipt: DeliveryReceipt, container: bytes | None = None,
                       token: PurchaseToken | None = None, idempotency_key: str = "") -> TradeState:
        out = self._call("POST", f"/trades/{trade_id}/receipt", {
            "receipt": to_json(receipt),
            "container": to_json(container, bytes | None),
            "token": to_json(token, PurchaseToken | None),
            "idempotency_key": idempotency_key,
        })
        return from_json(out, TradeState)

    def dispute(self, trade_id: str, party: bytes) -> TradeState:
        return from_json(self._call("POST", f"/trades/{trade_id}/dispute",
                                    {"party": bytes(party).hex()}), TradeState)

    def resolve(self, trade_id: str, outcome: TradeStatus, arbiter_signature: bytes) -> TradeState:
        out = self._call("POST", f"/trades/{trade_id}/resolve", {
            "outcome": TradeStatus(outcome).value,
            "arbiter_signature": to_json(Signature(bytes(arbiter_signature)), Signature),
        })
        return from_json(out, TradeState)

    def redeem_token(self, token: PurchaseToken) -> tuple[str, bytes]:
        out = self._call("POST", "/tokens/redeem", {"token": to_json(token)})
        return out["trade_id"], bytes.fromhex(out["buyer"])

    def submit_review(self, trade_id: str, reviewer: bytes, rating: int, comment: str = "") -> dict:
        return self._call("POST", "/reviews", {"trade_id": trade_id, "reviewer": bytes(reviewer).hex(),
                                               "rating": rating, "comment": comment})

    def reputation(self, seller: bytes) -> ReputationScore:
        return from_json(self._call("GET", f"/reputation/{bytes(seller).hex()}"), ReputationScore)

    def record_anchor(self, commitment: AnchorCommitment) -> int:
        return self._call("POST", "/anchors", {"commitment": to_json(commitment)})["position"]

    def anchors(self, agent: bytes | None = None) -> list[tuple[AnchorEntry, str]]:
        q = f"?agent={bytes(agent).hex()}" if agent is not None else ""
        out = self._call("GET", "/anchors" + q)
        return [(from_json(a["entry"], AnchorEntry), a["status"]) for a in out["anchors"]]

    def verify_trace(self, manifest: TraceManifest) -> LineageReport:
        return lineage_from_json(self._call("POST", "/trace/verify", {"manifest": to_json(manifest)}))
