"""Command line front end.

State directory layout (``--state-dir``, default ``./.certmem``)::

    platform.key            platform signing seed (hex), local mode only
    journal.bin             platform operation journal, local mode only
    agents/NAME.enclave     sealed enclave state (plaintext in this simulation)
    agents/NAME.cert.json   membership certificate
    agents/NAME.owner       owner seed (hex)
    identities/NAME.key     plain buyer identity seed (hex)

Without ``--platform-url`` every command opens the platform in-process from
the state directory; with it, commands talk to ``platform serve`` over HTTP.

Exit codes: 0 success, 1 verification failure or rejected operation,
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import sys
import time
from pathlib import Path
from typing import Any

from ..canon import (
    Digest,
    KeyPair,
    PublicKey,
    RandomSource,
    Tag,
    from_json,
    hash_value,
    system_rng,
    to_json,
    verify,
)
from ..enclave import Enclave, EnclaveError, ResalePolicy, boot
from ..gang import GangTemplate, MembershipCertificate, RegistrationError, TradePolicy, certificate_genesis
from ..ledger import (
    AnchoredRoot,
    FIELDS,
    LedgerError,
    VerificationReport,
    artifact_hash,
    hide,
    open_all,
    pack_artifact,
    unpack_artifact,
    verify_container,
)
from ..market.core import ListingKind, MarketError, TradeListing
from ..market.platform import Platform
from ..market.trace import Inherited, SelfProduced, TraceManifest
from ..market.wire import PlatformClient, RemoteError, lineage_to_json, make_server
from .provider import MockProvider
from .scenarios import SCENARIOS

log = logging.getLogger("certmem")

DEFAULT_STATE_DIR = ".certmem"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class Failure(Exception):
    """Verification failed or the platform rejected the operation."""


# ---------------------------------------------------------------- context


class Context:
    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.seed: int | None = args.seed
        self.state = Path(args.state_dir or os.environ.get("CERTMEM_STATE_DIR", DEFAULT_STATE_DIR))
        self._platform = None
        if self.seed is not None and args.command != "scenario":
            log.warning("--seed set: keys and salts are derived deterministically (insecure, testing only)")

    def rng(self, label: str) -> RandomSource:
        if self.seed is None:
            return system_rng
        return random.Random(f"{self.seed}/{label}").randbytes

    @property
    def platform(self):
        if self._platform is None:
            if self.args.platform_url:
                self._platform = PlatformClient(self.args.platform_url)
            else:
                self._platform = Platform.open(self.state, rng=self.rng("platform"))
        return self._platform

    def close(self) -> None:
        if self._platform is not None:
            self._platform.close()

    # -- local files

    def _path(self, kind: str, name: str, suffix: str) -> Path:
        if not name or "/" in name or name.startswith("."):
            raise UsageError(f"bad name {name!r}")
        return self.state / kind / f"{name}{suffix}"

    def save_agent(self, name: str, enclave: Enclave, cert: MembershipCertificate | None = None,
                   owner_seed: bytes | None = None) -> None:
        path = self._path("agents", name, ".enclave")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(enclave.seal())
        if cert is not None:
            self._path("agents", name, ".cert.json").write_text(json.dumps(to_json(cert), indent=2))
        if owner_seed is not None:
            self._path("agents", name, ".owner").write_text(owner_seed.hex() + "\n")

    def load_agent(self, name: str) -> Enclave:
        path = self._path("agents", name, ".enclave")
        if not path.exists():
            raise UsageError(f"no agent named {name!r} in {self.state}")
        enclave = Enclave.unseal(path.read_bytes(), rng=self.rng(f"agent/{name}/{path.stat().st_size}"))
        enclave.attach_provider(provider())
        return enclave

    def load_cert(self, name: str) -> MembershipCertificate:
        path = self._path("agents", name, ".cert.json")
        if not path.exists():
            raise UsageError(f"agent {name!r} has no certificate")
        return from_json(json.loads(path.read_text()), MembershipCertificate)

    def identity(self, name: str) -> KeyPair:
        path = self._path("identities", name, ".key")
        if not path.exists():
            raise UsageError(f"no identity named {name!r}")
        return KeyPair.from_seed(bytes.fromhex(path.read_text().strip()))

    def party(self, ref: str) -> PublicKey:
        """Public key for an agent name, an identity name or a hex key."""
        if _plain(ref):
            if self._path("agents", ref, ".enclave").exists():
                return self.load_agent(ref).agent_public
            if self._path("identities", ref, ".key").exists():
                return self.identity(ref).public
        try:
            key = bytes.fromhex(ref)
        except ValueError:
            raise UsageError(f"unknown party {ref!r}") from None
        if len(key) != 32:
            raise UsageError(f"unknown party {ref!r}")
        return PublicKey(key)


def _plain(name: str) -> bool:
    return bool(name) and "/" not in name and not name.startswith(".")


def provider() -> MockProvider:
    # the reference gang's provider; its identity is fixed so templates agree
    return MockProvider(seed=0)


def emit(ctx: Context, human: str, data: Any) -> None:
    if ctx.args.json:
        print(json.dumps(data, indent=2, sort_keys=True))
    else:
        print(human)


def parse_root(text: str) -> AnchoredRoot:
    try:
        length, _, hexroot = text.partition(":")
        return AnchoredRoot(int(length), Digest(bytes.fromhex(hexroot)))
    except ValueError:
        raise UsageError("root must look like LENGTH:HEX") from None


def root_str(root: AnchoredRoot) -> str:
    return f"{root.length}:{root.root.hex()}"


def parse_selection(text: str, n: int) -> list[int]:
    if text == "all":
        return list(range(n))
    try:
        out = []
        for part in text.split(","):
            lo, sep, hi = part.partition("-")
            out.extend(range(int(lo), int(hi) + 1) if sep else [int(lo)])
        return sorted(set(out))
    except ValueError:
        raise UsageError("selection must look like 0,3,5-9 or 'all'") from None


def parse_hidden(text: str) -> dict:
    names = [s for s in text.split(",") if s]
    try:
        return hide(*names) if names else open_all()
    except LedgerError as exc:
        raise UsageError(f"{exc}; fields are {', '.join(FIELDS)}") from None


def read_file(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------- commands


def cmd_platform_serve(ctx: Context) -> int:
    if ctx.args.platform_url:
        raise UsageError("platform serve runs the platform itself; drop --platform-url")
    platform = ctx.platform
    server = make_server(platform, ctx.args.host, ctx.args.port)
    host, port = server.server_address[:2]
    print(f"platform {platform.public.hex()} listening on http://{host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def cmd_platform_info(ctx: Context) -> int:
    pub = ctx.platform.public.hex()
    emit(ctx, f"platform {pub}", {"platform_public": pub})
    return EXIT_OK


def cmd_gang_create(ctx: Context) -> int:
    a = ctx.args
    image = bytes.fromhex(a.image_hash) if a.image_hash else hash_value(Tag.CERT, ("reference image", a.task))
    template = GangTemplate(
        task_description=a.task,
        image_template_hash=Digest(image),
        model_provider=provider().config(b"").info,
        code_reference=a.code_ref,
        trade_policy=TradePolicy(resale_allowed=a.resale, resale_fee_required=not a.no_fee),
        min_security_version=a.min_version,
    )
    gid = ctx.platform.create_gang(template)
    emit(ctx, f"gang {gid.hex()}", {"gang_id": gid.hex(), "template": to_json(template)})
    return EXIT_OK


def cmd_gang_list(ctx: Context) -> int:
    gangs = ctx.platform.gangs()
    emit(ctx, "\n".join(f"{gid}  {t.task_description}" for gid, t in gangs.items()) or "(no gangs)",
         {gid: to_json(t) for gid, t in gangs.items()})
    return EXIT_OK


def _gang_id(text: str) -> Digest:
    try:
        gid = bytes.fromhex(text)
    except ValueError:
        gid = b""
    if len(gid) != 32:
        raise UsageError("gang id must be 64 hex characters")
    return Digest(gid)


def cmd_gang_join(ctx: Context) -> int:
    a = ctx.args
    if ctx._path("agents", a.name, ".enclave").exists():
        raise UsageError(f"agent {a.name!r} already exists")
    gid = _gang_id(a.gang_id)
    platform = ctx.platform
    template = platform.template(gid)
    rng = ctx.rng(f"agent/{a.name}/boot")
    owner_seed = bytes.fromhex(a.owner_seed) if a.owner_seed else rng(32)
    if len(owner_seed) != 32:
        raise UsageError("owner seed must be 32 bytes of hex")
    prov = provider()
    res = platform.reserve_slot(gid)
    tp = template.trade_policy
    enclave = boot(
        template.image_template_hash, template.task_description_hash, res.slot_id, owner_seed,
        a.security_version, prov.config(b"sk-" + rng(12).hex().encode()),
        resale=ResalePolicy(tp.resale_allowed, tp.resale_fee_required), rng=rng,
    )
    cert = platform.register_member(gid, enclave.attest(res.nonce), res.nonce)
    ctx.save_agent(a.name, enclave, cert, owner_seed)
    emit(ctx, f"agent {a.name} {enclave.agent_public.hex()} slot {cert.slot_id}",
         {"name": a.name, "agent_public": enclave.agent_public.hex(), "certificate": to_json(cert)})
    return EXIT_OK


def cmd_gang_members(ctx: Context) -> int:
    ml = ctx.platform.members(_gang_id(ctx.args.gang_id))
    ok = ml.verify(ctx.platform.public)
    lines = [f"slot {c.slot_id}  {c.agent_public.hex()}  sv={c.security_version}" for c in ml.certificates]
    lines.append(f"list version {ml.version}, platform signature {'ok' if ok else 'INVALID'}")
    emit(ctx, "\n".join(lines), {**to_json(ml), "signature_ok": ok})
    return EXIT_OK if ok else EXIT_FAIL


def default_prompt(seed: int | None, name: str, i: int) -> bytes:
    r = random.Random(f"{seed}/{name}/prompt/{i}")
    words = " ".join(r.choice(("alpha", "beta", "gamma", "delta", "omega", "sigma")) for _ in range(4))
    return f"step {i}: explore {words}|{words} candidate {r.randrange(1000)}".encode()


def cmd_agent_run(ctx: Context) -> int:
    a = ctx.args
    enclave = ctx.load_agent(a.name)
    start = len(enclave)
    for i in range(a.calls):
        prompt = a.prompt[i % len(a.prompt)].encode() if a.prompt else default_prompt(ctx.seed, a.name, start + i)
        enclave.proxy_call(prompt)
    ctx.save_agent(a.name, enclave)
    root = root_str(enclave.root)
    emit(ctx, f"agent {a.name} root {root}", {"name": a.name, "root": root, "calls": a.calls})
    return EXIT_OK


def cmd_agent_show(ctx: Context) -> int:
    enclave = ctx.load_agent(ctx.args.name)
    meta = enclave.certify_metadata()
    data = {"name": ctx.args.name, "agent_public": enclave.agent_public.hex(),
            "root": root_str(enclave.root), "token_in": meta.total_token_in,
            "token_out": meta.total_token_out}
    emit(ctx, "\n".join(f"{k}: {v}" for k, v in data.items()), data)
    return EXIT_OK


def cmd_agent_anchor(ctx: Context) -> int:
    enclave = ctx.load_agent(ctx.args.name)
    commitment = enclave.sign_anchor(len(enclave), int(time.time() * 1000))
    pos = ctx.platform.record_anchor(commitment)
    emit(ctx, f"anchor #{pos} at {root_str(enclave.root)}", {"position": pos, "root": root_str(enclave.root)})
    return EXIT_OK


def cmd_agent_manifest(ctx: Context) -> int:
    enclave = ctx.load_agent(ctx.args.name)
    entries = [Inherited(r) for r in enclave.inherited]
    if len(enclave):
        entries.append(SelfProduced(0, len(enclave)))
    manifest = TraceManifest(enclave.agent_public, enclave.root, entries)
    Path(ctx.args.out).write_text(json.dumps(to_json(manifest), indent=2))
    emit(ctx, f"manifest written to {ctx.args.out}", {"path": ctx.args.out})
    return EXIT_OK


def cmd_account_new(ctx: Context) -> int:
    path = ctx._path("identities", ctx.args.name, ".key")
    if path.exists():
        raise UsageError(f"identity {ctx.args.name!r} already exists")
    key = KeyPair.generate(ctx.rng(f"identity/{ctx.args.name}"))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(key.secret.hex() + "\n")
    emit(ctx, f"identity {ctx.args.name} {key.public.hex()}", {"name": ctx.args.name, "public": key.public.hex()})
    return EXIT_OK


def cmd_account_deposit(ctx: Context) -> int:
    who = ctx.party(ctx.args.party)
    bal = ctx.platform.deposit(who, ctx.args.amount)
    emit(ctx, f"balance {bal}", {"account": who.hex(), "balance": bal})
    return EXIT_OK


def cmd_account_balance(ctx: Context) -> int:
    who = ctx.party(ctx.args.party)
    bal = ctx.platform.balance_of(who)
    emit(ctx, f"balance {bal}", {"account": who.hex(), "balance": bal})
    return EXIT_OK


def cmd_list_post(ctx: Context) -> int:
    a = ctx.args
    enclave = ctx.load_agent(a.name)
    cert = ctx.load_cert(a.name)
    selection = parse_selection(a.select, len(enclave))
    attachment = read_file(a.attach) if a.attach else None
    try:
        artifact, proof = enclave.build_artifact(selection, parse_hidden(a.hide), attachment)
        ad = pack_artifact(*enclave.build_artifact(selection, parse_hidden(a.ad_hide)))
    except LedgerError as exc:
        raise UsageError(str(exc)) from None
    container = pack_artifact(artifact, proof)
    Path(a.out).write_bytes(container)
    template = ctx.platform.template(cert.gang_id)
    listing = TradeListing(
        kind=ListingKind.OFFER, price=a.price, seller_endpoint=a.endpoint or f"p2p://{a.name}",
        seller_cert=cert, metadata=enclave.certify_metadata(artifact.claimed_root.length),
        advertisement=ad, encrypted_artifact_hash=artifact_hash(container),
        resale_allowed=template.trade_policy.resale_allowed, note=a.note,
    )
    lid = ctx.platform.post_listing(listing)
    tid = ctx.platform.browse(include_closed=True)[lid][1]
    emit(ctx, f"listing {lid} trade {tid} price {a.price}; artifact written to {a.out}",
         {"listing_id": lid, "trade_id": tid, "artifact": a.out, "root": root_str(artifact.claimed_root)})
    return EXIT_OK


def cmd_list_browse(ctx: Context) -> int:
    listings = ctx.platform.browse(include_closed=ctx.args.all)
    lines, data = [], {}
    for lid, (l, tid) in listings.items():
        meta = l.metadata
        desc = f"{lid} {tid or '-'} {l.kind.value} price={l.price}"
        if meta is not None:
            desc += f" interactions={meta.interaction_count} tokens={meta.total_token_in}/{meta.total_token_out}"
        lines.append(desc + (f"  {l.note}" if l.note else ""))
        data[lid] = {"trade_id": tid, "listing": to_json(l)}
    emit(ctx, "\n".join(lines) or "(no listings)", data)
    return EXIT_OK


def cmd_trade_lock(ctx: Context) -> int:
    a = ctx.args
    buyer = ctx.party(a.buyer)
    amount = a.amount if a.amount is not None else ctx.platform.trade(a.trade_id).price
    tid = ctx.platform.lock_funds(a.trade_id, buyer, amount, a.idempotency_key or "")
    emit(ctx, f"trade {tid} locked for {amount}", {"trade_id": tid, "amount": amount})
    return EXIT_OK


def cmd_trade_deliver(ctx: Context) -> int:
    a = ctx.args
    container = read_file(a.artifact)
    trade = ctx.platform.mark_delivered(a.trade_id)
    Path(a.out).write_bytes(container)
    emit(ctx, f"trade {trade.trade_id} {trade.status.value}; delivery written to {a.out}", to_json(trade))
    return EXIT_OK


def cmd_trade_receipt(ctx: Context) -> int:
    a = ctx.args
    enclave = ctx.load_agent(a.seller)
    buyer = ctx.party(a.buyer)
    container = read_file(a.artifact)
    receipt = enclave.issue_receipt(a.trade_id, buyer, container)
    token = enclave.issue_purchase_token(a.trade_id, buyer, ctx.platform.trade(a.trade_id).price)
    ctx.save_agent(a.seller, enclave)
    trade = ctx.platform.submit_receipt(a.trade_id, receipt, container, token, a.idempotency_key or "")
    emit(ctx, f"trade {trade.trade_id} {trade.status.value}", to_json(trade))
    return EXIT_OK


def cmd_trade_dispute(ctx: Context) -> int:
    trade = ctx.platform.dispute(ctx.args.trade_id, ctx.party(ctx.args.party))
    emit(ctx, f"trade {trade.trade_id} {trade.status.value}", to_json(trade))
    return EXIT_OK


def cmd_trade_show(ctx: Context) -> int:
    trade = ctx.platform.trade(ctx.args.trade_id)
    hist = " -> ".join(h.status.value for h in trade.history)
    emit(ctx, f"trade {trade.trade_id} {trade.status.value} escrow={trade.escrow_amount} [{hist}]",
         to_json(trade))
    return EXIT_OK


def cmd_verify_artifact(ctx: Context) -> int:
    a = ctx.args
    container = read_file(a.file)
    try:
        artifact, _ = unpack_artifact(container)
    except ValueError:
        artifact = None
    notes = []
    if a.cert:
        cert = from_json(json.loads(read_file(a.cert)), MembershipCertificate)
        genesis = certificate_genesis(cert, ctx.platform.template(cert.gang_id))
    elif a.gang_config and a.agent:
        genesis = (Digest(bytes.fromhex(a.gang_config)), PublicKey(bytes.fromhex(a.agent)))
    elif artifact is not None:
        genesis = artifact.genesis_inputs
        notes.append("origin taken from the artifact itself (pass --cert to pin it)")
    else:
        genesis = (Digest(bytes(32)), PublicKey(bytes(32)))
    if a.root:
        root = parse_root(a.root)
    elif artifact is not None:
        root = artifact.claimed_root
        notes.append("root taken from the artifact claim (pass --root to check against a trusted root)")
    else:
        root = AnchoredRoot(0, Digest(bytes(32)))
    report: VerificationReport = verify_container(container, root, genesis)
    text = report.render() + "".join(f"\n[NOTE] {n}" for n in notes)
    emit(ctx, text, {"accepted": report.accepted, "notes": notes,
                     "checks": [{"name": c.name, "ok": c.ok, "detail": c.detail} for c in report.checks]})
    return EXIT_OK if report.accepted else EXIT_FAIL


def cmd_verify_trace(ctx: Context) -> int:
    try:
        manifest = from_json(json.loads(read_file(ctx.args.file)), TraceManifest)
    except (ValueError, KeyError, TypeError) as exc:
        raise Failure(f"malformed manifest: {exc}") from None
    report = ctx.platform.verify_trace(manifest)
    emit(ctx, report.render(), lineage_to_json(report))
    return EXIT_OK if report.accepted else EXIT_FAIL


def cmd_verify_cert(ctx: Context) -> int:
    try:
        cert = from_json(json.loads(read_file(ctx.args.file)), MembershipCertificate)
    except (ValueError, KeyError, TypeError) as exc:
        raise Failure(f"malformed certificate: {exc}") from None
    sig_ok = verify(ctx.platform.public, Tag.CERT, cert.payload(), cert.platform_signature)
    status = ctx.platform.membership_status(cert)
    ok = sig_ok and status.ok
    lines = [f"[{'PASS' if sig_ok else 'FAIL'}] platform signature",
             f"[{'PASS' if status.valid else 'FAIL'}] registered" + (f": {'; '.join(status.problems)}" if status.problems else ""),
             f"[{'FAIL' if status.superseded else 'PASS'}] current (not superseded)",
             f"[{'FAIL' if status.vulnerable else 'PASS'}] security version not flagged",
             "ACCEPTED" if ok else "REJECTED"]
    emit(ctx, "\n".join(lines), {"accepted": ok, "signature_ok": sig_ok, "status": to_json(status)})
    return EXIT_OK if ok else EXIT_FAIL


def cmd_scenario(ctx: Context) -> int:
    a = ctx.args
    seed = 7 if a.seed is None else a.seed
    if a.name == "cleaning":
        report = SCENARIOS["cleaning"](seed, inject_fault=a.fault, cofund=a.cofund)
    else:
        if a.fault or a.cofund:
            raise UsageError("--fault/--cofund apply to the cleaning scenario only")
        report = SCENARIOS["exploration"](seed)
    emit(ctx, report.render(), report.to_json())
    return EXIT_OK if report.ok else EXIT_FAIL


# ---------------------------------------------------------------- parser


def _globals(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = {"default": argparse.SUPPRESS} if suppress else {}
    parser.add_argument("--platform-url", help="talk to a running platform over HTTP", **d)
    parser.add_argument("--state-dir", help=f"state directory (default {DEFAULT_STATE_DIR})", **d)
    parser.add_argument("--seed", type=int, help="deterministic randomness (insecure)", **d)
    parser.add_argument("--json", action="store_true", help="machine-readable output",
                        **({"default": argparse.SUPPRESS} if suppress else {}))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="certmem", description="Certified agent memory and its marketplace.")
    _globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def group(name: str, help: str):
        p = sub.add_parser(name, help=help)
        return p.add_subparsers(dest="action", required=True)

    def leaf(subs, name: str, fn, help: str):
        p = subs.add_parser(name, help=help)
        _globals(p, suppress=True)
        p.set_defaults(fn=fn)
        return p

    g = group("platform", "run or inspect the platform")
    p = leaf(g, "serve", cmd_platform_serve, "serve the HTTP API")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8750)
    leaf(g, "info", cmd_platform_info, "print the platform key")

    g = group("gang", "gang lifecycle")
    p = leaf(g, "create", cmd_gang_create, "publish a gang template")
    p.add_argument("--task", required=True)
    p.add_argument("--image-hash", help="hex digest of the reference image")
    p.add_argument("--code-ref", default="git+https://example.invalid/gangs/reference@v1")
    p.add_argument("--resale", action="store_true", help="allow resale confirmations")
    p.add_argument("--no-fee", action="store_true", help="resale confirmations without a fee")
    p.add_argument("--min-version", type=int, default=1)
    leaf(g, "list", cmd_gang_list, "list gangs")
    p = leaf(g, "join", cmd_gang_join, "boot an enclave and register it")
    p.add_argument("gang_id")
    p.add_argument("--name", required=True)
    p.add_argument("--owner-seed", help="32-byte hex owner seed")
    p.add_argument("--security-version", type=int, default=1)
    p = leaf(g, "members", cmd_gang_members, "signed member list")
    p.add_argument("gang_id")

    g = group("agent", "drive a local agent")
    p = leaf(g, "run", cmd_agent_run, "make certified provider calls")
    p.add_argument("name")
    p.add_argument("--calls", type=int, required=True)
    p.add_argument("--prompt", action="append", help="prompt text (repeatable, cycled)")
    p = leaf(g, "show", cmd_agent_show, "root and token totals")
    p.add_argument("name")
    p = leaf(g, "anchor", cmd_agent_anchor, "publish an anchor of the current root")
    p.add_argument("name")
    p = leaf(g, "manifest", cmd_agent_manifest, "write a trace manifest")
    p.add_argument("name")
    p.add_argument("--out", required=True)

    g = group("account", "credit accounts")
    p = leaf(g, "new", cmd_account_new, "create a buyer identity")
    p.add_argument("name")
    p = leaf(g, "deposit", cmd_account_deposit, "deposit credits")
    p.add_argument("party")
    p.add_argument("amount", type=int)
    p = leaf(g, "balance", cmd_account_balance, "show a balance")
    p.add_argument("party")

    g = group("list", "trade postings")
    p = leaf(g, "post", cmd_list_post, "package an artifact and post an offer")
    p.add_argument("name")
    p.add_argument("--price", type=int, required=True)
    p.add_argument("--select", default="all", help="interaction indices, e.g. 0,3,5-9")
    p.add_argument("--hide", default="", help="fields hidden in the delivered artifact")
    p.add_argument("--ad-hide", default="response", help="fields hidden in the advertisement")
    p.add_argument("--attach", help="uncertified attachment file")
    p.add_argument("--endpoint")
    p.add_argument("--note", default="")
    p.add_argument("--out", required=True, help="where to write the artifact container")
    p = leaf(g, "browse", cmd_list_browse, "show listings")
    p.add_argument("--all", action="store_true", help="include locked and closed listings")

    g = group("trade", "escrow steps")
    p = leaf(g, "lock", cmd_trade_lock, "lock buyer funds")
    p.add_argument("trade_id")
    p.add_argument("--buyer", required=True)
    p.add_argument("--amount", type=int)
    p.add_argument("--idempotency-key")
    p = leaf(g, "deliver", cmd_trade_deliver, "mark delivered and hand over the artifact")
    p.add_argument("trade_id")
    p.add_argument("--artifact", required=True)
    p.add_argument("--out", required=True)
    p = leaf(g, "receipt", cmd_trade_receipt, "obtain an enclave receipt and settle")
    p.add_argument("trade_id")
    p.add_argument("--seller", required=True)
    p.add_argument("--buyer", required=True)
    p.add_argument("--artifact", required=True)
    p.add_argument("--idempotency-key")
    p = leaf(g, "dispute", cmd_trade_dispute, "open a dispute")
    p.add_argument("trade_id")
    p.add_argument("--party", required=True)
    p = leaf(g, "show", cmd_trade_show, "trade state")
    p.add_argument("trade_id")

    g = group("verify", "verification")
    p = leaf(g, "artifact", cmd_verify_artifact, "check an artifact container")
    p.add_argument("file")
    p.add_argument("--root", help="trusted anchored root LENGTH:HEX")
    p.add_argument("--cert", help="seller certificate JSON (pins the origin)")
    p.add_argument("--gang-config", help="hex gang configuration hash")
    p.add_argument("--agent", help="hex agent public key")
    p = leaf(g, "trace", cmd_verify_trace, "check a trace manifest")
    p.add_argument("file")
    p = leaf(g, "cert", cmd_verify_cert, "check a membership certificate")
    p.add_argument("file")

    p = sub.add_parser("scenario", help="scripted end-to-end runs")
    _globals(p, suppress=True)
    p.add_argument("name", choices=sorted(SCENARIOS))
    p.add_argument("--fault", action="store_true", help="corrupt the delivery in flight")
    p.add_argument("--cofund", action="store_true", help="two buyers, two listings")
    p.set_defaults(fn=cmd_scenario)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    ctx = Context(args)
    try:
        return args.fn(ctx)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (Failure, MarketError, RegistrationError, EnclaveError, RemoteError, LedgerError) as exc:
        print(f"rejected: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    finally:
        ctx.close()


if __name__ == "__main__":
    sys.exit(main())
