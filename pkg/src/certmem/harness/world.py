"""Shared plumbing for scripted runs: seeded randomness, a stepping clock,
member onboarding, listing construction and encrypted key delivery."""

from __future__ import annotations

import random
from dataclasses import dataclass

from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from ..canon import Digest, KeyPair, PublicKey, RandomSource, Tag, hash_value
from ..enclave import Enclave, ResalePolicy, TransportError, boot
from ..gang import GangTemplate, MembershipCertificate, TradePolicy, certificate_genesis
from ..ledger import VerificationReport, artifact_hash, unpack_artifact, verify_container
from ..market.core import ListingKind, TradeListing
from ..market.platform import Platform
from .provider import MockProvider

EPOCH_MS = 1_760_000_000_000


class StepClock:
    """Deterministic millisecond clock: every read advances by ``step``."""

    def __init__(self, start: int = EPOCH_MS, step: int = 1000):
        self.now = start
        self.step = step

    def __call__(self) -> int:
        self.now += self.step
        return self.now

    def advance(self, ms: int) -> None:
        self.now += ms


@dataclass
class Member:
    name: str
    enclave: Enclave
    cert: MembershipCertificate
    owner_seed: bytes
    credential: bytes

    @property
    def public(self) -> PublicKey:
        return self.enclave.agent_public


class World:
    """One seeded universe: platform, provider, clock and every random draw.

    Keys are derived from the seeded stream, which is insecure and meant only
    for reproducible simulation runs.
    """

    def __init__(self, seed: int, platform: Platform | None = None):
        self.seed = seed
        self.random = random.Random(seed)
        self.rng: RandomSource = self.random.randbytes
        self.clock = StepClock()
        self.platform = platform or Platform(KeyPair.generate(self.rng), clock=self.clock, rng=self.rng)
        self.provider = MockProvider(seed=seed)

    def identity(self) -> KeyPair:
        return KeyPair.generate(self.rng)

    def create_gang(self, task: str, image: bytes, policy: TradePolicy) -> tuple[Digest, GangTemplate]:
        template = GangTemplate(
            task_description=task,
            image_template_hash=hash_value(Tag.CERT, ("reference image", image)),
            model_provider=self.provider.config(b"").info,
            code_reference="git+https://example.invalid/gangs/reference@v1",
            trade_policy=policy,
        )
        return self.platform.create_gang(template), template

    def join(self, gang_id: bytes, name: str, owner_seed: bytes | None = None,
             security_version: int = 1) -> Member:
        template = self.platform.template(gang_id)
        owner_seed = owner_seed or self.rng(32)
        credential = b"sk-" + self.rng(12).hex().encode()
        res = self.platform.reserve_slot(gang_id)
        tp = template.trade_policy
        enclave = boot(
            template.image_template_hash, template.task_description_hash, res.slot_id, owner_seed,
            security_version, self.provider.config(credential),
            resale=ResalePolicy(tp.resale_allowed, tp.resale_fee_required),
            rng=self.rng, clock=self.clock,
        )
        enclave.attach_provider(self.provider)
        cert = self.platform.register_member(gang_id, enclave.attest(res.nonce), res.nonce)
        return Member(name, enclave, cert, owner_seed, credential)

    def call(self, member: Member, prompt: bytes, retries: int = 3) -> bytes:
        for attempt in range(retries + 1):
            try:
                return member.enclave.proxy_call(prompt)
            except TransportError:
                if attempt == retries:
                    raise
        raise AssertionError("unreachable")

    def offer(self, seller: Member, container: bytes, price: int,
              advertisement: bytes | None = None, note: str = "") -> str:
        artifact, _ = unpack_artifact(container)
        template = self.platform.template(seller.cert.gang_id)
        listing = TradeListing(
            kind=ListingKind.OFFER,
            price=price,
            seller_endpoint=f"p2p://{seller.name}",
            seller_cert=seller.cert,
            metadata=seller.enclave.certify_metadata(artifact.claimed_root.length),
            advertisement=advertisement,
            encrypted_artifact_hash=artifact_hash(container),
            resale_allowed=template.trade_policy.resale_allowed,
            note=note,
        )
        return self.platform.post_listing(listing)

    def check_delivery(self, listing: TradeListing, container: bytes) -> VerificationReport:
        """Buyer side: the delivered container against the listing's certified claims."""
        template = self.platform.template(listing.seller_cert.gang_id)
        genesis = certificate_genesis(listing.seller_cert, template)
        report = verify_container(container, listing.metadata.root, genesis)
        same = artifact_hash(container) == listing.encrypted_artifact_hash
        report.add("listing_hash", same, "" if same else "container hash differs from the listing")
        member = self.platform.membership_status(listing.seller_cert).ok
        report.add("membership", member, "" if member else "seller certificate not in good standing")
        return report


@dataclass(frozen=True)
class SealedDelivery:
    trade_id: str
    nonce: bytes
    ciphertext: bytes


def encrypt_delivery(trade_id: str, container: bytes, rng: RandomSource) -> tuple[SealedDelivery, bytes]:
    """Encrypt for off-platform transfer; the key goes to the buyer directly."""
    key, nonce = rng(32), rng(12)
    ct = AESGCM(key).encrypt(nonce, container, trade_id.encode())
    return SealedDelivery(trade_id, nonce, ct), key


def decrypt_delivery(delivery: SealedDelivery, key: bytes) -> bytes:
    return AESGCM(key).decrypt(delivery.nonce, delivery.ciphertext, delivery.trade_id.encode())
