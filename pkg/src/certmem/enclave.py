"""Simulated certification core (the trusted half of the confidential VM).

The enclave owns the agent signing key and the interaction log. The untrusted
agent runtime reaches the model provider only through :meth:`Enclave.proxy_call`
and obtains signed statements only through the methods below; nothing here
rewrites or deletes a logged interaction.

Attestation is simulated: a well-known "vendor root" key signs reports. It is
derived from a public constant, so it authenticates nothing outside tests.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Callable, Protocol

from .canon import (
    KEY_LEN,
    DecodingError,
    Digest,
    KeyPair,
    PublicKey,
    RandomSource,
    Signature,
    Tag,
    decode_canonical,
    encode_canonical,
    from_tree,
    hash_value,
    pack_container,
    system_rng,
    to_tree,
    unpack_container,
    verify,
)
from .ledger import (
    FIELDS,
    AnchoredRoot,
    AnchorStatement,
    DisclosureProof,
    Hidden,
    InteractionLog,
    InteractionRecord,
    MemoryArtifact,
    Opened,
    PolicyLike,
    artifact_hash,
    make_record,
    unpack_artifact,
    verify_artifact,
)

log = logging.getLogger(__name__)

REDACTION_MASK = b"[REDACT]"
MESSAGE_MAGIC = b"CMMS"
STATE_MAGIC = b"CMEN"

# INSECURE by construction: anyone can recompute this key.
VENDOR_ROOT = KeyPair.from_seed(hash_value(Tag.KEYGEN, "certmem simulated hardware vendor root"))
VENDOR_PUBLIC = VENDOR_ROOT.public


def published_vendor_root() -> PublicKey:
    """Vendor root public key as shipped in ``data/vendor_root.pub.hex``."""
    text = resources.files("certmem").joinpath("data/vendor_root.pub.hex").read_text()
    return PublicKey(bytes.fromhex(text.strip()))


class EnclaveError(Exception):
    pass


class Refusal(EnclaveError):
    """The enclave declined to sign."""


class ProviderIdentityError(EnclaveError):
    pass


class TransportError(EnclaveError):
    """Provider unreachable; nothing was logged and the call may be retried."""


# ---------------------------------------------------------------- measurement


def owner_seed_hash(seed: bytes) -> Digest:
    return hash_value(Tag.CERT, bytes(seed))


def owner_key(seed: bytes) -> KeyPair:
    return KeyPair.from_seed(hash_value(Tag.OWNER, bytes(seed)))


def task_hash(task_description: str) -> Digest:
    return hash_value(Tag.CERT, task_description)


def measurement_value(
    image_template_hash: bytes, task_description_hash: bytes, slot_id: int, seed_hash: bytes
) -> Digest:
    return hash_value(
        Tag.CERT,
        (bytes(image_template_hash), bytes(task_description_hash), slot_id, bytes(seed_hash)),
    )


@dataclass(frozen=True)
class Measurement:
    image_template_hash: Digest
    task_description_hash: Digest
    slot_id: int
    owner_seed_hash: Digest
    value: Digest

    @classmethod
    def build(cls, image_template_hash, task_description_hash, slot_id, seed_hash) -> Measurement:
        return cls(
            image_template_hash, task_description_hash, slot_id, seed_hash,
            measurement_value(image_template_hash, task_description_hash, slot_id, seed_hash),
        )

    def consistent(self) -> bool:
        return self.value == measurement_value(
            self.image_template_hash, self.task_description_hash, self.slot_id, self.owner_seed_hash
        )


@dataclass(frozen=True)
class AttestationReport:
    measurement: Measurement
    security_version: int
    agent_public: PublicKey
    nonce: bytes
    vendor_signature: Signature

    def payload(self) -> bytes:
        return report_payload(
            self.measurement.value, self.security_version, self.agent_public, self.nonce
        )


def report_payload(mvalue: bytes, security_version: int, agent: bytes, nonce: bytes) -> bytes:
    return encode_canonical((bytes(mvalue), security_version, bytes(agent), bytes(nonce)))


def verify_report(report: AttestationReport, vendor_public: bytes = VENDOR_PUBLIC) -> bool:
    return report.measurement.consistent() and verify(
        vendor_public, Tag.CERT, report.payload(), report.vendor_signature
    )


# ---------------------------------------------------------------- provider


@dataclass(frozen=True)
class ProviderInfo:
    """Public part of the provider configuration, shared with the gang template."""

    endpoint: str
    provider_public: PublicKey
    model_name: str


@dataclass(frozen=True)
class ProviderConfig:
    endpoint: str
    provider_public: PublicKey
    model_name: str
    credential: bytes

    @property
    def info(self) -> ProviderInfo:
        return ProviderInfo(self.endpoint, self.provider_public, self.model_name)


def gang_config_hash(mvalue: bytes, info: ProviderInfo) -> Digest:
    return hash_value(Tag.CERT, (bytes(mvalue), to_tree(info)))


@dataclass(frozen=True)
class ProviderResponse:
    response: bytes
    token_in: int
    token_out: int


class ModelProvider(Protocol):
    endpoint: str

    def hello(self, nonce: bytes) -> tuple[bytes, bytes]:
        """Return (provider public key, signature over the nonce)."""

    def complete(self, prompt: bytes, credential: bytes) -> ProviderResponse: ...


def redact(data: bytes, credential: bytes) -> bytes:
    if not credential:
        return data
    return data.replace(credential, REDACTION_MASK)


# ---------------------------------------------------------------- signed statements


@dataclass(frozen=True)
class DeliveryReceipt:
    trade_id: str
    buyer: PublicKey
    artifact_hash: Digest
    referenced_root: AnchoredRoot
    seller: PublicKey
    enclave_signature: Signature

    def payload(self) -> bytes:
        return receipt_payload(self.trade_id, self.buyer, self.artifact_hash, self.referenced_root)


def receipt_payload(trade_id: str, buyer: bytes, ahash: bytes, root: AnchoredRoot) -> bytes:
    return encode_canonical((trade_id, bytes(buyer), bytes(ahash), to_tree(root)))


def verify_receipt(receipt: DeliveryReceipt, seller_public: bytes | None = None) -> bool:
    key = receipt.seller if seller_public is None else seller_public
    return bytes(key) == bytes(receipt.seller) and verify(
        key, Tag.RECEIPT, receipt.payload(), receipt.enclave_signature
    )


@dataclass(frozen=True)
class PurchaseToken:
    trade_id: str
    buyer: PublicKey
    seller: PublicKey
    amount: int
    seller_signature: Signature
    redeemed: bool = False

    def payload(self) -> bytes:
        return encode_canonical((self.trade_id, bytes(self.buyer), bytes(self.seller), self.amount))


def verify_token(token: PurchaseToken) -> bool:
    return verify(token.seller, Tag.TOKEN, token.payload(), token.seller_signature)


@dataclass(frozen=True)
class Confirmation:
    artifact_hash: Digest
    requester: PublicKey
    nonce: bytes
    seller: PublicKey
    signature: Signature

    def payload(self) -> bytes:
        return encode_canonical((bytes(self.artifact_hash), bytes(self.requester), bytes(self.nonce)))


def verify_confirmation(conf: Confirmation) -> bool:
    return verify(conf.seller, Tag.CONFIRM, conf.payload(), conf.signature)


@dataclass(frozen=True)
class InheritanceRecord:
    predecessor: PublicKey
    successor: PublicKey
    root_at_transfer: AnchoredRoot
    owner_public: PublicKey
    owner_authorization: Signature
    enclave_signature: Signature

    def payload(self) -> bytes:
        return encode_canonical(
            (bytes(self.predecessor), bytes(self.successor), to_tree(self.root_at_transfer),
             bytes(self.owner_public))
        )


def inheritance_failures(record: InheritanceRecord) -> list[str]:
    """Names of the signatures on ``record`` that do not verify."""
    bad = []
    if not verify(record.owner_public, Tag.INHERIT, record.payload(), record.owner_authorization):
        bad.append("owner_authorization")
    enclave_payload = encode_canonical((record.payload(), bytes(record.owner_authorization)))
    if not verify(record.predecessor, Tag.INHERIT, enclave_payload, record.enclave_signature):
        bad.append("enclave_signature")
    return bad


@dataclass(frozen=True)
class AnchorCommitment:
    statement: AnchorStatement
    signature: Signature

    def verify(self) -> bool:
        return verify(self.statement.agent_public, Tag.ANCHOR, self.statement.payload(), self.signature)


@dataclass(frozen=True)
class MetadataStatement:
    """Enclave-computed token and time statistics over a log prefix."""

    agent_public: PublicKey
    root: AnchoredRoot
    interaction_count: int
    total_token_in: int
    total_token_out: int
    first_timestamp: int
    last_timestamp: int
    signature: Signature

    def payload(self) -> bytes:
        return encode_canonical(to_tree(self)[:-1])

    def verify(self) -> bool:
        return verify(self.agent_public, Tag.META, self.payload(), self.signature)


# ---------------------------------------------------------------- enclave


@dataclass(frozen=True)
class ResalePolicy:
    allow_resale_confirmation: bool = False
    require_fee: bool = True


@dataclass
class _SealedState:
    measurement: Measurement
    security_version: int
    provider_config: ProviderConfig
    agent_seed: bytes
    owner_public: PublicKey
    resale: ResalePolicy
    records: list[InteractionRecord]
    receipts: list[DeliveryReceipt]
    inherited: list[InheritanceRecord] = field(default_factory=list)


class Enclave:
    """Handle to one booted enclave instance. Construct with :func:`boot`."""

    def __init__(
        self,
        measurement: Measurement,
        security_version: int,
        provider_config: ProviderConfig,
        agent_key: KeyPair,
        owner_public: PublicKey,
        resale: ResalePolicy,
        rng: RandomSource,
        clock: Callable[[], int],
    ):
        self._measurement = measurement
        self._security_version = security_version
        self._provider_config = provider_config
        self._key = agent_key
        self._owner_public = owner_public
        self._resale = resale
        self._rng = rng
        self._clock = clock
        self._gang_config_hash = gang_config_hash(measurement.value, provider_config.info)
        self._log = InteractionLog(self._gang_config_hash, agent_key.public)
        self._provider: ModelProvider | None = None
        self._receipts: dict[str, DeliveryReceipt] = {}
        self._receipts_by_hash: dict[bytes, list[DeliveryReceipt]] = {}
        self._inherited: list[InheritanceRecord] = []

    # -- read-only views

    @property
    def agent_public(self) -> PublicKey:
        return self._key.public

    @property
    def measurement(self) -> Measurement:
        return self._measurement

    @property
    def security_version(self) -> int:
        return self._security_version

    @property
    def provider_info(self) -> ProviderInfo:
        return self._provider_config.info

    @property
    def gang_config_hash(self) -> Digest:
        return self._gang_config_hash

    @property
    def genesis_inputs(self) -> tuple[Digest, PublicKey]:
        return self._gang_config_hash, self._key.public

    @property
    def root(self) -> AnchoredRoot:
        return self._log.root

    def root_at(self, length: int) -> AnchoredRoot:
        return self._log.root_at(length)

    def __len__(self) -> int:
        return len(self._log)

    @property
    def records(self) -> tuple[InteractionRecord, ...]:
        return self._log.records

    @property
    def interaction_digests(self) -> list[Digest]:
        return [d.digest for d in self._log.digests]

    @property
    def inherited(self) -> tuple[InheritanceRecord, ...]:
        return tuple(self._inherited)

    def build_artifact(
        self, selection, policy: PolicyLike, attachment: bytes | None = None, upto: int | None = None
    ) -> tuple[MemoryArtifact, DisclosureProof]:
        return self._log.build_artifact(selection, policy, attachment, upto)

    # -- operations

    def attach_provider(self, provider: ModelProvider) -> None:
        self._provider = provider

    def attest(self, nonce: bytes) -> AttestationReport:
        nonce = bytes(nonce)
        payload = report_payload(
            self._measurement.value, self._security_version, self._key.public, nonce
        )
        return AttestationReport(
            self._measurement, self._security_version, self._key.public, nonce,
            VENDOR_ROOT.sign(Tag.CERT, payload),
        )

    def proxy_call(self, prompt: bytes) -> bytes:
        cfg = self._provider_config
        provider = self._provider
        if provider is None:
            raise TransportError("no provider connection")
        if getattr(provider, "endpoint", cfg.endpoint) != cfg.endpoint:
            raise ProviderIdentityError("provider endpoint does not match configuration")
        challenge = self._rng(16)
        try:
            presented, sig = provider.hello(challenge)
        except (ConnectionError, TimeoutError) as exc:
            raise TransportError(str(exc)) from exc
        if bytes(presented) != cfg.provider_public or not verify(
            cfg.provider_public, Tag.HELLO, challenge, sig
        ):
            log.warning("provider identity mismatch; refusing call")
            raise ProviderIdentityError("provider failed to authenticate")
        prompt = bytes(prompt)
        try:
            answer = provider.complete(prompt, cfg.credential)
        except (ConnectionError, TimeoutError) as exc:
            raise TransportError(str(exc)) from exc
        response = redact(bytes(answer.response), cfg.credential)
        record = make_record(
            len(self._log),
            redact(prompt, cfg.credential),
            response,
            cfg.model_name,
            answer.token_in,
            answer.token_out,
            max(self._clock(), self.records[-1].timestamp if len(self._log) else 0),
            self._rng,
        )
        self._log.append(record)
        return response

    def _check_against_log(self, artifact: MemoryArtifact, proof: DisclosureProof) -> None:
        n = artifact.claimed_root.length
        if n > len(self._log) or self._log.root_at(n) != artifact.claimed_root:
            raise Refusal("claimed root is not a prefix of this enclave's log")
        report = verify_artifact(artifact, proof, artifact.claimed_root, self.genesis_inputs)
        if not report.accepted:
            raise Refusal(f"artifact fails verification: {report.failed()}")
        records, digests = self._log.records, self._log.digests
        if list(proof.interaction_digests) != [d.digest for d in digests[:n]]:
            raise Refusal("digest chain differs from the log")
        for seq, row in zip(artifact.selection, artifact.opened):
            rec = records[seq]
            for i, (name, fd) in enumerate(zip(FIELDS, row)):
                if isinstance(fd, Opened):
                    if fd.salt != rec.field_salts[i] or fd.encoded != encode_canonical(rec.value(name)):
                        raise Refusal(f"opened field {seq}.{name} does not match the log")
                elif isinstance(fd, Hidden) and fd.commitment != digests[seq].field_digests[i]:
                    raise Refusal(f"hidden field {seq}.{name} does not match the log")

    def issue_receipt(self, trade_id: str, buyer: bytes, container: bytes) -> DeliveryReceipt:
        buyer = PublicKey(bytes(buyer))
        prior = self._receipts.get(trade_id)
        if prior is not None and prior.buyer != buyer:
            raise Refusal(f"trade {trade_id} is already bound to another buyer")
        try:
            artifact, proof = unpack_artifact(container)
        except (DecodingError, ValueError) as exc:
            raise Refusal(f"undecodable artifact: {exc}") from exc
        self._check_against_log(artifact, proof)
        ahash = artifact_hash(container)
        if prior is not None:
            if prior.artifact_hash != ahash:
                raise Refusal(f"trade {trade_id} already receipted for another artifact")
            return prior
        payload = receipt_payload(trade_id, buyer, ahash, artifact.claimed_root)
        receipt = DeliveryReceipt(
            trade_id, buyer, ahash, artifact.claimed_root, self._key.public,
            self._key.sign(Tag.RECEIPT, payload),
        )
        self._receipts[trade_id] = receipt
        self._receipts_by_hash.setdefault(bytes(ahash), []).append(receipt)
        return receipt

    def issue_purchase_token(self, trade_id: str, buyer: bytes, amount: int) -> PurchaseToken:
        receipt = self._receipts.get(trade_id)
        if receipt is None or receipt.buyer != bytes(buyer):
            raise Refusal("no delivery receipt for this trade and buyer")
        unsigned = PurchaseToken(trade_id, PublicKey(bytes(buyer)), self._key.public, amount, b"")
        return PurchaseToken(
            trade_id, unsigned.buyer, self._key.public, amount,
            self._key.sign(Tag.TOKEN, unsigned.payload()),
        )

    def confirm_artifact(
        self, ahash: bytes, requester: bytes, nonce: bytes = b"", fee_paid: bool = False
    ) -> Confirmation:
        receipts = self._receipts_by_hash.get(bytes(ahash))
        if not receipts:
            raise Refusal("unknown artifact hash")
        requester = PublicKey(bytes(requester))
        if all(requester != r.buyer for r in receipts):
            if not self._resale.allow_resale_confirmation:
                raise Refusal("resale confirmation not permitted by gang policy")
            if self._resale.require_fee and not fee_paid:
                raise Refusal("resale confirmation requires a fee")
        unsigned = Confirmation(Digest(bytes(ahash)), requester, bytes(nonce), self._key.public, b"")
        return Confirmation(
            unsigned.artifact_hash, requester, unsigned.nonce, self._key.public,
            self._key.sign(Tag.CONFIRM, unsigned.payload()),
        )

    def authorize_inheritance(self, owner_seed: bytes, successor: bytes) -> InheritanceRecord:
        if owner_seed_hash(owner_seed) != self._measurement.owner_seed_hash:
            raise Refusal("owner seed does not match the measured owner hash")
        okey = owner_key(owner_seed)
        draft = InheritanceRecord(
            self._key.public, PublicKey(bytes(successor)), self._log.root, okey.public, b"", b""
        )
        owner_sig = okey.sign(Tag.INHERIT, draft.payload())
        enclave_sig = self._key.sign(Tag.INHERIT, encode_canonical((draft.payload(), owner_sig)))
        return InheritanceRecord(
            draft.predecessor, draft.successor, draft.root_at_transfer, okey.public,
            owner_sig, enclave_sig,
        )

    def import_inheritance(self, record: InheritanceRecord) -> None:
        """Successor side: keep a verified transfer record for later trace manifests."""
        if record.successor != self._key.public:
            raise Refusal("inheritance record names another successor")
        bad = inheritance_failures(record)
        if bad:
            raise Refusal(f"inheritance record signatures invalid: {bad}")
        self._inherited.append(record)

    def sign_anchor(self, at_length: int, wallclock: int) -> AnchorCommitment:
        statement = self._log.anchor_commitment(at_length, wallclock)
        return AnchorCommitment(statement, self._key.sign(Tag.ANCHOR, statement.payload()))

    def certify_metadata(self, upto: int | None = None) -> MetadataStatement:
        n = len(self._log) if upto is None else upto
        recs = self._log.records[:n]
        draft = MetadataStatement(
            self._key.public,
            self._log.root_at(n),
            n,
            sum(r.token_in for r in recs),
            sum(r.token_out for r in recs),
            recs[0].timestamp if recs else 0,
            recs[-1].timestamp if recs else 0,
            b"",
        )
        return replace(draft, signature=self._key.sign(Tag.META, draft.payload()))

    # -- persistence (simulation only: sealed state is plaintext)

    def seal(self) -> bytes:
        state = _SealedState(
            self._measurement, self._security_version, self._provider_config, self._key.secret,
            self._owner_public, self._resale, list(self._log.records),
            list(self._receipts.values()), list(self._inherited),
        )
        return pack_container(STATE_MAGIC, encode_canonical(to_tree(state)))

    @classmethod
    def unseal(
        cls, data: bytes, rng: RandomSource | None = None, clock: Callable[[], int] | None = None
    ) -> Enclave:
        state = from_tree(decode_canonical(unpack_container(STATE_MAGIC, data)), _SealedState)
        enc = cls(
            state.measurement, state.security_version, state.provider_config,
            KeyPair.from_seed(state.agent_seed), state.owner_public, state.resale,
            rng or system_rng, clock or _wall_ms,
        )
        for rec in state.records:
            enc._log.append(rec)
        for r in state.receipts:
            enc._receipts[r.trade_id] = r
            enc._receipts_by_hash.setdefault(bytes(r.artifact_hash), []).append(r)
        enc._inherited = list(state.inherited)
        return enc


def _wall_ms() -> int:
    return int(time.time() * 1000)


def boot(
    image_template_hash: bytes,
    task_description_hash: bytes,
    slot_id: int,
    owner_seed: bytes,
    security_version: int,
    provider_config: ProviderConfig,
    *,
    resale: ResalePolicy | None = None,
    rng: RandomSource | None = None,
    clock: Callable[[], int] | None = None,
) -> Enclave:
    """Measure the image and start an enclave with a fresh agent key."""
    if len(owner_seed) != KEY_LEN:
        raise ValueError("owner seed must be 32 bytes")
    rng = rng or system_rng
    measurement = Measurement.build(
        Digest(bytes(image_template_hash)), Digest(bytes(task_description_hash)), slot_id,
        owner_seed_hash(owner_seed),
    )
    return Enclave(
        measurement, security_version, provider_config, KeyPair.generate(rng),
        owner_key(owner_seed).public, resale or ResalePolicy(), rng, clock or _wall_ms,
    )


# ---------------------------------------------------------------- messages


def pack_message(obj) -> bytes:
    """Frame a signed statement for enclave <-> platform/peer transport."""
    return pack_container(MESSAGE_MAGIC, encode_canonical((type(obj).__name__, to_tree(obj))))


MESSAGE_TYPES = {
    t.__name__: t
    for t in (
        AttestationReport, DeliveryReceipt, PurchaseToken, Confirmation, InheritanceRecord,
        AnchorCommitment, MetadataStatement,
    )
}


def unpack_message(data: bytes, expected: type | None = None):
    tree = decode_canonical(unpack_container(MESSAGE_MAGIC, data))
    if not (isinstance(tree, tuple) and len(tree) == 2 and tree[0] in MESSAGE_TYPES):
        raise DecodingError("unknown message type")
    cls = MESSAGE_TYPES[tree[0]]
    if expected is not None and cls is not expected:
        raise DecodingError(f"expected {expected.__name__}, got {cls.__name__}")
    return from_tree(tree[1], cls)
