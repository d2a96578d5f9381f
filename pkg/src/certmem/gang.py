"""Gang templates, attestation-gated registration and membership certificates.

Registration is two-round because the measurement embeds the slot id: the
platform reserves a slot (and a fresh nonce), the member boots an enclave
measured with that slot, and the platform certifies the resulting report.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable

from .canon import (
    Digest,
    KeyPair,
    PublicKey,
    RandomSource,
    Signature,
    Tag,
    encode_canonical,
    hash_value,
    system_rng,
    to_tree,
    verify,
)
from .enclave import (
    VENDOR_PUBLIC,
    AttestationReport,
    ProviderInfo,
    gang_config_hash,
    measurement_value,
    task_hash,
    verify_report,
)

NONCE_TTL_MS = 10 * 60 * 1000


class RegistrationError(Exception):
    reason = "registration"


class UnknownGang(RegistrationError):
    reason = "unknown_gang"


class DuplicateGang(RegistrationError):
    reason = "duplicate_gang"


class StaleNonce(RegistrationError):
    reason = "stale_nonce"


class BadAttestation(RegistrationError):
    reason = "bad_attestation"


class MeasurementMismatch(RegistrationError):
    reason = "measurement_mismatch"


class SecurityVersionTooLow(RegistrationError):
    reason = "security_version"


class SlotReuse(RegistrationError):
    reason = "slot_reuse"


class OwnerMismatch(RegistrationError):
    reason = "owner_mismatch"


@dataclass(frozen=True)
class LoggingPolicy:
    # per-field "log" | "hash" | "omit"; the reference enclave commits every field
    prompt: str = "log"
    response: str = "log"
    metadata: bool = True


@dataclass(frozen=True)
class TradePolicy:
    resale_allowed: bool = False
    resale_fee_required: bool = True
    disclosure: str = "selective"
    settlement: str = "platform"


@dataclass(frozen=True)
class GangTemplate:
    task_description: str
    image_template_hash: Digest
    model_provider: ProviderInfo
    code_reference: str
    logging_policy: LoggingPolicy = LoggingPolicy()
    trade_policy: TradePolicy = TradePolicy()
    min_security_version: int = 1

    @property
    def gang_id(self) -> Digest:
        return hash_value(Tag.CERT, to_tree(self))

    @property
    def task_description_hash(self) -> Digest:
        return task_hash(self.task_description)


@dataclass(frozen=True)
class MembershipCertificate:
    gang_id: Digest
    slot_id: int
    agent_public: PublicKey
    measurement_value: Digest
    owner_seed_hash: Digest
    security_version: int
    issued_at: int
    platform_signature: Signature

    def payload(self) -> bytes:
        return encode_canonical(to_tree(self)[:-1])

    @property
    def cert_id(self) -> Digest:
        return hash_value(Tag.CERT, to_tree(self))


def check_certificate(
    cert: MembershipCertificate, platform_public: bytes, template: GangTemplate
) -> list[str]:
    """Offline checks a peer can run with only the platform key and the template."""
    problems = []
    if not verify(platform_public, Tag.CERT, cert.payload(), cert.platform_signature):
        problems.append("platform_signature")
    if cert.gang_id != template.gang_id:
        problems.append("gang_id")
    expected = measurement_value(
        template.image_template_hash, template.task_description_hash, cert.slot_id,
        cert.owner_seed_hash,
    )
    if expected != cert.measurement_value:
        problems.append("measurement")
    return problems


def certificate_genesis(cert: MembershipCertificate, template: GangTemplate) -> tuple[Digest, PublicKey]:
    """Genesis inputs of the member's log as a buyer derives them."""
    return gang_config_hash(cert.measurement_value, template.model_provider), cert.agent_public


@dataclass(frozen=True)
class SlotReservation:
    gang_id: Digest
    slot_id: int
    nonce: bytes
    expires_at: int


@dataclass(frozen=True)
class BulletinEntry:
    position: int
    security_version: int
    note: str
    published_at: int
    platform_signature: Signature


@dataclass(frozen=True)
class MemberList:
    """Signed, versioned public member directory of one gang."""

    gang_id: Digest
    version: int
    certificates: list[MembershipCertificate]
    superseded: list[Digest]
    platform_signature: Signature

    def payload(self) -> bytes:
        return encode_canonical(to_tree(self)[:-1])

    def verify(self, platform_public: bytes) -> bool:
        return verify(platform_public, Tag.MEMBERS, self.payload(), self.platform_signature)


@dataclass(frozen=True)
class CertStatus:
    valid: bool
    superseded: bool
    vulnerable: bool
    problems: list[str]

    @property
    def ok(self) -> bool:
        return self.valid and not self.superseded and not self.vulnerable


@dataclass
class _Gang:
    template: GangTemplate
    next_slot: int = 0
    certificates: list[MembershipCertificate] = field(default_factory=list)
    # slot_id -> index into certificates of the current (latest) certificate
    current: dict[int, int] = field(default_factory=dict)
    superseded: set[bytes] = field(default_factory=set)
    version: int = 0


class GangRegistry:
    """Platform side of gang creation, registration and the vulnerability bulletin."""

    def __init__(
        self,
        platform_key: KeyPair,
        *,
        vendor_public: bytes = VENDOR_PUBLIC,
        clock: Callable[[], int] | None = None,
        rng: RandomSource | None = None,
    ):
        self.key = platform_key
        self.vendor_public = vendor_public
        self.clock = clock or (lambda: int(time.time() * 1000))
        self.rng = rng or system_rng
        self._gangs: dict[bytes, _Gang] = {}
        self._sessions: dict[bytes, SlotReservation] = {}
        self._by_agent: dict[bytes, MembershipCertificate] = {}
        self.bulletin: list[BulletinEntry] = []

    @property
    def public(self) -> PublicKey:
        return self.key.public

    # -- templates

    def create_gang(self, template: GangTemplate) -> Digest:
        if not template.code_reference or not template.task_description:
            raise RegistrationError("template needs a task description and a code reference")
        gid = template.gang_id
        if bytes(gid) in self._gangs:
            raise DuplicateGang(gid.hex())
        self._gangs[bytes(gid)] = _Gang(template)
        return gid

    def gang_ids(self) -> list[Digest]:
        return [Digest(g) for g in self._gangs]

    def template(self, gang_id: bytes) -> GangTemplate:
        return self._gang(gang_id).template

    def _gang(self, gang_id: bytes) -> _Gang:
        try:
            return self._gangs[bytes(gang_id)]
        except KeyError:
            raise UnknownGang(bytes(gang_id).hex()) from None

    # -- registration

    def reserve_slot(
        self, gang_id: bytes, *, nonce: bytes | None = None, now: int | None = None
    ) -> SlotReservation:
        gang = self._gang(gang_id)
        now = self.clock() if now is None else now
        res = SlotReservation(
            Digest(bytes(gang_id)), gang.next_slot, nonce or self.rng(16), now + NONCE_TTL_MS
        )
        gang.next_slot += 1
        self._sessions[bytes(res.nonce)] = res
        return res

    def open_session(
        self, gang_id: bytes, slot_id: int, *, nonce: bytes | None = None, now: int | None = None
    ) -> SlotReservation:
        """Fresh nonce for re-registering an existing slot."""
        gang = self._gang(gang_id)
        if slot_id not in gang.current:
            raise RegistrationError(f"slot {slot_id} has no certificate to renew")
        now = self.clock() if now is None else now
        res = SlotReservation(Digest(bytes(gang_id)), slot_id, nonce or self.rng(16), now + NONCE_TTL_MS)
        self._sessions[bytes(res.nonce)] = res
        return res

    def _session(self, gang_id: bytes, nonce: bytes, now: int) -> SlotReservation:
        # consumed only after the whole registration succeeds, so failed
        # attempts leave no state behind (journal replay depends on this)
        res = self._sessions.get(bytes(nonce))
        if res is None or res.gang_id != bytes(gang_id) or now > res.expires_at:
            raise StaleNonce("nonce was not issued for this session or has expired")
        return res

    def _check_report(
        self, gang: _Gang, report: AttestationReport, res: SlotReservation
    ) -> None:
        if report.nonce != res.nonce:
            raise StaleNonce("report does not echo the session nonce")
        if not verify_report(report, self.vendor_public):
            raise BadAttestation("vendor signature or measurement encoding invalid")
        m, t = report.measurement, gang.template
        if m.image_template_hash != t.image_template_hash:
            raise MeasurementMismatch("image template hash")
        if m.task_description_hash != t.task_description_hash:
            raise MeasurementMismatch("task description hash")
        if m.slot_id != res.slot_id:
            raise MeasurementMismatch("slot id")
        if report.security_version < t.min_security_version:
            raise SecurityVersionTooLow(
                f"security version {report.security_version} < {t.min_security_version}"
            )

    def _issue(self, gang: _Gang, report: AttestationReport, now: int) -> MembershipCertificate:
        m = report.measurement
        draft = MembershipCertificate(
            gang.template.gang_id, m.slot_id, report.agent_public, m.value, m.owner_seed_hash,
            report.security_version, now, b"",
        )
        cert = replace(draft, platform_signature=self.key.sign(Tag.CERT, draft.payload()))
        gang.current[m.slot_id] = len(gang.certificates)
        gang.certificates.append(cert)
        gang.version += 1
        self._by_agent[bytes(cert.agent_public)] = cert
        return cert

    def register_member(
        self, gang_id: bytes, report: AttestationReport, platform_nonce: bytes,
        *, now: int | None = None,
    ) -> MembershipCertificate:
        gang = self._gang(gang_id)
        now = self.clock() if now is None else now
        res = self._session(gang_id, platform_nonce, now)
        self._check_report(gang, report, res)
        if res.slot_id in gang.current:
            raise SlotReuse(f"slot {res.slot_id} already certified")
        if bytes(report.agent_public) in self._by_agent:
            raise SlotReuse("agent identity already registered")
        del self._sessions[bytes(platform_nonce)]
        return self._issue(gang, report, now)

    def reregister(
        self, gang_id: bytes, old_cert: MembershipCertificate, new_report: AttestationReport,
        platform_nonce: bytes, *, now: int | None = None,
    ) -> MembershipCertificate:
        gang = self._gang(gang_id)
        now = self.clock() if now is None else now
        idx = gang.current.get(old_cert.slot_id)
        if idx is None or gang.certificates[idx] != old_cert:
            raise RegistrationError("old certificate is not the slot's current certificate")
        res = self._session(gang_id, platform_nonce, now)
        self._check_report(gang, new_report, res)
        if new_report.measurement.slot_id != old_cert.slot_id:
            raise MeasurementMismatch("slot id changed")
        if new_report.measurement.owner_seed_hash != old_cert.owner_seed_hash:
            raise OwnerMismatch("owner seed hash changed")
        if new_report.security_version <= old_cert.security_version:
            raise SecurityVersionTooLow("re-registration must raise the security version")
        if bytes(new_report.agent_public) in self._by_agent:
            raise SlotReuse("agent identity already registered")
        del self._sessions[bytes(platform_nonce)]
        gang.superseded.add(bytes(old_cert.cert_id))
        return self._issue(gang, new_report, now)

    # -- queries

    def certificate_for(self, agent_public: bytes) -> MembershipCertificate | None:
        return self._by_agent.get(bytes(agent_public))

    def certificates(self, gang_id: bytes | None = None) -> list[MembershipCertificate]:
        gangs = [self._gang(gang_id)] if gang_id is not None else list(self._gangs.values())
        return [c for g in gangs for c in g.certificates]

    def vulnerable_versions(self) -> set[int]:
        return {e.security_version for e in self.bulletin}

    def membership_status(self, cert: MembershipCertificate) -> CertStatus:
        gang = self._gangs.get(bytes(cert.gang_id))
        if gang is None:
            return CertStatus(False, False, False, ["unknown_gang"])
        problems = check_certificate(cert, self.public, gang.template)
        return CertStatus(
            not problems,
            bytes(cert.cert_id) in gang.superseded,
            cert.security_version in self.vulnerable_versions(),
            problems,
        )

    def verify_membership(self, cert: MembershipCertificate) -> bool:
        return self.membership_status(cert).ok

    def members(self, gang_id: bytes) -> MemberList:
        gang = self._gang(gang_id)
        draft = MemberList(
            Digest(bytes(gang_id)), gang.version, list(gang.certificates),
            sorted(Digest(s) for s in gang.superseded), b"",
        )
        return replace(draft, platform_signature=self.key.sign(Tag.MEMBERS, draft.payload()))

    # -- vulnerability bulletin

    def publish_vulnerability(
        self, security_version_affected: int, note: str, *, now: int | None = None
    ) -> BulletinEntry:
        now = self.clock() if now is None else now
        pos = len(self.bulletin)
        payload = encode_canonical((pos, security_version_affected, note, now))
        entry = BulletinEntry(
            pos, security_version_affected, note, now, self.key.sign(Tag.BULLETIN, payload)
        )
        self.bulletin.append(entry)
        return entry

    def vulnerability_published_at(self, security_version: int) -> int | None:
        times = [e.published_at for e in self.bulletin if e.security_version == security_version]
        return min(times) if times else None
