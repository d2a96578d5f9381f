"""Measured interaction log with per-field commitments and selective disclosure.

Each interaction is committed field by field (salted), the field digests are
hashed into an interaction digest, and interaction digests are folded into a
running root that starts from a genesis value bound to the gang configuration
and the agent identity::

    root_0 = H_ROOT(gang_config_hash, agent_public)
    root_i = H_ROOT(root_{i-1}, interaction_digest_{i-1})

A :class:`MemoryArtifact` opens or hides individual fields of an arbitrary
(possibly non-contiguous) selection; its :class:`DisclosureProof` carries the
whole digest chain so a verifier can recompute the root.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Union

from .canon import (
    SALT_LEN,
    DecodingError,
    Digest,
    EncodingError,
    PublicKey,
    RandomSource,
    Tag,
    commit,
    decode_canonical,
    digest,
    encode_canonical,
    from_tree,
    hash_value,
    pack_container,
    system_rng,
    to_tree,
    unpack_container,
)

FIELDS = ("prompt", "response", "model_name", "token_in", "token_out", "timestamp")
ARTIFACT_MAGIC = b"CMAR"


class LedgerError(ValueError):
    pass


# ---------------------------------------------------------------- records


@dataclass(frozen=True)
class InteractionRecord:
    seq_no: int
    prompt: bytes
    response: bytes
    model_name: str
    token_in: int
    token_out: int
    timestamp: int
    field_salts: tuple[bytes, ...]

    def value(self, name: str) -> bytes | int | str:
        return getattr(self, name)

    def salt(self, name: str) -> bytes:
        return self.field_salts[FIELDS.index(name)]

    def field_digests(self) -> tuple[Digest, ...]:
        return tuple(
            commit(Tag.FIELD, salt, encode_canonical(self.value(name)))
            for name, salt in zip(FIELDS, self.field_salts)
        )


def make_record(
    seq_no: int,
    prompt: bytes,
    response: bytes,
    model_name: str,
    token_in: int,
    token_out: int,
    timestamp: int,
    rng: RandomSource | None = None,
) -> InteractionRecord:
    """Build a record with one fresh salt per committed field."""
    rng = rng or system_rng
    return InteractionRecord(
        seq_no, bytes(prompt), bytes(response), model_name, token_in, token_out, timestamp,
        tuple(rng(SALT_LEN) for _ in FIELDS),
    )


def interaction_digest(seq_no: int, field_digests: Iterable[bytes]) -> Digest:
    pairs = [(name, bytes(d)) for name, d in zip(FIELDS, field_digests, strict=True)]
    return hash_value(Tag.INTERACTION, (seq_no, pairs))


@dataclass(frozen=True)
class InteractionDigest:
    seq_no: int
    field_digests: tuple[Digest, ...]
    digest: Digest


@dataclass(frozen=True)
class AnchoredRoot:
    length: int
    root: Digest


def genesis(gang_config_hash: bytes, agent: bytes) -> AnchoredRoot:
    return AnchoredRoot(0, hash_value(Tag.ROOT, (bytes(gang_config_hash), bytes(agent))))


def chain_step(prev: bytes, idigest: bytes) -> Digest:
    return hash_value(Tag.ROOT, (bytes(prev), bytes(idigest)))


def replay_chain(
    gang_config_hash: bytes, agent: bytes, digests: Iterable[bytes]
) -> list[AnchoredRoot]:
    """Roots at every prefix length, recomputed from interaction digests alone."""
    roots = [genesis(gang_config_hash, agent)]
    for d in digests:
        roots.append(AnchoredRoot(roots[-1].length + 1, chain_step(roots[-1].root, d)))
    return roots


# ---------------------------------------------------------------- artifacts


class Disclose(enum.Enum):
    OPEN = "open"
    HIDE = "hide"


@dataclass(frozen=True)
class Opened:
    # canonical encoding of the field value
    encoded: bytes
    salt: bytes

    @property
    def value(self) -> bytes | int | str:
        return decode_canonical(self.encoded)


@dataclass(frozen=True)
class Hidden:
    commitment: Digest


FieldDisclosure = Union[Opened, Hidden]


@dataclass(frozen=True)
class MemoryArtifact:
    gang_config_hash: Digest
    agent_public: PublicKey
    claimed_root: AnchoredRoot
    selection: list[int]
    opened: list[list[FieldDisclosure]]
    attachment: bytes | None = None
    attachment_hash: Digest | None = None

    @property
    def genesis_inputs(self) -> tuple[Digest, PublicKey]:
        return self.gang_config_hash, self.agent_public

    def opened_value(self, seq_no: int, name: str) -> bytes | int | str | None:
        """Plaintext of an opened field, or None when hidden."""
        fd = self.opened[self.selection.index(seq_no)][FIELDS.index(name)]
        return fd.value if isinstance(fd, Opened) else None


@dataclass(frozen=True)
class DisclosureProof:
    interaction_digests: list[Digest]
    # one full field-digest vector per selected interaction, parallel to selection
    field_digests: list[list[Digest]]


PolicyLike = Union[
    Mapping[str, Disclose],
    Mapping[int, Mapping[str, Disclose]],
    Callable[[int], Mapping[str, Disclose]],
]


def open_all() -> dict[str, Disclose]:
    return {name: Disclose.OPEN for name in FIELDS}


def hide(*names: str) -> dict[str, Disclose]:
    unknown = set(names) - set(FIELDS)
    if unknown:
        raise LedgerError(f"unknown fields {sorted(unknown)}")
    return {name: Disclose.HIDE if name in names else Disclose.OPEN for name in FIELDS}


def _policy_for(policy: PolicyLike, seq_no: int) -> Mapping[str, Disclose]:
    if callable(policy):
        return policy(seq_no)
    if policy and all(isinstance(k, int) for k in policy):
        if seq_no not in policy:
            raise LedgerError(f"policy has no entry for interaction {seq_no}")
        return policy[seq_no]
    return policy


def attachment_digest(attachment: bytes) -> Digest:
    return digest(Tag.FIELD, attachment)


# ---------------------------------------------------------------- the log


@dataclass(frozen=True)
class AnchorStatement:
    agent_public: PublicKey
    at: AnchoredRoot
    wallclock: int

    def payload(self) -> bytes:
        return encode_canonical(to_tree(self))


class InteractionLog:
    """Append-only log owned by exactly one writer (its enclave)."""

    def __init__(self, gang_config_hash: bytes, agent_public: bytes):
        self.gang_config_hash = Digest(bytes(gang_config_hash))
        self.agent_public = PublicKey(bytes(agent_public))
        self._records: list[InteractionRecord] = []
        self._digests: list[InteractionDigest] = []
        self._roots: list[AnchoredRoot] = [genesis(gang_config_hash, agent_public)]

    def __len__(self) -> int:
        return len(self._records)

    @property
    def root(self) -> AnchoredRoot:
        return self._roots[-1]

    @property
    def records(self) -> tuple[InteractionRecord, ...]:
        return tuple(self._records)

    @property
    def digests(self) -> tuple[InteractionDigest, ...]:
        return tuple(self._digests)

    def root_at(self, length: int) -> AnchoredRoot:
        if not 0 <= length <= len(self._records):
            raise LedgerError(f"no root at length {length}, log has {len(self._records)}")
        return self._roots[length]

    def append(self, record: InteractionRecord) -> AnchoredRoot:
        if record.seq_no != len(self._records):
            raise LedgerError(f"seq_no {record.seq_no} != log length {len(self._records)}")
        if self._records and record.timestamp < self._records[-1].timestamp:
            raise LedgerError("timestamp regression")
        if len(record.field_salts) != len(FIELDS) or any(
            len(s) != SALT_LEN for s in record.field_salts
        ):
            raise LedgerError("every committed field needs exactly one 16-byte salt")
        try:
            fds = record.field_digests()
        except EncodingError as exc:
            raise LedgerError(str(exc)) from exc
        idig = InteractionDigest(record.seq_no, fds, interaction_digest(record.seq_no, fds))
        new_root = AnchoredRoot(self.root.length + 1, chain_step(self.root.root, idig.digest))
        self._records.append(record)
        self._digests.append(idig)
        self._roots.append(new_root)
        return new_root

    def build_artifact(
        self,
        selection: Iterable[int],
        policy: PolicyLike,
        attachment: bytes | None = None,
        upto: int | None = None,
    ) -> tuple[MemoryArtifact, DisclosureProof]:
        """Disclose ``selection`` against the root at length ``upto`` (default: now)."""
        length = len(self._records) if upto is None else upto
        claimed = self.root_at(length)
        selection = sorted(set(selection))
        for s in selection:
            if not 0 <= s < length:
                raise LedgerError(f"selected interaction {s} outside [0, {length})")
        opened: list[list[FieldDisclosure]] = []
        field_vectors: list[list[Digest]] = []
        for s in selection:
            rec, idig = self._records[s], self._digests[s]
            choice = _policy_for(policy, s)
            missing = [name for name in FIELDS if name not in choice]
            if missing:
                raise LedgerError(f"policy leaves fields {missing} of interaction {s} unassigned")
            row: list[FieldDisclosure] = []
            for i, name in enumerate(FIELDS):
                if choice[name] is Disclose.OPEN:
                    row.append(Opened(encode_canonical(rec.value(name)), rec.field_salts[i]))
                else:
                    row.append(Hidden(idig.field_digests[i]))
            opened.append(row)
            field_vectors.append(list(idig.field_digests))
        artifact = MemoryArtifact(
            self.gang_config_hash,
            self.agent_public,
            claimed,
            selection,
            opened,
            None if attachment is None else bytes(attachment),
            None if attachment is None else attachment_digest(attachment),
        )
        proof = DisclosureProof([d.digest for d in self._digests[:length]], field_vectors)
        return artifact, proof

    def anchor_commitment(self, at_length: int, wallclock: int) -> AnchorStatement:
        return AnchorStatement(self.agent_public, self.root_at(at_length), wallclock)


# ---------------------------------------------------------------- containers


def pack_artifact(artifact: MemoryArtifact, proof: DisclosureProof) -> bytes:
    payload = encode_canonical((to_tree(artifact), to_tree(proof)))
    return pack_container(ARTIFACT_MAGIC, payload)


def unpack_artifact(data: bytes) -> tuple[MemoryArtifact, DisclosureProof]:
    tree = decode_canonical(unpack_container(ARTIFACT_MAGIC, data))
    if not (isinstance(tree, tuple) and len(tree) == 2):
        raise DecodingError("artifact container must hold (artifact, proof)")
    return from_tree(tree[0], MemoryArtifact), from_tree(tree[1], DisclosureProof)


def artifact_hash(container: bytes) -> Digest:
    return digest(Tag.FIELD, container)


# ---------------------------------------------------------------- verification


@dataclass(frozen=True)
class Check:
    name: str
    ok: bool
    detail: str = ""


@dataclass
class VerificationReport:
    checks: list[Check] = field(default_factory=list)
    # attachments never carry a certification claim
    attachment_present: bool = False

    @property
    def accepted(self) -> bool:
        return bool(self.checks) and all(c.ok for c in self.checks)

    def add(self, name: str, ok: bool, detail: str = "") -> bool:
        self.checks.append(Check(name, bool(ok), detail))
        return bool(ok)

    def failed(self) -> list[str]:
        return [c.name for c in self.checks if not c.ok]

    def render(self) -> str:
        lines = [f"[{'PASS' if c.ok else 'FAIL'}] {c.name}" + (f": {c.detail}" if c.detail else "")
                 for c in self.checks]
        if self.attachment_present:
            lines.append("[NOTE] attachment present: uncertified, integrity only")
        lines.append("ACCEPTED" if self.accepted else "REJECTED")
        return "\n".join(lines)


_CHECKS = ("origin", "root_claim", "chain", "openings", "interaction_digests", "attachment")


def _well_formed(artifact: MemoryArtifact, proof: DisclosureProof) -> str:
    n = artifact.claimed_root.length
    if len(proof.interaction_digests) != n:
        return f"proof lists {len(proof.interaction_digests)} digests for root length {n}"
    sel = artifact.selection
    if any(b <= a for a, b in zip(sel, sel[1:])):
        return "selection not strictly increasing"
    if sel and not (0 <= sel[0] and sel[-1] < n):
        return "selection index outside the claimed root"
    if len(artifact.opened) != len(sel) or len(proof.field_digests) != len(sel):
        return "per-interaction data does not match the selection"
    for row, vec in zip(artifact.opened, proof.field_digests):
        if len(row) != len(FIELDS) or len(vec) != len(FIELDS):
            return "every selected interaction must assign all fields"
        for fd in row:
            if isinstance(fd, Opened) and len(fd.salt) != SALT_LEN:
                return "opened field with malformed salt"
    return ""


def verify_artifact(
    artifact: MemoryArtifact,
    proof: DisclosureProof,
    expected_root: AnchoredRoot,
    genesis_inputs: tuple[bytes, bytes],
) -> VerificationReport:
    """Check a disclosed artifact against a trusted root; never raises."""
    report = VerificationReport()
    try:
        _verify_into(report, artifact, proof, expected_root, genesis_inputs)
    except Exception as exc:  # adversarial input must never escape as a crash
        report.add("well_formed", False, f"{type(exc).__name__}: {exc}")
    return report


def _verify_into(report, artifact, proof, expected_root, genesis_inputs) -> None:
    problem = _well_formed(artifact, proof)
    if not report.add("well_formed", not problem, problem):
        for name in _CHECKS:
            report.add(name, False, "skipped: malformed")
        return
    report.attachment_present = artifact.attachment is not None

    gch, agent = bytes(genesis_inputs[0]), bytes(genesis_inputs[1])
    report.add(
        "origin",
        artifact.gang_config_hash == gch and artifact.agent_public == agent,
        "" if artifact.gang_config_hash == gch else "artifact names another gang/agent",
    )
    report.add("root_claim", artifact.claimed_root == expected_root)

    roots = replay_chain(gch, agent, proof.interaction_digests)
    report.add(
        "chain",
        roots[-1] == expected_root,
        f"replayed {roots[-1].root.hex()[:16]} at length {roots[-1].length}",
    )

    bad_open = []
    for seq, row, vec in zip(artifact.selection, artifact.opened, proof.field_digests):
        for name, fd, listed in zip(FIELDS, row, vec):
            if isinstance(fd, Opened):
                if commit(Tag.FIELD, fd.salt, fd.encoded) != listed:
                    bad_open.append(f"{seq}.{name}")
            elif fd.commitment != listed:
                bad_open.append(f"{seq}.{name}")
    report.add("openings", not bad_open, ", ".join(bad_open[:8]))

    bad_idig = [
        seq
        for seq, vec in zip(artifact.selection, proof.field_digests)
        if interaction_digest(seq, vec) != proof.interaction_digests[seq]
    ]
    report.add("interaction_digests", not bad_idig, ", ".join(map(str, bad_idig[:8])))

    if artifact.attachment is None:
        ok = artifact.attachment_hash is None
        report.add("attachment", ok, "" if ok else "hash without attachment")
    else:
        report.add("attachment", attachment_digest(artifact.attachment) == artifact.attachment_hash)


def verify_container(
    container: bytes, expected_root: AnchoredRoot, genesis_inputs: tuple[bytes, bytes]
) -> VerificationReport:
    try:
        artifact, proof = unpack_artifact(container)
    except (DecodingError, ValueError) as exc:
        report = VerificationReport()
        report.add("decode", False, str(exc))
        return report
    report = verify_artifact(artifact, proof, expected_root, genesis_inputs)
    report.checks.insert(0, Check("decode", True))
    return report
