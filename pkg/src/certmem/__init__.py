"""Certified agent memory: attested interaction logs, selective disclosure
artifacts and an escrowed market for trading them."""

from .canon import Digest, KeyPair, PublicKey, Signature, Tag, decode_canonical, digest, encode_canonical
from .enclave import Enclave, boot
from .gang import GangRegistry, GangTemplate, MembershipCertificate
from .ledger import (
    AnchoredRoot,
    DisclosureProof,
    InteractionLog,
    MemoryArtifact,
    pack_artifact,
    unpack_artifact,
    verify_artifact,
    verify_container,
)

__version__ = "0.1.0"

__all__ = [
    "AnchoredRoot", "Digest", "DisclosureProof", "Enclave", "GangRegistry", "GangTemplate",
    "InteractionLog", "KeyPair", "MembershipCertificate", "MemoryArtifact", "PublicKey", "Signature",
    "Tag", "boot", "decode_canonical", "digest", "encode_canonical", "pack_artifact", "unpack_artifact",
    "verify_artifact", "verify_container",
]
