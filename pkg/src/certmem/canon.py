"""Canonical encoding, domain-separated hashing, salted commitments and Ed25519.

Every byte string that is hashed or signed anywhere in the package goes
through :func:`encode_canonical` first, so any verifier holding the same
value tree reproduces the same bytes.

Wire layout of a value tree (all integers big-endian)::

    None      00
    bytes     01 <u64 length> <data>
    uint      02 <u64 value>
    str       03 <u64 length> <utf-8>
    list      04 <u64 count> <item>...
    record    05 <u64 count> <field>...     (a Python tuple)
    bool      06 <00|01>

The leading type byte keeps the encoding injective across leaf kinds (the
integer 0 and eight zero bytes encode differently).
"""

from __future__ import annotations

import base64
import dataclasses
import enum
import hashlib
import os
import random
import struct
import types
import typing
from dataclasses import dataclass
from typing import Any, Callable, NewType, Union

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

Digest = NewType("Digest", bytes)
PublicKey = NewType("PublicKey", bytes)
Signature = NewType("Signature", bytes)

# Returns n random bytes.
RandomSource = Callable[[int], bytes]

SALT_LEN = 16
DIGEST_LEN = 32
KEY_LEN = 32
MAX_UINT = 2**64 - 1
MAX_DEPTH = 64

_T_NONE = 0x00
_T_BYTES = 0x01
_T_UINT = 0x02
_T_STR = 0x03
_T_LIST = 0x04
_T_RECORD = 0x05
_T_BOOL = 0x06


class EncodingError(ValueError):
    pass


class DecodingError(ValueError):
    pass


class Tag(str, enum.Enum):
    """Domain separation labels; one per hashing or signing context."""

    FIELD = "FIELD"
    INTERACTION = "INTERACTION"
    ROOT = "ROOT"
    RECEIPT = "RECEIPT"
    CERT = "CERT"
    ANCHOR = "ANCHOR"
    TOKEN = "TOKEN"
    INHERIT = "INHERIT"
    OWNER = "OWNER"
    CONFIRM = "CONFIRM"
    HELLO = "HELLO"
    MEMBERS = "MEMBERS"
    ARBITER = "ARBITER"
    BULLETIN = "BULLETIN"
    META = "META"
    KEYGEN = "KEYGEN"

    @property
    def prefix(self) -> bytes:
        return b"certmem.v1/" + self.value.encode("ascii") + b"\x00"


# ---------------------------------------------------------------- encoding


def encode_canonical(value: Any) -> bytes:
    out = bytearray()
    _encode(value, out, 0)
    return bytes(out)


def _encode(value: Any, out: bytearray, depth: int) -> None:
    if depth > MAX_DEPTH:
        raise EncodingError("value tree too deep")
    if value is None:
        out.append(_T_NONE)
    elif isinstance(value, bool):
        out.append(_T_BOOL)
        out.append(1 if value else 0)
    elif isinstance(value, int):
        if not 0 <= value <= MAX_UINT:
            raise EncodingError(f"integer {value} does not fit in an unsigned 64-bit field")
        out.append(_T_UINT)
        out += struct.pack(">Q", value)
    elif isinstance(value, (bytes, bytearray, memoryview)):
        data = bytes(value)
        out.append(_T_BYTES)
        out += struct.pack(">Q", len(data))
        out += data
    elif isinstance(value, str):
        data = value.encode("utf-8")
        out.append(_T_STR)
        out += struct.pack(">Q", len(data))
        out += data
    elif isinstance(value, (list, tuple)):
        out.append(_T_RECORD if isinstance(value, tuple) else _T_LIST)
        out += struct.pack(">Q", len(value))
        for item in value:
            _encode(item, out, depth + 1)
    else:
        raise EncodingError(f"cannot canonically encode {type(value).__name__}")


def decode_canonical(data: bytes) -> Any:
    """Strict inverse of :func:`encode_canonical`; rejects trailing bytes."""
    data = bytes(data)
    value, pos = _decode(data, 0, 0)
    if pos != len(data):
        raise DecodingError(f"{len(data) - pos} trailing bytes")
    return value


def _take(data: bytes, pos: int, n: int) -> tuple[bytes, int]:
    if n < 0 or pos + n > len(data):
        raise DecodingError("truncated input")
    return data[pos : pos + n], pos + n


def _decode(data: bytes, pos: int, depth: int) -> tuple[Any, int]:
    if depth > MAX_DEPTH:
        raise DecodingError("value tree too deep")
    head, pos = _take(data, pos, 1)
    kind = head[0]
    if kind == _T_NONE:
        return None, pos
    if kind == _T_BOOL:
        b, pos = _take(data, pos, 1)
        if b[0] > 1:
            raise DecodingError("bad bool")
        return b[0] == 1, pos
    if kind not in (_T_UINT, _T_BYTES, _T_STR, _T_LIST, _T_RECORD):
        raise DecodingError(f"unknown type byte {kind:#04x}")
    raw, pos = _take(data, pos, 8)
    n = struct.unpack(">Q", raw)[0]
    if kind == _T_UINT:
        return n, pos
    if kind in (_T_BYTES, _T_STR):
        body, pos = _take(data, pos, n)
        if kind == _T_BYTES:
            return body, pos
        try:
            return body.decode("utf-8"), pos
        except UnicodeDecodeError as exc:
            raise DecodingError("invalid utf-8") from exc
    # every item takes at least one byte
    if n > len(data) - pos:
        raise DecodingError("item count exceeds input")
    items = []
    for _ in range(n):
        item, pos = _decode(data, pos, depth + 1)
        items.append(item)
    return (tuple(items) if kind == _T_RECORD else items), pos


# ---------------------------------------------------------------- hashing


def digest(tag: Tag, payload: bytes) -> Digest:
    return Digest(hashlib.sha256(tag.prefix + bytes(payload)).digest())


def commit(tag: Tag, salt: bytes, payload: bytes) -> Digest:
    if len(salt) != SALT_LEN:
        raise ValueError(f"salt must be {SALT_LEN} bytes, got {len(salt)}")
    return digest(tag, bytes(salt) + bytes(payload))


def hash_value(tag: Tag, value: Any) -> Digest:
    """Shorthand for ``digest(tag, encode_canonical(value))``."""
    return digest(tag, encode_canonical(value))


# ---------------------------------------------------------------- randomness


def system_rng(n: int) -> bytes:
    return os.urandom(n)


def insecure_seeded_rng(seed: int) -> RandomSource:
    """Deterministic byte source for tests and replayable scenarios.

    INSECURE: salts and keys drawn from it are predictable from the seed.
    """
    gen = random.Random(seed)
    return gen.randbytes


# ---------------------------------------------------------------- signatures


@dataclass(frozen=True)
class KeyPair:
    secret: bytes
    public: PublicKey

    @classmethod
    def from_seed(cls, seed: bytes) -> KeyPair:
        if len(seed) != KEY_LEN:
            raise ValueError("Ed25519 seed must be 32 bytes")
        sk = Ed25519PrivateKey.from_private_bytes(bytes(seed))
        return cls(bytes(seed), PublicKey(sk.public_key().public_bytes_raw()))

    @classmethod
    def generate(cls, rng: RandomSource | None = None) -> KeyPair:
        return cls.from_seed((rng or system_rng)(KEY_LEN))

    def sign(self, tag: Tag, payload: bytes) -> Signature:
        return sign(self, tag, payload)

    def __repr__(self) -> str:
        return f"KeyPair(public={self.public.hex()[:16]}...)"


def sign(key: KeyPair, tag: Tag, payload: bytes) -> Signature:
    sk = Ed25519PrivateKey.from_private_bytes(key.secret)
    return Signature(sk.sign(digest(tag, payload)))


def verify(public: bytes, tag: Tag, payload: bytes, sig: bytes) -> bool:
    try:
        pk = Ed25519PublicKey.from_public_bytes(bytes(public))
        pk.verify(bytes(sig), digest(tag, payload))
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


# ---------------------------------------------------------------- containers

CONTAINER_VERSION = 1


def pack_container(magic: bytes, payload: bytes, version: int = CONTAINER_VERSION) -> bytes:
    if len(magic) != 4:
        raise ValueError("container magic must be 4 bytes")
    return bytes(magic) + bytes([version]) + bytes(payload)


def unpack_container(magic: bytes, data: bytes, version: int = CONTAINER_VERSION) -> bytes:
    data = bytes(data)
    if len(data) < 5 or data[:4] != magic:
        raise DecodingError(f"bad container magic, expected {magic!r}")
    if data[4] != version:
        raise DecodingError(f"unsupported container version {data[4]}")
    return data[5:]


# ---------------------------------------------------------------- typed codec
#
# Dataclasses map to records (fields in declaration order). A union of
# dataclasses is a tagged record ``(class_name, record)``. Enums encode as
# their string value. The same hints drive JSON conversion, where Digest and
# PublicKey become lowercase hex and other bytes become base64.

_hint_cache: dict[type, dict[str, Any]] = {}


def _hints(cls: type) -> dict[str, Any]:
    hints = _hint_cache.get(cls)
    if hints is None:
        hints = typing.get_type_hints(cls)
        _hint_cache[cls] = hints
    return hints


def _union_args(hint: Any) -> tuple | None:
    origin = typing.get_origin(hint)
    if origin is Union or origin is types.UnionType:
        return typing.get_args(hint)
    return None


def _fields(cls: type) -> list[tuple[str, Any]]:
    hints = _hints(cls)
    return [(f.name, hints[f.name]) for f in dataclasses.fields(cls) if f.init]


def to_tree(value: Any, hint: Any = None) -> Any:
    if hint is None:
        hint = type(value)
    args = _union_args(hint)
    if args is not None:
        if value is None:
            return None
        members = [a for a in args if a is not type(None)]
        if len(members) == 1:
            return to_tree(value, members[0])
        if type(value) not in members:
            raise EncodingError(f"{type(value).__name__} not in {hint}")
        return (type(value).__name__, to_tree(value, type(value)))
    if dataclasses.is_dataclass(hint):
        return tuple(to_tree(getattr(value, name), h) for name, h in _fields(hint))
    if isinstance(hint, type) and issubclass(hint, enum.Enum):
        return value.value
    origin = typing.get_origin(hint)
    if origin in (list, tuple):
        (item,) = typing.get_args(hint)[:1]
        return [to_tree(v, item) for v in value]
    if origin is dict:
        kh, vh = typing.get_args(hint)
        pairs = [(to_tree(k, kh), to_tree(v, vh)) for k, v in value.items()]
        return sorted(pairs, key=lambda kv: encode_canonical(kv[0]))
    return value


def from_tree(tree: Any, hint: Any) -> Any:
    """Rebuild a typed value from a decoded tree, validating shapes."""
    args = _union_args(hint)
    if args is not None:
        if tree is None and type(None) in args:
            return None
        members = [a for a in args if a is not type(None)]
        if len(members) == 1:
            return from_tree(tree, members[0])
        if not (isinstance(tree, tuple) and len(tree) == 2 and isinstance(tree[0], str)):
            raise DecodingError("expected tagged union")
        for m in members:
            if m.__name__ == tree[0]:
                return from_tree(tree[1], m)
        raise DecodingError(f"unknown union variant {tree[0]!r}")
    if dataclasses.is_dataclass(hint):
        fields = _fields(hint)
        if not isinstance(tree, tuple) or len(tree) != len(fields):
            raise DecodingError(f"bad record for {hint.__name__}")
        kwargs = {name: from_tree(t, h) for (name, h), t in zip(fields, tree)}
        try:
            return hint(**kwargs)
        except (TypeError, ValueError) as exc:
            raise DecodingError(f"invalid {hint.__name__}: {exc}") from exc
    if isinstance(hint, type) and issubclass(hint, enum.Enum):
        try:
            return hint(tree)
        except ValueError as exc:
            raise DecodingError(str(exc)) from exc
    origin = typing.get_origin(hint)
    if origin in (list, tuple):
        if not isinstance(tree, list):
            raise DecodingError("expected list")
        item = typing.get_args(hint)[0]
        items = [from_tree(t, item) for t in tree]
        return tuple(items) if origin is tuple else items
    if origin is dict:
        kh, vh = typing.get_args(hint)
        if not isinstance(tree, list) or not all(isinstance(p, tuple) and len(p) == 2 for p in tree):
            raise DecodingError("expected list of pairs")
        return {from_tree(k, kh): from_tree(v, vh) for k, v in tree}
    if hint in (Digest, PublicKey):
        if not isinstance(tree, bytes) or len(tree) != 32:
            raise DecodingError(f"{hint.__name__} must be 32 bytes")
        return tree
    if hint is Signature or hint is bytes:
        if not isinstance(tree, bytes):
            raise DecodingError("expected bytes")
        return tree
    if hint is bool:
        if not isinstance(tree, bool):
            raise DecodingError("expected bool")
        return tree
    if hint is int:
        if isinstance(tree, bool) or not isinstance(tree, int):
            raise DecodingError("expected uint")
        return tree
    if hint is str:
        if not isinstance(tree, str):
            raise DecodingError("expected str")
        return tree
    if hint is float:
        # only reachable from JSON; the canonical encoding has no floats
        if isinstance(tree, bool) or not isinstance(tree, (int, float)):
            raise DecodingError("expected number")
        return float(tree)
    raise DecodingError(f"unsupported hint {hint!r}")


def to_json(value: Any, hint: Any = None) -> Any:
    if hint is None:
        hint = type(value)
    args = _union_args(hint)
    if args is not None:
        if value is None:
            return None
        members = [a for a in args if a is not type(None)]
        if len(members) == 1:
            return to_json(value, members[0])
        return {"kind": type(value).__name__, **to_json(value, type(value))}
    if dataclasses.is_dataclass(hint):
        return {name: to_json(getattr(value, name), h) for name, h in _fields(hint)}
    if isinstance(hint, type) and issubclass(hint, enum.Enum):
        return value.value
    origin = typing.get_origin(hint)
    if origin in (list, tuple):
        item = typing.get_args(hint)[0]
        return [to_json(v, item) for v in value]
    if origin is dict:
        kh, vh = typing.get_args(hint)
        if kh is not str:
            raise EncodingError("JSON objects need string keys")
        return {k: to_json(v, vh) for k, v in value.items()}
    if hint in (Digest, PublicKey):
        return bytes(value).hex()
    if hint is Signature or hint is bytes:
        return base64.b64encode(bytes(value)).decode("ascii")
    return value


def from_json(obj: Any, hint: Any) -> Any:
    args = _union_args(hint)
    if args is not None:
        if obj is None and type(None) in args:
            return None
        members = [a for a in args if a is not type(None)]
        if len(members) == 1:
            return from_json(obj, members[0])
        if not isinstance(obj, dict) or "kind" not in obj:
            raise DecodingError("expected tagged object")
        for m in members:
            if m.__name__ == obj["kind"]:
                return from_json({k: v for k, v in obj.items() if k != "kind"}, m)
        raise DecodingError(f"unknown variant {obj['kind']!r}")
    if dataclasses.is_dataclass(hint):
        if not isinstance(obj, dict):
            raise DecodingError(f"expected object for {hint.__name__}")
        fields = _fields(hint)
        missing = [name for name, _ in fields if name not in obj]
        if missing:
            raise DecodingError(f"{hint.__name__} missing fields {missing}")
        tree = tuple(_json_to_tree(obj[name], h) for name, h in fields)
        return from_tree(tree, hint)
    return from_tree(_json_to_tree(obj, hint), hint)


def _json_to_tree(obj: Any, hint: Any) -> Any:
    # Converts JSON leaves to tree leaves, then from_tree validates.
    args = _union_args(hint)
    if args is not None:
        if obj is None:
            return None
        members = [a for a in args if a is not type(None)]
        if len(members) == 1:
            return _json_to_tree(obj, members[0])
        value = from_json(obj, hint)
        return to_tree(value, hint)
    if dataclasses.is_dataclass(hint):
        return to_tree(from_json(obj, hint), hint)
    origin = typing.get_origin(hint)
    if origin in (list, tuple):
        if not isinstance(obj, list):
            raise DecodingError("expected list")
        item = typing.get_args(hint)[0]
        return [_json_to_tree(v, item) for v in obj]
    if origin is dict:
        if not isinstance(obj, dict):
            raise DecodingError("expected object")
        vh = typing.get_args(hint)[1]
        return [(k, _json_to_tree(v, vh)) for k, v in obj.items()]
    try:
        if hint in (Digest, PublicKey):
            return bytes.fromhex(obj)
        if hint is Signature or hint is bytes:
            return base64.b64decode(obj, validate=True)
    except (ValueError, TypeError) as exc:
        raise DecodingError(f"bad {getattr(hint, '__name__', hint)} encoding") from exc
    return obj


def dumps(value: Any, hint: Any = None) -> bytes:
    return encode_canonical(to_tree(value, hint))


def loads(data: bytes, hint: Any) -> Any:
    return from_tree(decode_canonical(data), hint)
