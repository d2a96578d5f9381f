from __future__ import annotations

import hashlib
import random
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from certmem.canon import (
    DecodingError,
    EncodingError,
    KeyPair,
    Tag,
    commit,
    decode_canonical,
    digest,
    encode_canonical,
    from_json,
    from_tree,
    pack_container,
    sign,
    to_json,
    to_tree,
    unpack_container,
    verify,
)
from certmem.ledger import AnchoredRoot

from conftest import oracle_encode

# Frozen outputs of an independent hashlib computation over b"certmem.v1/<TAG>\x00" + payload.
FIELD_EMPTY = "87641db8651800942e7567261e5572f592784ad035991560cb71e4733779188f"
INTERACTION_ABC = "4f3ae2777ea7238a018eebb1f76b0bbeea32b97d3d27c49c5f89f68157ddafe5"


leaves = st.one_of(
    st.none(),
    st.booleans(),
    st.integers(min_value=0, max_value=2**64 - 1),
    st.binary(max_size=40),
    st.text(max_size=20),
)
trees = st.recursive(
    leaves,
    lambda kids: st.one_of(st.lists(kids, max_size=5), st.lists(kids, max_size=5).map(tuple)),
    max_leaves=25,
)


def test_digest_matches_frozen_oracle_vectors():
    assert digest(Tag.FIELD, b"").hex() == FIELD_EMPTY
    assert digest(Tag.INTERACTION, b"abc").hex() == INTERACTION_ABC
    assert digest(Tag.FIELD, b"x") == hashlib.sha256(b"certmem.v1/FIELD\x00x").digest()


def test_empty_bytes_is_type_byte_and_zero_length():
    assert encode_canonical(b"") == b"\x01" + b"\x00" * 8


def test_zero_and_eight_zero_bytes_differ():
    assert encode_canonical(0) != encode_canonical(b"\x00" * 8)
    assert encode_canonical(0) == b"\x02" + b"\x00" * 8


def test_record_encoding_is_deterministic():
    rec = ("x", "y")
    assert encode_canonical(rec) == encode_canonical(("x", "y"))


def test_list_and_record_are_distinct():
    assert encode_canonical([1, 2]) != encode_canonical((1, 2))


@pytest.mark.parametrize("bad", [-1, 2**64, 10**30])
def test_out_of_range_integer_is_rejected(bad):
    with pytest.raises(EncodingError):
        encode_canonical(bad)


def test_unsupported_type_is_rejected():
    with pytest.raises(EncodingError):
        encode_canonical(1.5)


@settings(max_examples=300)
@given(trees)
def test_encoding_matches_independent_encoder(tree):
    assert encode_canonical(tree) == oracle_encode(tree)


@settings(max_examples=300)
@given(trees)
def test_decode_inverts_encode(tree):
    assert decode_canonical(encode_canonical(tree)) == tree


def _strict_eq(a, b) -> bool:
    # equality that keeps True apart from 1 and tuples apart from lists
    if type(a) is not type(b):
        return False
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(_strict_eq(x, y) for x, y in zip(a, b))
    return a == b


def test_injectivity_over_10000_random_trees():
    gen = random.Random(2024)

    def rand_tree(depth=0):
        k = gen.randrange(7 if depth < 3 else 5)
        if k == 0:
            return None
        if k == 1:
            return gen.random() < 0.5
        if k == 2:
            return gen.choice([0, 1, 255, 2**64 - 1, gen.randrange(2**64)])
        if k == 3:
            return gen.randbytes(gen.randrange(0, 9))
        if k == 4:
            return "".join(gen.choice("ab\x00é") for _ in range(gen.randrange(0, 4)))
        items = [rand_tree(depth + 1) for _ in range(gen.randrange(0, 4))]
        return items if k == 5 else tuple(items)

    seen: dict[bytes, object] = {}
    for _ in range(10_000):
        t = rand_tree()
        enc = encode_canonical(t)
        if enc in seen:
            assert _strict_eq(seen[enc], t)
        seen[enc] = t
    assert len(seen) > 1000


@pytest.mark.parametrize("data", [b"", b"\x07", b"\x01\x00", b"\x02" + b"\x00" * 7,
                                  b"\x01" + struct.pack(">Q", 5) + b"abc",
                                  b"\x04" + struct.pack(">Q", 2**40),
                                  b"\x06\x02", b"\x03" + struct.pack(">Q", 1) + b"\xff"])
def test_malformed_input_raises_decoding_error(data):
    with pytest.raises(DecodingError):
        decode_canonical(data)


def test_trailing_bytes_rejected():
    with pytest.raises(DecodingError):
        decode_canonical(encode_canonical(5) + b"\x00")


def test_tags_are_pairwise_distinct():
    prefixes = [t.prefix for t in Tag]
    assert len(set(prefixes)) == len(prefixes)


def test_tag_separation_over_1000_trials():
    gen = random.Random(1)
    for _ in range(1000):
        x = gen.randbytes(gen.randrange(0, 64))
        assert digest(Tag.FIELD, x) != digest(Tag.INTERACTION, x)


def test_commit_salt_length_is_enforced():
    with pytest.raises(ValueError):
        commit(Tag.FIELD, b"short", b"payload")
    with pytest.raises(ValueError):
        commit(Tag.FIELD, b"\x00" * 17, b"payload")


def test_commit_opening_and_hiding_precondition():
    payload = encode_canonical(b"secret")
    s1, s2 = b"\x01" * 16, b"\x02" * 16
    assert commit(Tag.FIELD, s1, payload) != commit(Tag.FIELD, s2, payload)
    assert commit(Tag.FIELD, s1, payload) == hashlib.sha256(
        b"certmem.v1/FIELD\x00" + s1 + payload).digest()


def test_commit_bit_flip_trials():
    gen = random.Random(5)
    for _ in range(500):
        payload = gen.randbytes(gen.randrange(1, 100))
        salt = gen.randbytes(16)
        i = gen.randrange(len(payload) * 8)
        flipped = bytearray(payload)
        flipped[i // 8] ^= 1 << (i % 8)
        assert commit(Tag.FIELD, salt, payload) != commit(Tag.FIELD, salt, bytes(flipped))


def test_sign_verify_and_domain_separation():
    key = KeyPair.from_seed(b"\x11" * 32)
    sig = sign(key, Tag.RECEIPT, b"msg")
    assert len(sig) == 64
    assert verify(key.public, Tag.RECEIPT, b"msg", sig)
    assert not verify(key.public, Tag.TOKEN, b"msg", sig)
    assert not verify(key.public, Tag.RECEIPT, b"msh", sig)


def test_truncated_and_malformed_signatures_never_raise():
    gen = random.Random(9)
    key = KeyPair.generate(gen.randbytes)
    sig = key.sign(Tag.CERT, b"payload")
    for _ in range(300):
        cut = sig[: gen.randrange(0, 64)]
        assert verify(key.public, Tag.CERT, b"payload", cut) is False
        junk_key = gen.randbytes(gen.randrange(0, 40))
        assert verify(junk_key, Tag.CERT, b"payload", sig) in (False, True)
    assert verify(b"", Tag.CERT, b"payload", b"") is False


@given(st.binary(max_size=200))
def test_sign_verify_roundtrip_any_payload(payload):
    key = KeyPair.from_seed(b"\x22" * 32)
    assert verify(key.public, Tag.ANCHOR, payload, key.sign(Tag.ANCHOR, payload))


def test_container_framing():
    blob = pack_container(b"TEST", b"payload")
    assert blob[:5] == b"TEST\x01"
    assert unpack_container(b"TEST", blob) == b"payload"
    with pytest.raises(DecodingError):
        unpack_container(b"ELSE", blob)
    with pytest.raises(DecodingError):
        unpack_container(b"TEST", b"TEST\x02payload")


def test_typed_codec_roundtrip_tree_and_json():
    root = AnchoredRoot(3, digest(Tag.ROOT, b"r"))
    assert from_tree(to_tree(root), AnchoredRoot) == root
    js = to_json(root)
    assert js["root"] == root.root.hex()
    assert from_json(js, AnchoredRoot) == root
