from __future__ import annotations

import hashlib
import random
import struct

import pytest

from certmem.canon import Digest, KeyPair, Tag, hash_value
from certmem.gang import TradePolicy
from certmem.harness.world import World
from certmem.ledger import InteractionLog, make_record


def oracle_encode(v) -> bytes:
    """Second, independently written encoder used as a cross-check."""
    if v is None:
        return b"\x00"
    if v is True or v is False:
        return b"\x06" + (b"\x01" if v else b"\x00")
    if isinstance(v, int):
        return b"\x02" + struct.pack(">Q", v)
    if isinstance(v, bytes):
        return b"\x01" + struct.pack(">Q", len(v)) + v
    if isinstance(v, str):
        raw = v.encode()
        return b"\x03" + struct.pack(">Q", len(raw)) + raw
    head = b"\x05" if isinstance(v, tuple) else b"\x04"
    return head + struct.pack(">Q", len(v)) + b"".join(oracle_encode(x) for x in v)


def oracle_hash(tag: str, value) -> bytes:
    return hashlib.sha256(b"certmem.v1/" + tag.encode() + b"\x00" + oracle_encode(value)).digest()


def random_log(seed: int, n: int, max_field: int = 64) -> InteractionLog:
    """A log of ``n`` records with random field contents, fully seeded."""
    gen = random.Random(seed)
    agent = KeyPair.generate(gen.randbytes)
    gch = hash_value(Tag.CERT, ("test gang", seed))
    log = InteractionLog(gch, agent.public)
    ts = 1_700_000_000_000
    for i in range(n):
        ts += gen.randrange(0, 5000)
        log.append(make_record(
            i,
            gen.randbytes(gen.randrange(0, max_field + 1)),
            gen.randbytes(gen.randrange(0, max_field + 1)),
            gen.choice(["m-small", "m-large", ""]),
            gen.randrange(0, 10_000),
            gen.randrange(0, 10_000),
            ts,
            gen.randbytes,
        ))
    return log


@pytest.fixture
def log10() -> InteractionLog:
    return random_log(10, 10)


@pytest.fixture
def world() -> World:
    return World(seed=11)


@pytest.fixture
def gang(world: World) -> tuple[Digest, object]:
    return world.create_gang("summarise the toy table", b"image-v1", TradePolicy())
