"""Deterministic stand-in for an external model API."""

from __future__ import annotations

import threading
from collections import defaultdict
from dataclasses import dataclass

from ..canon import KeyPair, PublicKey, Tag, digest, hash_value
from ..enclave import ProviderConfig, ProviderResponse

DEFAULT_ENDPOINT = "https://mock-provider.invalid/v1/complete"
DEFAULT_MODEL = "mock-clean-1"


def token_count(data: bytes) -> int:
    return len(bytes(data).split())


def clean_payload(prompt: bytes) -> bytes:
    """Uppercase-and-trim whatever follows the first ``|`` (or the whole prompt)."""
    _, sep, rest = bytes(prompt).partition(b"|")
    return (rest if sep else bytes(prompt)).strip().upper()


def provider_respond(prompt: bytes) -> tuple[bytes, int, int]:
    prompt = bytes(prompt)
    prefix = digest(Tag.FIELD, prompt).hex()[:16].encode()
    response = b"R:" + prefix + b":" + clean_payload(prompt)
    return response, token_count(prompt), token_count(response)


@dataclass
class Usage:
    calls: int = 0
    token_in: int = 0
    token_out: int = 0


class MockProvider:
    """Signs handshakes with its own key and keeps per-credential usage counters.

    ``fail_next`` makes the next N calls raise ``ConnectionError`` (fault injection).
    """

    def __init__(
        self,
        key: KeyPair | None = None,
        *,
        model_name: str = DEFAULT_MODEL,
        endpoint: str = DEFAULT_ENDPOINT,
        seed: int = 0,
    ):
        self.key = key or KeyPair.from_seed(hash_value(Tag.KEYGEN, ("mock provider", seed)))
        self.model_name = model_name
        self.endpoint = endpoint
        self.usage: dict[bytes, Usage] = defaultdict(Usage)
        self.fail_next = 0
        self._lock = threading.Lock()

    @property
    def public(self) -> PublicKey:
        return self.key.public

    def config(self, credential: bytes) -> ProviderConfig:
        return ProviderConfig(self.endpoint, self.public, self.model_name, credential)

    def _maybe_fail(self) -> None:
        if self.fail_next > 0:
            self.fail_next -= 1
            raise ConnectionError("injected provider outage")

    def hello(self, nonce: bytes) -> tuple[bytes, bytes]:
        self._maybe_fail()
        return self.public, self.key.sign(Tag.HELLO, bytes(nonce))

    def complete(self, prompt: bytes, credential: bytes) -> ProviderResponse:
        self._maybe_fail()
        response, tin, tout = provider_respond(prompt)
        with self._lock:
            u = self.usage[bytes(credential)]
            u.calls += 1
            u.token_in += tin
            u.token_out += tout
        return ProviderResponse(response, tin, tout)
