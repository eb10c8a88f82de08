"""Emulated untrusted guest context.

The guest brokers everything that crosses the trust boundary: external
file reads, the handshake transcript, request/response ciphertexts, and
fallback transfer envelopes.  Every byte string it observes is appended to
a tap log so secrecy tests can scan for plaintext leakage.  Being the
adversary-controlled component, it also exposes tamper hooks for tests.
"""

from __future__ import annotations

from typing import Optional


class TaintedBytes(bytes):
    """Bytes fetched from the untrusted guest, not yet integrity-checked.

    Pipeline ops must never see this type; the nested filesystem converts
    it to plain bytes only after the manifest digest check passes.
    """


class GuestBroker:
    """PL2 broker: external files, registry transport, and the tap log."""

    def __init__(self) -> None:
        self.files: dict[str, bytes] = {}
        self.tap: list[bytes] = []
        self.file_reads: list[str] = []
        # Test hook: path -> function(bytes) -> bytes applied on read.
        self._tamper: dict[str, object] = {}

    # -- observation ----------------------------------------------------------

    def observe(self, data: bytes) -> None:
        if data:
            self.tap.append(bytes(data))

    def tap_contains(self, needle: bytes) -> bool:
        return any(needle in blob for blob in self.tap)

    # -- external filesystem ----------------------------------------------------

    def put_file(self, path: str, content: bytes) -> None:
        self.files[path] = bytes(content)

    def tamper_file(self, path: str, mutate) -> None:
        """Adversarial hook: mutate the content served for path."""
        self._tamper[path] = mutate

    def read_file(self, path: str) -> Optional[TaintedBytes]:
        self.file_reads.append(path)
        content = self.files.get(path)
        if content is None:
            return None
        mutate = self._tamper.get(path)
        if mutate is not None:
            content = mutate(content)
        self.observe(content)
        return TaintedBytes(content)
