"""Measurement service and the differential-attestation report machinery.

Immutable components (monitor, zygote, function) are measured once and the
digests cached; per-invocation reports hash only the mutable input and
output bytes, so the hashing cost of a warm invocation is independent of
zygote size.  The simulated platform root of trust is a signing keypair
exposing the gen/verif/getD black-box:

    verif(gen(m, d, u), m, d) = true
    getD(gen(m, d, u)) = u
"""

from __future__ import annotations

import hashlib
import io
import itertools
import json
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

from .crypto import Rng, SigningKey, verify_signature
from .errors import NoPolicyKey
from .memory import CostModel

DIGEST_LEN = 64
NONCE_LEN = 16


def sha512(data: bytes) -> bytes:
    return hashlib.sha512(data).digest()


class SubjectKind(str, Enum):
    MONITOR = "monitor"
    ZYGOTE = "zygote"
    FUNCTION = "function"
    INPUT = "input"
    OUTPUT = "output"


@dataclass(frozen=True)
class Measurement:
    digest: bytes
    subject: SubjectKind
    cached_at: int  # simulated microseconds


class MeasurementCache:
    """Digest cache keyed by (subject kind, content id).

    A hit returns the stored digest with zero hash charge and adds nothing
    to bytes_hashed.  Content ids identify a loaded context (image or
    function instance), mirroring digests being cached alongside the
    process state they describe.
    """

    _transient = itertools.count()

    def __init__(self) -> None:
        self.entries: dict[tuple[SubjectKind, str], Measurement] = {}
        self.hits = 0
        self.misses = 0
        self.bytes_hashed = 0

    def measure(self, kind: SubjectKind, content_id: str, content: bytes,
                model: CostModel, now_us: int = 0) -> tuple[Measurement, int]:
        """Return (measurement, simulated hash charge in microseconds)."""
        key = (kind, content_id)
        cached = self.entries.get(key)
        if cached is not None:
            self.hits += 1
            return cached, 0
        self.misses += 1
        self.bytes_hashed += len(content)
        measurement = Measurement(sha512(content), kind, now_us)
        self.entries[key] = measurement
        return measurement, model.hash_us(len(content))

    def measure_transient(self, kind: SubjectKind, content: bytes,
                          model: CostModel,
                          now_us: int = 0) -> tuple[Measurement, int]:
        """Measure mutable content (input/output); never served from cache."""
        self.misses += 1
        self.bytes_hashed += len(content)
        return Measurement(sha512(content), kind, now_us), model.hash_us(len(content))


# -- simulated platform root of trust ------------------------------------------


class MachineKey:
    """Vendor-provisioned signing key standing in for the platform ASP."""

    def __init__(self, signer: SigningKey):
        self.signer = signer

    @staticmethod
    def generate(rng: Rng) -> "MachineKey":
        return MachineKey(SigningKey.generate(rng))

    @property
    def machine_id(self) -> bytes:
        return machine_id_of(self.signer.public_bytes())

    def public_bytes(self) -> bytes:
        return self.signer.public_bytes()

    def export_cert(self) -> str:
        """Vendor certificate: 32-byte public key, hex-encoded, one line."""
        return self.public_bytes().hex() + "\n"


def machine_id_of(public: bytes) -> bytes:
    """Fingerprint identifying a machine key."""
    return hashlib.sha256(public).digest()[:16]


def load_cert(text: str) -> bytes:
    """Parse an exported vendor certificate back into the public key."""
    raw = bytes.fromhex(text.strip())
    if len(raw) != 32:
        raise ValueError("vendor certificate must hold a 32-byte key")
    return raw


@dataclass(frozen=True)
class PlatformReport:
    """Signed launch measurement: gen(m, d, u)."""

    machine_id: bytes
    monitor_measurement: bytes
    user_data: bytes
    signature: bytes

    def signed_message(self) -> bytes:
        return self.machine_id + self.monitor_measurement + self.user_data

    def to_bytes(self) -> bytes:
        out = io.BytesIO()
        for part in (self.machine_id, self.monitor_measurement,
                     self.user_data, self.signature):
            out.write(struct.pack(">I", len(part)))
            out.write(part)
        return out.getvalue()

    @staticmethod
    def from_bytes(data: bytes) -> "PlatformReport":
        parts = []
        pos = 0
        for _ in range(4):
            (n,) = struct.unpack_from(">I", data, pos)
            pos += 4
            parts.append(data[pos : pos + n])
            pos += n
        if pos != len(data):
            raise ValueError("trailing bytes after platform report")
        return PlatformReport(*parts)


def asp_gen(machine_key: MachineKey, monitor_measurement: bytes,
            user_data: bytes) -> PlatformReport:
    """gen(m, d, u): deterministic signed platform report."""
    if len(user_data) != DIGEST_LEN:
        raise ValueError("user_data must be 64 bytes")
    report = PlatformReport(machine_key.machine_id, bytes(monitor_measurement),
                            bytes(user_data), b"")
    signature = machine_key.signer.sign(report.signed_message())
    return PlatformReport(report.machine_id, report.monitor_measurement,
                          report.user_data, signature)


def asp_verif(report: PlatformReport, machine_id: bytes,
              expected_measurement: bytes, vendor_public: bytes) -> bool:
    """verif(report, m, d): signature + machine + measurement must all hold."""
    if report.machine_id != machine_id:
        return False
    if machine_id_of(vendor_public) != machine_id:
        return False
    if report.monitor_measurement != expected_measurement:
        return False
    return verify_signature(vendor_public, report.signed_message(),
                            report.signature)


def asp_get_user_data(report: PlatformReport) -> bytes:
    """getD(report): the embedded user data."""
    return report.user_data


# -- differential attestation reports ------------------------------------------


@dataclass(frozen=True)
class ChainEntry:
    """Measurements for one function execution in a (possibly 1-long) chain."""

    zygote_digest: bytes
    function_digest: bytes
    input_digest: bytes
    output_digest: bytes

    def to_bytes(self) -> bytes:
        return (self.zygote_digest + self.function_digest
                + self.input_digest + self.output_digest)

    @staticmethod
    def from_bytes(data: bytes) -> "ChainEntry":
        if len(data) != 4 * DIGEST_LEN:
            raise ValueError("chain entry must be 256 bytes")
        return ChainEntry(data[0:64], data[64:128], data[128:192], data[192:256])


@dataclass(frozen=True)
class AttestationReport:
    """Nonce-bound, doubly-signed composition of all execution measurements."""

    platform: PlatformReport
    nonce: bytes
    chain_entries: tuple[ChainEntry, ...]
    signature: bytes

    def signed_message(self) -> bytes:
        out = io.BytesIO()
        platform = self.platform.to_bytes()
        out.write(struct.pack(">I", len(platform)))
        out.write(platform)
        out.write(struct.pack(">I", len(self.nonce)))
        out.write(self.nonce)
        out.write(struct.pack(">I", len(self.chain_entries)))
        for entry in self.chain_entries:
            out.write(entry.to_bytes())
        return out.getvalue()

    def to_bytes(self) -> bytes:
        signed = self.signed_message()
        return signed + struct.pack(">I", len(self.signature)) + self.signature

    @staticmethod
    def from_bytes(data: bytes) -> "AttestationReport":
        pos = 0
        (n,) = struct.unpack_from(">I", data, pos)
        pos += 4
        platform = PlatformReport.from_bytes(data[pos : pos + n])
        pos += n
        (n,) = struct.unpack_from(">I", data, pos)
        pos += 4
        nonce = data[pos : pos + n]
        pos += n
        (count,) = struct.unpack_from(">I", data, pos)
        pos += 4
        entries = []
        for _ in range(count):
            entries.append(ChainEntry.from_bytes(data[pos : pos + 256]))
            pos += 256
        (n,) = struct.unpack_from(">I", data, pos)
        pos += 4
        signature = data[pos : pos + n]
        pos += n
        if pos != len(data):
            raise ValueError("trailing bytes after attestation report")
        return AttestationReport(platform, nonce, tuple(entries), signature)

    def to_json(self) -> str:
        """Debug rendering; the binary form is canonical."""
        return json.dumps({
            "platform": {
                "machine_id": self.platform.machine_id.hex(),
                "monitor_measurement": self.platform.monitor_measurement.hex(),
                "user_data": self.platform.user_data.hex(),
                "signature": self.platform.signature.hex(),
            },
            "nonce": self.nonce.hex(),
            "chain_entries": [
                {
                    "zygote": e.zygote_digest.hex(),
                    "function": e.function_digest.hex(),
                    "input": e.input_digest.hex(),
                    "output": e.output_digest.hex(),
                }
                for e in self.chain_entries
            ],
            "signature": self.signature.hex(),
        }, indent=2, sort_keys=True)


@dataclass
class InvocationMeasurements:
    """Content needed to measure one chain link when building a report."""

    zygote_id: str
    zygote_content: bytes
    function_id: str
    function_content: bytes
    input_bytes: bytes
    output_bytes: bytes


def build_report(cache: MeasurementCache, nonce: bytes,
                 chain: Sequence[InvocationMeasurements],
                 platform: PlatformReport,
                 signer: Optional[SigningKey],
                 model: CostModel,
                 now_us: int = 0) -> tuple[AttestationReport, int]:
    """Compose and sign a report; charge reflects only bytes actually hashed.

    Zygote and function digests come from the cache when present; input and
    output are always hashed fresh.
    """
    if signer is None:
        raise NoPolicyKey("no function private key loaded")
    if not chain:
        raise ValueError("chain must be non-empty")
    if len(nonce) != NONCE_LEN:
        raise ValueError("nonce must be 16 bytes")
    charge = 0
    entries = []
    for link in chain:
        zygote, c = cache.measure(SubjectKind.ZYGOTE, link.zygote_id,
                                  link.zygote_content, model, now_us)
        charge += c
        function, c = cache.measure(SubjectKind.FUNCTION, link.function_id,
                                    link.function_content, model, now_us)
        charge += c
        inp, c = cache.measure_transient(SubjectKind.INPUT, link.input_bytes,
                                         model, now_us)
        charge += c
        out, c = cache.measure_transient(SubjectKind.OUTPUT, link.output_bytes,
                                         model, now_us)
        charge += c
        entries.append(ChainEntry(zygote.digest, function.digest,
                                  inp.digest, out.digest))
    unsigned = AttestationReport(platform, bytes(nonce), tuple(entries), b"")
    signature = signer.sign(unsigned.signed_message())
    report = AttestationReport(platform, bytes(nonce), tuple(entries), signature)
    return report, charge


@dataclass
class VerifyExpectations:
    """Everything an out-of-process verifier holds before checking a report."""

    machine_id: bytes
    vendor_public: bytes
    monitor_digest: bytes
    allowed_zygote_digests: frozenset
    allowed_function_digests: frozenset
    nonce: bytes
    input_digest: bytes
    function_verify_public: bytes


def verify_report(report: AttestationReport,
                  expectations: VerifyExpectations) -> bool:
    """True iff the platform report, nonce, every chain digest, the submitted
    input digest, and the report signature all check out.

    Interior chain links must consume the previous link's output.
    """
    if not asp_verif(report.platform, expectations.machine_id,
                     expectations.monitor_digest, expectations.vendor_public):
        return False
    if report.nonce != expectations.nonce:
        return False
    if not report.chain_entries:
        return False
    for i, entry in enumerate(report.chain_entries):
        if entry.zygote_digest not in expectations.allowed_zygote_digests:
            return False
        if entry.function_digest not in expectations.allowed_function_digests:
            return False
        if i == 0:
            if entry.input_digest != expectations.input_digest:
                return False
        elif entry.input_digest != report.chain_entries[i - 1].output_digest:
            return False
    return verify_signature(expectations.function_verify_public,
                            report.signed_message(), report.signature)
