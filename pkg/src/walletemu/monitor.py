"""The trusted monitor: process lifecycle, system calls, policy enforcement,
run-to-completion scheduling, and the trap interface.

All state mutation flows through this object's methods (the serialized
command queue of the design); execution is deterministic given identical
call order.  Simulated time is an integer microsecond accumulator charged
through the cost model.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

from . import attestation as att
from .crypto import (
    DhKey,
    FunctionKey,
    Rng,
    seal,
    symmetric_decrypt,
    symmetric_encrypt,
)
from .errors import (
    AlreadyAttached,
    ConfigInvalid,
    DecryptFailed,
    InvocationAborted,
    NoInput,
    NoSession,
    NotCoLocated,
    NotFound,
    PermissionDenied,
    PolicyViolation,
    StaleNonce,
    TrustletBusy,
    UnknownHandle,
    UnknownService,
)
from .guest import GuestBroker
from .images import FunctionSpec, ZygoteImage
from .memory import (
    PAGE_SIZE,
    CostModel,
    FrameStore,
    MemoryPool,
    PagePerms,
    PageTable,
    PrivilegeLevel,
    alloc_frames,
    pages_for,
    preallocate,
)
from .objects import MONITOR_PID, ObjectStore, ObjectType
from .pipeline import Done, Failed, NeedFile, NestedFs, PipelineRun

NONCE_LEN = 16
RESPONSE_KEY_LEN = 32


class ProcKind(str, Enum):
    ZYGOTE = "zygote"
    TRUSTLET = "trustlet"


class ProcState(str, Enum):
    CREATED = "created"
    INITIALIZED = "initialized"
    READY = "ready"
    RUNNING = "running"
    TERMINATED = "terminated"


# created -> initialized -> ready -> running -> (ready | terminated);
# ready -> terminated is additionally needed for cascade deletion.
_TRANSITIONS = {
    ProcState.CREATED: {ProcState.INITIALIZED},
    ProcState.INITIALIZED: {ProcState.READY},
    ProcState.READY: {ProcState.RUNNING, ProcState.TERMINATED},
    ProcState.RUNNING: {ProcState.READY, ProcState.TERMINATED},
    ProcState.TERMINATED: set(),
}


@dataclass
class ProcessDescriptor:
    """Per-process execution state held in monitor-private memory."""

    pid: int
    kind: ProcKind
    page_table: PageTable
    level: PrivilegeLevel = PrivilegeLevel.PL1_PROCESS
    state: ProcState = ProcState.CREATED
    base_zygote: Optional[int] = None
    objects: set = field(default_factory=set)
    measurement: Optional[bytes] = None
    registers: dict = field(default_factory=lambda: {"step_index": 0})
    image: Optional[ZygoteImage] = None
    fn: Optional[FunctionSpec] = None
    fs: Optional[NestedFs] = None
    last_user: Optional[bytes] = None

    def transition(self, new_state: ProcState) -> None:
        if new_state not in _TRANSITIONS[self.state]:
            raise ConfigInvalid(
                f"illegal state transition {self.state.value} -> "
                f"{new_state.value} for process {self.pid}")
        self.state = new_state


@dataclass
class ProviderPolicy:
    """Function-provider policy installed over the secure session."""

    allowed_zygotes: frozenset
    allowed_functions: frozenset
    function_key: FunctionKey
    chains: tuple = ()

    def __post_init__(self) -> None:
        if not self.allowed_zygotes:
            raise PolicyViolation("policy must allow at least one zygote")
        allowed = set(self.allowed_functions)
        for chain in self.chains:
            for digest in chain:
                if digest not in allowed:
                    raise PolicyViolation(
                        "chain references a function outside the policy")

    def chain_adjacent(self, producer_digest: bytes,
                       consumer_digest: bytes) -> bool:
        for chain in self.chains:
            for a, b in zip(chain, chain[1:]):
                if a == producer_digest and b == consumer_digest:
                    return True
        return False

    def to_bytes(self) -> bytes:
        def pack_set(digests: Iterable[bytes]) -> bytes:
            items = sorted(digests)
            return struct.pack(">I", len(items)) + b"".join(items)

        out = [self.function_key.private_bytes(),
               pack_set(self.allowed_zygotes),
               pack_set(self.allowed_functions),
               struct.pack(">I", len(self.chains))]
        for chain in self.chains:
            out.append(struct.pack(">I", len(chain)) + b"".join(chain))
        return b"".join(out)

    @staticmethod
    def from_bytes(data: bytes) -> "ProviderPolicy":
        pos = 64
        key = FunctionKey.from_bytes(data[:64])

        def unpack_set() -> frozenset:
            nonlocal pos
            (n,) = struct.unpack_from(">I", data, pos)
            pos += 4
            items = frozenset(data[pos + 64 * i : pos + 64 * (i + 1)]
                              for i in range(n))
            pos += 64 * n
            return items

        zygotes = unpack_set()
        functions = unpack_set()
        (n_chains,) = struct.unpack_from(">I", data, pos)
        pos += 4
        chains = []
        for _ in range(n_chains):
            (n,) = struct.unpack_from(">I", data, pos)
            pos += 4
            chains.append(tuple(data[pos + 64 * i : pos + 64 * (i + 1)]
                                for i in range(n)))
            pos += 64 * n
        if pos != len(data):
            raise ValueError("trailing bytes after policy")
        return ProviderPolicy(zygotes, functions, key, tuple(chains))


@dataclass
class InvocationRequest:
    """Plaintext of a user request; on the wire it is a sealed box."""

    function_digest: bytes
    input_bytes: bytes
    response_key: bytes
    nonce: bytes

    def to_bytes(self) -> bytes:
        return (self.function_digest + self.nonce + self.response_key
                + struct.pack(">I", len(self.input_bytes)) + self.input_bytes)

    @staticmethod
    def from_bytes(data: bytes) -> "InvocationRequest":
        if len(data) < 64 + NONCE_LEN + RESPONSE_KEY_LEN + 4:
            raise DecryptFailed("request plaintext too short")
        digest = data[:64]
        nonce = data[64 : 64 + NONCE_LEN]
        key = data[80 : 80 + RESPONSE_KEY_LEN]
        (n,) = struct.unpack_from(">I", data, 112)
        payload = data[116 : 116 + n]
        if len(payload) != n:
            raise DecryptFailed("request payload truncated")
        return InvocationRequest(digest, payload, key, nonce)

    @staticmethod
    def encrypt(function_public, function_digest: bytes, input_bytes: bytes,
                response_key: bytes, nonce: bytes, rng: Rng) -> bytes:
        req = InvocationRequest(function_digest, input_bytes, response_key, nonce)
        return seal(function_public.box_public, req.to_bytes(), rng)


@dataclass
class MonitorConfig:
    """Boot-time configuration; its canonical JSON is what gets measured."""

    pool_frames: int = 262144  # 1 GiB of on-demand-validated frames
    prealloc_bytes: int = 0
    cost_model: CostModel = field(default_factory=CostModel)
    cow_enabled: bool = True
    descriptor_clone_us: int = 50
    trustlet_exclusive_bytes: int = 60 * 1024
    chain_capacity_bytes: int = 1048576
    quota_objects: int = 64
    quota_bytes: int = 256 * 1048576
    seed: int = 0

    def canonical_bytes(self) -> bytes:
        doc = {
            "pool_frames": self.pool_frames,
            "prealloc_bytes": self.prealloc_bytes,
            "cost_model": {
                "validation_us_per_page": self.cost_model.validation_us_per_page,
                "hash_mb_per_s": self.cost_model.hash_mb_per_s,
                "cow_copy_us_per_page": self.cost_model.cow_copy_us_per_page,
                "transfer_us_per_mb": self.cost_model.transfer_us_per_mb,
            },
            "cow_enabled": self.cow_enabled,
            "descriptor_clone_us": self.descriptor_clone_us,
            "trustlet_exclusive_bytes": self.trustlet_exclusive_bytes,
        }
        return json.dumps(doc, sort_keys=True).encode("utf-8")

    def validate(self) -> None:
        if self.pool_frames < 0 or self.prealloc_bytes < 0:
            raise ConfigInvalid("pool sizes must be non-negative")
        if self.descriptor_clone_us < 0:
            raise ConfigInvalid("descriptor_clone_us must be non-negative")
        if self.trustlet_exclusive_bytes < 0:
            raise ConfigInvalid("trustlet_exclusive_bytes must be non-negative")


@dataclass
class ZygoteCreation:
    handle: int
    measure_us: int
    alloc_us: int
    populate_us: int
    init_us: int

    @property
    def total_us(self) -> int:
        return self.measure_us + self.alloc_us + self.populate_us + self.init_us


@dataclass
class TrustletCreation:
    handle: int
    clone_us: int
    page_load_us: int
    measure_us: int  # function measurement; cached separately from creation

    @property
    def creation_us(self) -> int:
        """Descriptor clone + function-page load (measurement excluded)."""
        return self.clone_us + self.page_load_us


@dataclass
class InvokeCharges:
    decrypt_us: int = 0
    input_us: int = 0
    exec_us: int = 0
    output_us: int = 0
    report_us: int = 0
    response_us: int = 0

    @property
    def total_us(self) -> int:
        return (self.decrypt_us + self.input_us + self.exec_us
                + self.output_us + self.report_us + self.response_us)

    @property
    def setup_us(self) -> int:
        """Invocation overhead excluding function execution time."""
        return self.total_us - self.exec_us


@dataclass
class InvokeResult:
    handle: int
    descriptor_id: int
    output_ciphertext: Optional[bytes]
    report: Optional[att.AttestationReport]
    charges: InvokeCharges
    recreated: bool = False
    handoff: Optional[int] = None  # consumer handle when chained
    output_obj_id: Optional[int] = None
    bytes_hashed: int = 0


class _Ticket:
    """One submitted invocation moving through the scheduler."""

    def __init__(self, seq: int, handle: int, pid: int,
                 request: InvocationRequest, chain_prefix: list,
                 charges: InvokeCharges):
        self.seq = seq
        self.handle = handle
        self.pid = pid
        self.request = request
        self.chain_prefix = chain_prefix
        self.charges = charges
        self.run: Optional[PipelineRun] = None
        self.input_bytes: bytes = b""
        self.result: Optional[InvokeResult] = None
        self.error: Optional[Exception] = None
        self.recreated = False

    @property
    def finished(self) -> bool:
        return self.result is not None or self.error is not None


class Monitor:
    """Trusted-monitor instance; see class docstring at module top."""

    def __init__(self, config: MonitorConfig,
                 guest: Optional[GuestBroker] = None,
                 machine_key: Optional[att.MachineKey] = None):
        config.validate()
        self.config = config
        self.model = config.cost_model
        self.rng = Rng(config.seed)
        self.guest = guest if guest is not None else GuestBroker()
        self.store = FrameStore()
        self.pool = MemoryPool(self.store)
        self.clock_us = 0
        self.boot_us = 0

        if config.prealloc_bytes > 0:
            # A preallocated pool is the whole pool: mixing in unvalidated
            # frames would break its prevalidation invariant.
            self.boot_us += preallocate(self.pool, config.prealloc_bytes,
                                        self.model)
        elif config.pool_frames > 0:
            self.pool.grow(config.pool_frames, validated=False)
        self.clock_us += self.boot_us

        self.objects = ObjectStore(self.pool, self.model,
                                   quota_objects=config.quota_objects,
                                   quota_bytes=config.quota_bytes)
        self.cache = att.MeasurementCache()
        self.machine_key = machine_key if machine_key is not None \
            else att.MachineKey.generate(self.rng)

        monitor_bytes = config.canonical_bytes()
        measurement, charge = self.cache.measure(
            att.SubjectKind.MONITOR, "monitor", monitor_bytes, self.model)
        self.clock_us += charge
        self.monitor_digest = measurement.digest
        self._monitor_bytes = monitor_bytes
        self.boot_report = att.asp_gen(self.machine_key, self.monitor_digest,
                                       att.sha512(monitor_bytes))

        self.policy: Optional[ProviderPolicy] = None
        self._session_dh: Optional[DhKey] = None
        self._seen_nonces: set = set()

        self._procs: dict[int, ProcessDescriptor] = {}
        self._handles: dict[int, int] = {}  # external handle -> live pid
        self._next_pid = 1
        self._next_handle = 1

        self._ready: list[tuple[int, _Ticket]] = []  # heap by submission seq
        self._pending_io: list[tuple[_Ticket, str]] = []
        self._active: dict[int, _Ticket] = {}  # pid -> in-flight ticket
        self._next_seq = 0
        self._last_output: dict[int, int] = {}  # pid -> newest output obj
        # producer pid -> (consumer pid, chain obj id)
        self._chain_edges: dict[int, tuple[int, int]] = {}
        # consumer pid -> (input obj id, chain measurements, response_key, nonce)
        self._chain_inbox: dict[int, tuple] = {}
        self.edge_crypto_ops = 0
        self.completion_log: list[int] = []

    # -- small helpers ---------------------------------------------------------

    def _charge(self, us: int) -> int:
        self.clock_us += us
        return us

    def _proc(self, handle: int) -> ProcessDescriptor:
        pid = self._handles.get(handle)
        if pid is None:
            raise UnknownHandle(f"no live process for handle {handle}")
        return self._procs[pid]

    def _require_policy(self) -> ProviderPolicy:
        if self.policy is None:
            raise PolicyViolation("no provider policy loaded")
        return self.policy

    def descriptors(self) -> list[ProcessDescriptor]:
        return list(self._procs.values())

    def live_tables(self) -> list[PageTable]:
        return [p.page_table for p in self._procs.values()
                if p.state is not ProcState.TERMINATED]

    # -- attestation handshake ---------------------------------------------------

    def attest_monitor(self) -> att.PlatformReport:
        """Boot-time platform report over the monitor measurement."""
        return self.boot_report

    def handshake_provider(self, provider_nonce: bytes) -> tuple[att.PlatformReport, bytes]:
        """Provider handshake step: nonce-bound report plus our DH public.

        The report's user data is SHA-512(DH public || nonce), binding the
        key exchange to the attested monitor.
        """
        if len(provider_nonce) != NONCE_LEN:
            raise ConfigInvalid("provider nonce must be 16 bytes")
        if provider_nonce in self._seen_nonces:
            raise StaleNonce("provider nonce was already used")
        self._seen_nonces.add(provider_nonce)
        self._session_dh = DhKey.generate(self.rng)
        dh_public = self._session_dh.public_bytes()
        user_data = att.sha512(dh_public + provider_nonce)
        report = att.asp_gen(self.machine_key, self.monitor_digest, user_data)
        self.guest.observe(report.to_bytes())
        self.guest.observe(dh_public)
        return report, dh_public

    def load_policy(self, blob: bytes, provider_dh_public: bytes) -> None:
        """Install the provider policy delivered over the session channel.

        The decrypted function private key lives only in monitor (PL0)
        state; it is never exposed through any trap or mapped page.
        """
        if self._session_dh is None:
            raise NoSession("no attestation handshake in progress")
        self.guest.observe(blob)
        session_key = self._session_dh.session_key(provider_dh_public)
        plaintext = symmetric_decrypt(session_key, blob)
        self.policy = ProviderPolicy.from_bytes(plaintext)
        self._session_dh = None

    # -- zygote lifecycle ----------------------------------------------------------

    def create_zygote(self, image: ZygoteImage) -> ZygoteCreation:
        policy = self._require_policy()
        self.guest.observe(image.canonical_bytes)
        measurement, measure_us = self.cache.measure(
            att.SubjectKind.ZYGOTE, image.uid, image.canonical_bytes, self.model)
        self._charge(measure_us)
        if measurement.digest not in policy.allowed_zygotes:
            raise PolicyViolation("zygote digest is not in the provider policy")

        pid = self._next_pid
        self._next_pid += 1
        table = PageTable(self.store, pid)
        proc = ProcessDescriptor(pid, ProcKind.ZYGOTE, table,
                                 measurement=measurement.digest, image=image)
        content = image.canonical_bytes
        n_pages = pages_for(len(content))
        fids, alloc_us = alloc_frames(self.pool, n_pages, self.model,
                                      owner_level=PrivilegeLevel.PL1_PROCESS)
        self._charge(alloc_us)
        view = memoryview(content)
        for i, fid in enumerate(fids):
            table.map_page(i, fid, PagePerms.process_rw())
            self.store.write_bytes(fid, 0, view[i * PAGE_SIZE : (i + 1) * PAGE_SIZE])
        populate_us = self._charge(self.model.transfer_us(len(content)))

        proc.transition(ProcState.INITIALIZED)
        init_us = self._charge(self._runtime_init(proc))
        table.seal()
        proc.transition(ProcState.READY)

        proc.fs = NestedFs(dict(image.embedded_fs), dict(image.manifest),
                           external_provider=self.guest.read_file)
        proc.objects = self.objects.attached_view(pid)
        self._procs[pid] = proc
        handle = self._next_handle
        self._next_handle += 1
        self._handles[handle] = pid
        return ZygoteCreation(handle, measure_us, alloc_us, populate_us, init_us)

    def _runtime_init(self, proc: ProcessDescriptor) -> int:
        """Simulated runtime preloading; once per zygote, never per trustlet."""
        if proc.state is not ProcState.INITIALIZED:
            raise ConfigInvalid("runtime init requires the initialized state")
        assert proc.image is not None
        return int(proc.image.init_cost_ms * 1000)

    def delete_zygote(self, handle: int) -> int:
        """Terminate the zygote and every trustlet derived from it."""
        proc = self._proc(handle)
        if proc.kind is not ProcKind.ZYGOTE:
            raise UnknownHandle(f"handle {handle} is not a zygote")
        terminated = 0
        for other_handle, pid in list(self._handles.items()):
            child = self._procs.get(pid)
            if child is not None and child.base_zygote == proc.pid:
                self._terminate(other_handle, child)
                terminated += 1
        self._terminate(handle, proc)
        return terminated + 1

    def _terminate(self, handle: int, proc: ProcessDescriptor) -> None:
        ticket = self._active.pop(proc.pid, None)
        if ticket is not None and not ticket.finished:
            ticket.error = InvocationAborted(
                f"process {proc.pid} terminated mid-invocation")
            self._ready = [(s, t) for s, t in self._ready if t is not ticket]
            heapq.heapify(self._ready)
            self._pending_io = [(t, p) for t, p in self._pending_io
                                if t is not ticket]
            self._release_input(proc.pid)  # monitor-staged input of the abort
        self.objects.reclaim(proc.pid, proc.page_table)
        freed = proc.page_table.release_all()
        self.pool.release(freed)
        proc.transition(ProcState.TERMINATED)
        self._handles.pop(handle, None)
        self._last_output.pop(proc.pid, None)
        self._chain_edges.pop(proc.pid, None)
        self._chain_edges = {p: edge for p, edge in self._chain_edges.items()
                             if edge[0] != proc.pid}
        self._chain_inbox.pop(proc.pid, None)

    # -- trustlet lifecycle ----------------------------------------------------------

    def create_trustlet(self, zhandle: int, fn: FunctionSpec) -> TrustletCreation:
        policy = self._require_policy()
        zygote = self._proc(zhandle)
        if zygote.kind is not ProcKind.ZYGOTE:
            raise UnknownHandle(f"handle {zhandle} is not a zygote")
        if zygote.state is not ProcState.READY or not zygote.page_table.sealed:
            raise PolicyViolation("zygote must be sealed and ready")
        measurement, measure_us = self.cache.measure(
            att.SubjectKind.FUNCTION, fn.uid, fn.canonical_bytes, self.model)
        self._charge(measure_us)
        if measurement.digest not in policy.allowed_functions:
            raise PolicyViolation("function digest is not in the provider policy")

        handle = self._next_handle
        self._next_handle += 1
        pid, clone_us, page_load_us = self._spawn_trustlet(
            zygote, fn, measurement.digest)
        self._handles[handle] = pid
        return TrustletCreation(handle, clone_us, page_load_us, measure_us)

    def _spawn_trustlet(self, zygote: ProcessDescriptor, fn: FunctionSpec,
                        fn_digest: bytes) -> tuple[int, int, int]:
        pid = self._next_pid
        self._next_pid += 1
        clone_us = self._charge(self.config.descriptor_clone_us)

        if self.config.cow_enabled:
            table = zygote.page_table.fork_cow(pid)
            zygote_copy_us = 0
        else:
            # Full-copy fallback: duplicate every zygote page eagerly.
            table = PageTable(self.store, pid)
            src_table = zygote.page_table
            n = src_table.n_entries()
            fids, zc_alloc_us = alloc_frames(
                self.pool, n, self.model,
                owner_level=PrivilegeLevel.PL1_PROCESS)
            self._charge(zc_alloc_us)
            for (vpn, entry), fid in zip(sorted(src_table.entries.items()),
                                         fids):
                self.store.copy_frame(entry.frame_id, fid)
                table.map_page(vpn, fid, PagePerms.process_ro())
            zygote_copy_us = self._charge(self.model.copy_us(n)) + zc_alloc_us

        # The trustlet's exclusive region holds the function image plus
        # scratch space; the function never dirties zygote pages for code.
        fn_bytes = fn.canonical_bytes
        fn_pages = pages_for(len(fn_bytes))
        excl_pages = max(pages_for(self.config.trustlet_exclusive_bytes),
                         fn_pages)
        fids, excl_alloc_us = alloc_frames(
            self.pool, excl_pages, self.model,
            owner_level=PrivilegeLevel.PL1_PROCESS)
        self._charge(excl_alloc_us)
        vpns = table.take_vpns(excl_pages)
        fn_view = memoryview(fn_bytes)
        for i, (vpn, fid) in enumerate(zip(vpns, fids)):
            table.map_page(vpn, fid, PagePerms.process_rw())
            if i < fn_pages:
                self.store.write_bytes(
                    fid, 0, fn_view[i * PAGE_SIZE : (i + 1) * PAGE_SIZE])
        setup_us = self._charge(self.model.copy_us(excl_pages))
        load_us = self._charge(self.model.transfer_us(len(fn_bytes)))
        page_load_us = zygote_copy_us + excl_alloc_us + setup_us + load_us

        proc = ProcessDescriptor(pid, ProcKind.TRUSTLET, table,
                                 base_zygote=zygote.pid,
                                 measurement=fn_digest, fn=fn,
                                 fs=zygote.fs, image=zygote.image)
        proc.objects = self.objects.attached_view(pid)
        proc.transition(ProcState.INITIALIZED)
        proc.transition(ProcState.READY)
        self._procs[pid] = proc
        return pid, clone_us, page_load_us

    def delete_trustlet(self, handle: int) -> None:
        proc = self._proc(handle)
        if proc.kind is not ProcKind.TRUSTLET:
            raise UnknownHandle(f"handle {handle} is not a trustlet")
        self._terminate(handle, proc)

    # -- invocation ----------------------------------------------------------------

    def invoke_trustlet(self, handle: int, ciphertext: bytes) -> InvokeResult:
        """Decrypt, run to completion, and return the encrypted result.

        Drives the scheduler until this invocation (and anything it depends
        on) completes.  For chained producers the result is a handoff to the
        consumer instead of a user-facing ciphertext.
        """
        ticket = self.submit_invocation(handle, ciphertext)
        self.run_pending()
        return self._collect(ticket)

    def invoke_chained(self, handle: int) -> InvokeResult:
        """Invoke a trustlet whose input was handed off from a producer."""
        ticket = self.submit_chained(handle)
        self.run_pending()
        return self._collect(ticket)

    def _collect(self, ticket: _Ticket) -> InvokeResult:
        if ticket.error is not None:
            raise ticket.error
        assert ticket.result is not None
        return ticket.result

    def submit_invocation(self, handle: int, ciphertext: bytes) -> _Ticket:
        proc = self._proc(handle)
        if proc.kind is not ProcKind.TRUSTLET:
            raise UnknownHandle(f"handle {handle} is not a trustlet")
        if proc.pid in self._active and not self._active[proc.pid].finished:
            raise TrustletBusy(f"trustlet {handle} is mid-invocation")
        policy = self._require_policy()
        self.guest.observe(ciphertext)

        charges = InvokeCharges()
        try:
            plaintext = policy.function_key.box.decrypt(ciphertext)
        except DecryptFailed:
            raise
        request = InvocationRequest.from_bytes(plaintext)
        charges.decrypt_us = self._charge(self.model.crypto_us(len(ciphertext)))
        self.edge_crypto_ops += 1

        recreated = False
        user = hashlib.sha512(request.response_key).digest()[:16]
        if proc.last_user is not None and proc.last_user != user:
            proc = self._recreate(handle, proc)
            recreated = True
        proc.last_user = user

        obj_id, charge = self.objects.create(MONITOR_PID, None,
                                             max(1, len(request.input_bytes)),
                                             ObjectType.INPUT)
        charges.input_us += self._charge(charge)
        charges.input_us += self._charge(
            self.objects.write_monitor(obj_id, request.input_bytes))
        self.objects.bind_input(proc.pid, obj_id)

        ticket = self._make_ticket(handle, proc, request, [], charges)
        ticket.recreated = recreated
        return ticket

    def invoke_with_input(self, handle: int, input_bytes: bytes,
                          response_key: bytes, nonce: bytes,
                          chain_prefix: Sequence = ()) -> InvokeResult:
        """Run a trustlet on already-delivered plaintext input.

        Used for fallback transfers, where the payload was decrypted and
        staged by the receiving monitor; bypasses request decryption.
        """
        proc = self._proc(handle)
        if proc.kind is not ProcKind.TRUSTLET:
            raise UnknownHandle(f"handle {handle} is not a trustlet")
        if proc.pid in self._active and not self._active[proc.pid].finished:
            raise TrustletBusy(f"trustlet {handle} is mid-invocation")
        self._require_policy()
        charges = InvokeCharges()
        obj_id, charge = self.objects.create(MONITOR_PID, None,
                                             max(1, len(input_bytes)),
                                             ObjectType.INPUT)
        charges.input_us += self._charge(charge)
        charges.input_us += self._charge(
            self.objects.write_monitor(obj_id, input_bytes))
        self.objects.bind_input(proc.pid, obj_id)
        request = InvocationRequest(proc.measurement or b"\x00" * 64,
                                    input_bytes, response_key, nonce)
        ticket = self._make_ticket(handle, proc, request,
                                   list(chain_prefix), charges)
        self.run_pending()
        return self._collect(ticket)

    def submit_chained(self, handle: int) -> _Ticket:
        proc = self._proc(handle)
        if proc.kind is not ProcKind.TRUSTLET:
            raise UnknownHandle(f"handle {handle} is not a trustlet")
        if proc.pid in self._active and not self._active[proc.pid].finished:
            raise TrustletBusy(f"trustlet {handle} is mid-invocation")
        inbox = self._chain_inbox.pop(proc.pid, None)
        if inbox is None:
            raise NoInput(f"no chained input pending for trustlet {handle}")
        obj_id, prefix, response_key, nonce = inbox
        self.objects.bind_input(proc.pid, obj_id)
        request = InvocationRequest(proc.measurement or b"\x00" * 64,
                                    b"", response_key, nonce)
        return self._make_ticket(handle, proc, request, prefix,
                                 InvokeCharges())

    def _recreate(self, handle: int, proc: ProcessDescriptor) -> ProcessDescriptor:
        """Per-user trustlet recreation: fresh descriptor, same handle.

        Resets any residual state from the previous user's invocations.
        """
        assert proc.fn is not None and proc.measurement is not None
        zygote = self._procs[proc.base_zygote]
        fn, digest = proc.fn, proc.measurement
        self._terminate(handle, proc)
        pid, _clone_us, _load_us = self._spawn_trustlet(zygote, fn, digest)
        self._handles[handle] = pid
        return self._procs[pid]

    def _make_ticket(self, handle: int, proc: ProcessDescriptor,
                     request: InvocationRequest, prefix: list,
                     charges: InvokeCharges) -> _Ticket:
        ticket = _Ticket(self._next_seq, handle, proc.pid, request,
                         prefix, charges)
        self._next_seq += 1
        self._active[proc.pid] = ticket
        heapq.heappush(self._ready, (ticket.seq, ticket))
        return ticket

    # -- scheduler ------------------------------------------------------------------

    def schedule(self) -> Optional[int]:
        """Dispatch the oldest ready invocation; run until exit or a trap
        suspension.  Returns the descriptor pid, or None when idle."""
        while self._ready:
            seq, ticket = heapq.heappop(self._ready)
            if ticket.finished:
                continue
            proc = self._procs[ticket.pid]
            if proc.state is ProcState.TERMINATED:
                continue
            self._run_ticket(ticket, proc)
            return proc.pid
        return None

    def run_pending(self) -> None:
        """Drive the scheduler until every submitted invocation settles."""
        while True:
            if self.schedule() is not None:
                continue
            if self._pending_io:
                self._deliver_one_io()
                continue
            break

    def _run_ticket(self, ticket: _Ticket, proc: ProcessDescriptor) -> None:
        if ticket.run is None:
            input_bytes = self._read_input(proc)
            ticket.run = PipelineRun(proc.fn, proc.fs, input_bytes)
            ticket.input_bytes = input_bytes
        proc.transition(ProcState.RUNNING)
        run = ticket.run
        while True:
            outcome = run.step()
            proc.registers["step_index"] = run.step_index
            if outcome is None:
                continue
            if isinstance(outcome, NeedFile):
                proc.transition(ProcState.READY)
                self._pending_io.append((ticket, outcome.path))
                return
            if isinstance(outcome, Failed):
                proc.transition(ProcState.READY)
                ticket.error = outcome.error
                self._active.pop(proc.pid, None)
                self._release_input(proc.pid)
                return
            assert isinstance(outcome, Done)
            self._complete(ticket, proc, outcome.output)
            return

    def _read_input(self, proc: ProcessDescriptor) -> bytes:
        """Runtime prologue: getInputObject + page reads via the grant."""
        obj_id, _length = self.objects.get_input(proc.pid, proc.page_table)
        return self.objects.read_through(proc.pid, proc.page_table, obj_id)

    def _release_input(self, pid: int) -> None:
        """Retire the invocation's consumed input object.

        Plain inputs are monitor-staged and single-use.  A chain object
        persists while read-attached and is retired here too: the reader
        has just exited its run-to-completion execution.
        """
        obj_id = self.objects._current_input.get(pid)
        self.objects.clear_input(pid)
        if obj_id is None:
            return
        obj = self.objects.objects.get(obj_id)
        if obj is None:
            return
        if obj.otype in (ObjectType.INPUT, ObjectType.CHAIN):
            self.objects.retire(obj_id)

    def _retire_previous_output(self, pid: int, new_obj_id: int) -> None:
        """Keep only the most recent output object per trustlet.

        The previous output has been shipped (or fallback-transferred) by
        the time a newer one exists; retiring it keeps long-running warm
        trustlets inside their object quota while the latest output stays
        available for a fallback transfer decision.
        """
        previous = self._last_output.get(pid)
        if previous is not None and previous != new_obj_id:
            obj = self.objects.objects.get(previous)
            if obj is not None and obj.otype is ObjectType.OUTPUT:
                self.objects.retire(previous)
        self._last_output[pid] = new_obj_id

    def _deliver_one_io(self) -> None:
        """Complete one suspended external file read, FIFO."""
        ticket, path = self._pending_io.pop(0)
        if ticket.finished:
            return
        proc = self._procs[ticket.pid]
        raw = self.guest.read_file(path)
        if raw is None:
            ticket.run.fail_file(path, NotFound(f"external file {path} absent"))
        else:
            # Copy the file into trustlet memory before the LibOS sees it.
            n_pages = pages_for(len(raw)) or 1
            fids, alloc_us = alloc_frames(self.pool, n_pages, self.model,
                                          owner_level=PrivilegeLevel.PL1_PROCESS)
            self._charge(alloc_us)
            vpns = proc.page_table.take_vpns(n_pages)
            view = memoryview(bytes(raw))
            for i, (vpn, fid) in enumerate(zip(vpns, fids)):
                proc.page_table.map_page(vpn, fid, PagePerms.process_rw())
                self.store.write_bytes(fid, 0,
                                       view[i * PAGE_SIZE : (i + 1) * PAGE_SIZE])
            ticket.charges.input_us += self._charge(
                self.model.transfer_us(len(raw)))
            ticket.run.deliver_file(path, raw)
        heapq.heappush(self._ready, (ticket.seq, ticket))

    def _complete(self, ticket: _Ticket, proc: ProcessDescriptor,
                  output: bytes) -> None:
        charges = ticket.charges
        charges.exec_us += self._charge(ticket.run.charge_us())

        edge = self._chain_edges.pop(proc.pid, None)
        if edge is not None:
            consumer_pid, obj_id = edge
            self.objects.ensure_capacity(obj_id, len(output))
            charges.output_us += self._charge(self.objects.write_through(
                proc.pid, proc.page_table, obj_id, output))
            self.objects.set_output(proc.pid, obj_id)
            self.objects.seal(obj_id)
            consumer = self._procs[consumer_pid]
            self.objects.attach_reader(consumer_pid, consumer.page_table,
                                       obj_id, writer_table=proc.page_table)
            measurements = ticket.chain_prefix + [self._measurements_for(
                proc, ticket.input_bytes, output)]
            self._chain_inbox[consumer_pid] = (
                obj_id, measurements, ticket.request.response_key,
                ticket.request.nonce)
            consumer_handle = next(h for h, p in self._handles.items()
                                   if p == consumer_pid)
            result = InvokeResult(ticket.handle, proc.pid, None, None,
                                  charges, recreated=ticket.recreated,
                                  handoff=consumer_handle,
                                  output_obj_id=obj_id)
        else:
            obj_id, charge = self.objects.create(
                proc.pid, proc.page_table, max(1, len(output)),
                ObjectType.PLAIN)
            charges.output_us += self._charge(charge)
            charges.output_us += self._charge(self.objects.write_through(
                proc.pid, proc.page_table, obj_id, output))
            self.objects.set_output(proc.pid, obj_id)
            self.objects.seal(obj_id)
            self._retire_previous_output(proc.pid, obj_id)
            # Retrieve the result from the output object, not the run state.
            retrieved = self.objects.read_monitor(obj_id)

            before_hashed = self.cache.bytes_hashed
            measurements = ticket.chain_prefix + [self._measurements_for(
                proc, ticket.input_bytes, retrieved)]
            report, report_us = att.build_report(
                self.cache, ticket.request.nonce, measurements,
                self.boot_report, self._require_policy().function_key.signer,
                self.model, self.clock_us)
            charges.report_us += self._charge(report_us)

            ciphertext = symmetric_encrypt(ticket.request.response_key,
                                           retrieved, self.rng)
            charges.response_us += self._charge(
                self.model.crypto_us(len(retrieved)))
            self.edge_crypto_ops += 1
            self.guest.observe(ciphertext)
            self.guest.observe(report.to_bytes())
            result = InvokeResult(ticket.handle, proc.pid, ciphertext, report,
                                  charges, recreated=ticket.recreated,
                                  output_obj_id=obj_id,
                                  bytes_hashed=self.cache.bytes_hashed - before_hashed)

        proc.transition(ProcState.READY)
        proc.registers["step_index"] = 0
        ticket.result = result
        self._active.pop(proc.pid, None)
        self._release_input(proc.pid)
        self.completion_log.append(proc.pid)

    def _measurements_for(self, proc: ProcessDescriptor, input_bytes: bytes,
                          output: bytes) -> att.InvocationMeasurements:
        zygote = self._procs[proc.base_zygote]
        return att.InvocationMeasurements(
            zygote_id=zygote.image.uid,
            zygote_content=zygote.image.canonical_bytes,
            function_id=proc.fn.uid,
            function_content=proc.fn.canonical_bytes,
            input_bytes=input_bytes,
            output_bytes=output)

    # -- chaining ---------------------------------------------------------------------

    def link_chain(self, producer_handle: int, consumer_handle: int) -> int:
        """Bind producer output to consumer input via a chain object."""
        producer = self._proc(producer_handle)
        consumer = self._proc(consumer_handle)
        for proc in (producer, consumer):
            if proc.kind is not ProcKind.TRUSTLET:
                raise NotCoLocated("chain ends must be co-located trustlets")
        policy = self._require_policy()
        if not policy.chain_adjacent(producer.measurement, consumer.measurement):
            raise PolicyViolation("function pair is not adjacent in any "
                                  "policy chain")
        if producer.pid in self._chain_edges:
            raise AlreadyAttached("producer already has a pending chain link")
        # Cycle detection over the pending chain graph.
        seen = {producer.pid}
        cursor = consumer.pid
        while cursor is not None:
            if cursor in seen:
                raise PolicyViolation("circular chain rejected")
            seen.add(cursor)
            nxt = self._chain_edges.get(cursor)
            cursor = nxt[0] if nxt is not None else None

        obj_id, charge = self.objects.create(
            producer.pid, producer.page_table,
            self.config.chain_capacity_bytes, ObjectType.CHAIN)
        self._charge(charge)
        self.objects.get(obj_id).designated_reader = consumer.pid
        self._chain_edges[producer.pid] = (consumer.pid, obj_id)
        return obj_id

    # -- trap interface ----------------------------------------------------------------

    def trap(self, handle: int, service: str, **args):
        """Trustlet -> monitor service request channel.

        Only the running trustlet may trap; unknown services are rejected
        the way unrecognized trap leaves fall through.
        """
        proc = self._proc(handle)
        if proc.state is not ProcState.RUNNING:
            raise PermissionDenied("only the running trustlet may trap")
        if service == "mem_alloc":
            nbytes = args["nbytes"]
            n_pages = pages_for(nbytes)
            fids, charge = alloc_frames(self.pool, n_pages, self.model,
                                        owner_level=PrivilegeLevel.PL1_PROCESS)
            self._charge(charge)
            vpns = proc.page_table.take_vpns(n_pages)
            for vpn, fid in zip(vpns, fids):
                proc.page_table.map_page(vpn, fid, PagePerms.process_rw())
            return vpns
        if service == "file_read":
            path = args["path"]
            raw = self.guest.read_file(path)
            if raw is None:
                raise NotFound(f"external file {path} absent")
            self._charge(self.model.transfer_us(len(raw)))
            return raw
        if service == "obj_create":
            obj_id, charge = self.objects.create(proc.pid, proc.page_table,
                                                 args["length"])
            self._charge(charge)
            return obj_id
        if service == "obj_get":
            obj = self.objects.attach_reader(proc.pid, proc.page_table,
                                             args["obj_id"])
            return obj.obj_id, obj.length
        if service == "obj_get_input":
            return self.objects.get_input(proc.pid, proc.page_table)
        if service == "obj_set_output":
            self.objects.set_output(proc.pid, args["obj_id"])
            return None
        if service == "exit":
            proc.transition(ProcState.READY)
            return None
        raise UnknownService(f"trap service {service!r} is not implemented")

    def compromise(self) -> dict:
        """Adversarial-harness hook: leak the secrets this agent holds."""
        secrets: dict = {}
        if self.policy is not None:
            secrets["function_private_key"] = \
                self.policy.function_key.private_bytes()
        return secrets

    # -- reports about processes ---------------------------------------------------------

    def attest(self, handle: int, nonce: bytes = b"\x00" * NONCE_LEN) -> att.AttestationReport:
        """Signed report over a trusted process's cached measurements."""
        proc = self._proc(handle)
        policy = self._require_policy()
        empty = att.sha512(b"")
        if proc.kind is ProcKind.ZYGOTE:
            entry = att.ChainEntry(proc.measurement, b"\x00" * 64, empty, empty)
        else:
            zygote = self._procs[proc.base_zygote]
            entry = att.ChainEntry(zygote.measurement, proc.measurement,
                                   empty, empty)
        unsigned = att.AttestationReport(self.boot_report, bytes(nonce),
                                         (entry,), b"")
        signature = policy.function_key.signer.sign(unsigned.signed_message())
        return att.AttestationReport(self.boot_report, bytes(nonce),
                                     (entry,), signature)

    # Wire-API aliases matching the documented monitor system-call names.
    createZygote = create_zygote
    deleteZygote = delete_zygote
    createTrustlet = create_trustlet
    deleteTrustlet = delete_trustlet
    invokeTrustlet = invoke_trustlet
    attestMonitor = attest_monitor
    loadPolicy = load_policy
