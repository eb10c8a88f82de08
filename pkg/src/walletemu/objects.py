"""Monitor-owned data objects: the inter-function communication path.

A data object is a run of frames with at most one writer and one reader
attachment.  The writer streams bytes through write-only page mappings
while solely attached; attaching the reader downgrades the writer's
mappings, so no frame is ever PL1-writable while shared.  Chain objects
bind a producer's output directly to a consumer's input with zero payload
copies; when functions are not co-located the copy-and-encrypt fallback
path models the conventional network route.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .crypto import Rng, symmetric_decrypt, symmetric_encrypt
from .errors import (
    AlreadyAttached,
    NoInput,
    NoRoute,
    NotWriter,
    QuotaExceeded,
    UnknownObject,
)
from .guest import GuestBroker
from .memory import (
    PAGE_SIZE,
    AccessKind,
    CostModel,
    MemoryPool,
    PageFault,
    PagePerms,
    PageTable,
    PrivilegeLevel,
    alloc_frames,
    pages_for,
)

MONITOR_PID = 0


class ObjectType(str, Enum):
    PLAIN = "plain"
    INPUT = "input"
    OUTPUT = "output"
    CHAIN = "chain"


@dataclass
class CopyCounter:
    """Payload-path accounting.

    payload_bytes_copied counts bytes written or copied on the object path:
    producers' own writes plus fallback copies.  Monitor-side population of
    the initial request input is charged simulated time but not counted, so
    a co-located k-chain with payload p shows exactly k*|p|.  crypto_ops
    counts only object-path cipher operations; request/response crypto at
    the user edge is tracked separately by the monitor.
    """

    payload_bytes_copied: int = 0
    crypto_ops: int = 0
    fallback_copies: int = 0
    colocated_fallbacks: int = 0

    def snapshot(self) -> dict:
        return {
            "payload_bytes_copied": self.payload_bytes_copied,
            "crypto_ops": self.crypto_ops,
            "fallback_copies": self.fallback_copies,
            "colocated_fallbacks": self.colocated_fallbacks,
        }


@dataclass
class DataObject:
    obj_id: int
    length: int
    otype: ObjectType
    frames: list[int]
    writer: Optional[int] = None
    reader: Optional[int] = None
    sealed: bool = False
    designated_reader: Optional[int] = None
    writer_vpns: list[int] = field(default_factory=list)
    reader_vpns: list[int] = field(default_factory=list)
    writer_table: Optional[PageTable] = None
    reader_table: Optional[PageTable] = None

    def attachments(self) -> set[int]:
        return {pid for pid in (self.writer, self.reader) if pid is not None}


class ObjectStore:
    """All live data objects of one monitor instance."""

    def __init__(self, pool: MemoryPool, model: CostModel,
                 quota_objects: int = 64,
                 quota_bytes: int = 256 * 1048576):
        self.pool = pool
        self.model = model
        self.quota_objects = quota_objects
        self.quota_bytes = quota_bytes
        self.objects: dict[int, DataObject] = {}
        self.counter = CopyCounter()
        self._next_id = 1
        self._owned_counts: dict[int, int] = {}
        self._owned_bytes: dict[int, int] = {}
        self._current_input: dict[int, int] = {}
        self._attached: dict[int, set[int]] = {}

    def attached_view(self, pid: int) -> set[int]:
        """Live set of object ids attached to pid (descriptor's view)."""
        return self._attached.setdefault(pid, set())

    # -- creation ---------------------------------------------------------------

    def create(self, caller_pid: int, caller_table: Optional[PageTable],
               length: int, otype: ObjectType = ObjectType.PLAIN) -> tuple[int, int]:
        """Create an object with the caller attached as writer.

        Grants write-only mappings in the caller's table (monitor callers
        access frames directly at PL0).  Returns (obj_id, charge_us).
        """
        if length <= 0:
            raise ValueError("object length must be positive")
        if caller_pid != MONITOR_PID:
            if self._owned_counts.get(caller_pid, 0) + 1 > self.quota_objects:
                raise QuotaExceeded(
                    f"process {caller_pid} exceeds {self.quota_objects} objects")
            if self._owned_bytes.get(caller_pid, 0) + length > self.quota_bytes:
                raise QuotaExceeded(
                    f"process {caller_pid} exceeds object byte quota")
        pages = pages_for(length)
        fids, charge = alloc_frames(self.pool, pages, self.model,
                                    owner_level=PrivilegeLevel.PL1_PROCESS)
        obj = DataObject(self._next_id, length, otype, fids, writer=caller_pid)
        self._next_id += 1
        if caller_table is not None and caller_pid != MONITOR_PID:
            vpns = caller_table.take_vpns(pages)
            for vpn, fid in zip(vpns, fids):
                caller_table.map_page(vpn, fid, PagePerms.process_wo())
            obj.writer_vpns = vpns
            obj.writer_table = caller_table
        self.objects[obj.obj_id] = obj
        self.attached_view(caller_pid).add(obj.obj_id)
        if caller_pid != MONITOR_PID:
            self._owned_counts[caller_pid] = self._owned_counts.get(caller_pid, 0) + 1
            self._owned_bytes[caller_pid] = self._owned_bytes.get(caller_pid, 0) + length
        return obj.obj_id, charge

    def get(self, obj_id: int) -> DataObject:
        obj = self.objects.get(obj_id)
        if obj is None:
            raise UnknownObject(f"no object {obj_id}")
        return obj

    # -- attachment ---------------------------------------------------------------

    def attach_reader(self, caller_pid: int, caller_table: Optional[PageTable],
                      obj_id: int,
                      writer_table: Optional[PageTable] = None) -> DataObject:
        """Grant the caller read-only mappings; second reader is rejected.

        The writer's write grants (if any) are downgraded to read-only
        first, so shared frames are never PL1-writable.
        """
        obj = self.get(obj_id)
        if obj.reader is not None:
            if obj.reader == caller_pid:
                return obj  # idempotent re-attach
            raise AlreadyAttached(f"object {obj_id} already has a reader")
        if obj.writer == caller_pid:
            raise AlreadyAttached(
                f"process {caller_pid} already attached as writer")
        writer_table = writer_table or obj.writer_table
        if obj.writer_vpns and writer_table is not None:
            for vpn in obj.writer_vpns:
                entry = writer_table.lookup(vpn)
                if entry is not None:
                    writer_table.set_perms(vpn, PagePerms.process_ro())
        obj.reader = caller_pid
        self.attached_view(caller_pid).add(obj.obj_id)
        if caller_table is not None and caller_pid != MONITOR_PID:
            vpns = caller_table.take_vpns(len(obj.frames))
            for vpn, fid in zip(vpns, obj.frames):
                caller_table.map_page(vpn, fid, PagePerms.process_ro())
            obj.reader_vpns = vpns
            obj.reader_table = caller_table
        return obj

    def ensure_capacity(self, obj_id: int, length: int) -> int:
        """Grow an object (and the writer's grants) to hold length bytes."""
        obj = self.get(obj_id)
        needed = pages_for(max(1, length)) - len(obj.frames)
        if needed <= 0:
            return 0
        fids, charge = alloc_frames(self.pool, needed, self.model,
                                    owner_level=PrivilegeLevel.PL1_PROCESS)
        if obj.writer_table is not None and obj.writer_vpns:
            vpns = obj.writer_table.take_vpns(needed)
            for vpn, fid in zip(vpns, fids):
                obj.writer_table.map_page(vpn, fid, PagePerms.process_wo())
            obj.writer_vpns.extend(vpns)
        obj.frames.extend(fids)
        return charge

    def bind_input(self, pid: int, obj_id: int) -> None:
        """Designate obj_id as pid's current invocation input."""
        self._current_input[pid] = obj_id

    def clear_input(self, pid: int) -> None:
        self._current_input.pop(pid, None)

    def get_input(self, caller_pid: int,
                  caller_table: Optional[PageTable]) -> tuple[int, int]:
        """Input object for the running invocation, with a read grant.

        Idempotent: repeated calls return the same object id.
        """
        obj_id = self._current_input.get(caller_pid)
        if obj_id is None:
            raise NoInput(f"no input object bound for process {caller_pid}")
        obj = self.get(obj_id)
        if obj.reader != caller_pid:
            self.attach_reader(caller_pid, caller_table, obj_id)
        return obj_id, obj.length

    def set_output(self, caller_pid: int, obj_id: int) -> None:
        """Mark the caller's object as its invocation output (last set wins)."""
        obj = self.get(obj_id)
        if obj.writer != caller_pid:
            raise NotWriter(
                f"process {caller_pid} is not the writer of object {obj_id}")
        if obj.otype is not ObjectType.CHAIN:
            obj.otype = ObjectType.OUTPUT

    def seal(self, obj_id: int) -> None:
        self.get(obj_id).sealed = True

    # -- data movement -------------------------------------------------------------

    def write_through(self, caller_pid: int, caller_table: PageTable,
                      obj_id: int, data: bytes) -> int:
        """Writer streams bytes through its PL1 mappings; returns charge_us.

        Counts toward payload_bytes_copied (a producer's own write).
        """
        obj = self.get(obj_id)
        if obj.writer != caller_pid:
            raise NotWriter(
                f"process {caller_pid} is not the writer of object {obj_id}")
        if len(data) > len(obj.frames) * PAGE_SIZE:
            raise ValueError("data exceeds object capacity")
        for i in range(0, len(data), PAGE_SIZE):
            vpn = obj.writer_vpns[i // PAGE_SIZE]
            chunk = data[i : i + PAGE_SIZE]
            result = caller_table.access(PrivilegeLevel.PL1_PROCESS, vpn,
                                         AccessKind.WRITE, chunk)
            if isinstance(result, PageFault):
                raise PermissionError(
                    f"object write faulted: {result.kind.value}")
        obj.length = len(data)
        self.counter.payload_bytes_copied += len(data)
        return self.model.transfer_us(len(data))

    def read_through(self, caller_pid: int, caller_table: PageTable,
                     obj_id: int) -> bytes:
        """Reader pulls bytes through its PL1 read-only mappings."""
        obj = self.get(obj_id)
        if obj.reader != caller_pid:
            raise UnknownObject(
                f"process {caller_pid} has no read grant on object {obj_id}")
        out = bytearray()
        for i, vpn in enumerate(obj.reader_vpns):
            result = caller_table.access(PrivilegeLevel.PL1_PROCESS, vpn,
                                         AccessKind.READ)
            if isinstance(result, PageFault):
                raise PermissionError(
                    f"object read faulted: {result.kind.value}")
            out.extend(result)
        return bytes(out[: obj.length])

    def write_monitor(self, obj_id: int, data: bytes) -> int:
        """Monitor (PL0) populates an object directly; charged, not counted."""
        obj = self.get(obj_id)
        if len(data) > len(obj.frames) * PAGE_SIZE:
            raise ValueError("data exceeds object capacity")
        store = self.pool.store
        for i in range(0, len(data), PAGE_SIZE):
            store.write_bytes(obj.frames[i // PAGE_SIZE], 0,
                              data[i : i + PAGE_SIZE])
        obj.length = len(data)
        return self.model.transfer_us(len(data))

    def read_monitor(self, obj_id: int) -> bytes:
        """Monitor (PL0) reads an object's content directly."""
        obj = self.get(obj_id)
        store = self.pool.store
        out = bytearray()
        for fid in obj.frames:
            out.extend(store.read_bytes(fid))
        return bytes(out[: obj.length])

    # -- lifecycle -------------------------------------------------------------------

    def detach(self, pid: int, obj: DataObject) -> None:
        self._attached.get(pid, set()).discard(obj.obj_id)
        if obj.writer == pid:
            obj.writer = None
            obj.writer_vpns = []
            obj.writer_table = None
        if obj.reader == pid:
            obj.reader = None
            obj.reader_vpns = []
            obj.reader_table = None
        if obj.designated_reader == pid:
            obj.designated_reader = None

    def retire(self, obj_id: int) -> None:
        """Fully release one object: unmap grants, drop attachments, free
        frames.  Used for consumed inputs and superseded outputs; chain
        objects instead live until their reader exits (see reclaim)."""
        obj = self.objects.get(obj_id)
        if obj is None:
            return
        if obj.writer is not None and obj.writer != MONITOR_PID:
            self._owned_counts[obj.writer] = max(
                0, self._owned_counts.get(obj.writer, 0) - 1)
            self._owned_bytes[obj.writer] = max(
                0, self._owned_bytes.get(obj.writer, 0) - obj.length)
        for table, vpns in ((obj.writer_table, obj.writer_vpns),
                            (obj.reader_table, obj.reader_vpns)):
            if table is None:
                continue
            for vpn in vpns:
                if table.lookup(vpn) is not None:
                    table.unmap_page(vpn)
        for pid in list(obj.attachments()):
            self._attached.get(pid, set()).discard(obj.obj_id)
        obj.writer = obj.reader = obj.designated_reader = None
        obj.writer_vpns = []
        obj.reader_vpns = []
        obj.writer_table = obj.reader_table = None
        self._release_object(obj)

    def reclaim(self, pid: int, table: Optional[PageTable] = None) -> list[int]:
        """Drop pid's attachments; release objects nobody can still reach.

        Chain objects with a surviving (or designated) reader persist until
        that reader exits.  Idempotent.  Returns released object ids.
        """
        released = []
        for obj in list(self.objects.values()):
            was_writer = obj.writer == pid
            self.detach(pid, obj)
            if was_writer:
                self._owned_counts[pid] = max(0, self._owned_counts.get(pid, 0) - 1)
                self._owned_bytes[pid] = max(0, self._owned_bytes.get(pid, 0) - obj.length)
            if not obj.attachments() and obj.designated_reader is None:
                self._release_object(obj)
                released.append(obj.obj_id)
        self._current_input.pop(pid, None)
        return released

    def _release_object(self, obj: DataObject) -> None:
        # Table mappings of detached parties are torn down with their
        # descriptors; here only monitor-held frames remain to release.
        store = self.pool.store
        free = [fid for fid in obj.frames if store.ref(fid) == 0]
        self.pool.release(free)
        del self.objects[obj.obj_id]

    def release_orphan_frames(self, obj_id: int) -> None:
        obj = self.objects.get(obj_id)
        if obj is not None and not obj.attachments():
            self._release_object(obj)

    def dump(self) -> list[dict]:
        """Debug view of the live object table (JSON-serializable)."""
        return [
            {
                "obj_id": obj.obj_id,
                "otype": obj.otype.value,
                "length": obj.length,
                "pages": len(obj.frames),
                "writer": obj.writer,
                "reader": obj.reader,
                "designated_reader": obj.designated_reader,
                "sealed": obj.sealed,
            }
            for obj_id, obj in sorted(self.objects.items())
        ]


def fallback_transfer(src: ObjectStore, obj_id: int,
                      dst: Optional[ObjectStore], transport_key: bytes,
                      guest: GuestBroker, rng: Rng,
                      colocated: bool = False) -> tuple[bytes, bytes, int]:
    """Ship an output object over the conventional encrypted network path.

    The payload is encrypted (1 crypto op), copied to the guest (1 copy),
    decrypted at the destination monitor (1 crypto op), and copied into the
    destination's input staging (1 copy).  Returns (ciphertext envelope,
    delivered plaintext, charge_us).
    """
    if dst is None:
        raise NoRoute("no destination monitor for fallback transfer")
    payload = src.read_monitor(obj_id)
    envelope = symmetric_encrypt(transport_key, payload, rng)
    src.counter.crypto_ops += 1
    guest.observe(envelope)
    src.counter.payload_bytes_copied += len(payload)
    src.counter.fallback_copies += 1
    if colocated:
        src.counter.colocated_fallbacks += 1
    delivered = symmetric_decrypt(transport_key, envelope)
    dst.counter.crypto_ops += 1
    dst.counter.payload_bytes_copied += len(delivered)
    dst.counter.fallback_copies += 1
    charge = 2 * src.model.crypto_us(len(payload)) + 2 * src.model.transfer_us(len(payload))
    return envelope, delivered, charge
