"""Emulated CVM private memory: frames, privilege-aware page tables, CoW forks.

The emulator models a 4 KiB-paged address space with per-privilege-level
read/write permissions, a prevalidated frame pool, and a cost model that
charges simulated microseconds for page validation, copy-on-write copies,
hashing, and data transfers.  Simulated time is an explicit integer
accumulator; nothing here touches the wall clock, so all timing assertions
are deterministic.

Frame contents are real bytes (lazily materialized zero pages) so that
measurement digests over memory are genuine, while multi-GiB pools stay
cheap to reserve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Iterable, Iterator, Optional

import numpy as np

from .errors import (
    ConfigInvalid,
    DoubleMap,
    NotSealed,
    OutOfHostMemory,
    OutOfMemory,
    PermissionDenied,
)

PAGE_SIZE = 4096


def pages_for(nbytes: int) -> int:
    """Number of 4 KiB pages needed to hold nbytes."""
    return max(0, math.ceil(nbytes / PAGE_SIZE))


class PrivilegeLevel(IntEnum):
    """Intra-CVM privilege tiers; numerically smaller means more privileged."""

    PL0_MONITOR = 0
    PL1_PROCESS = 1
    PL2_GUEST = 2

    def outranks(self, other: "PrivilegeLevel") -> bool:
        return self < other


PL0 = PrivilegeLevel.PL0_MONITOR
PL1 = PrivilegeLevel.PL1_PROCESS
PL2 = PrivilegeLevel.PL2_GUEST


class AccessKind(str, Enum):
    READ = "read"
    WRITE = "write"


class FaultKind(str, Enum):
    NOT_MAPPED = "not_mapped"
    PERMISSION_VIOLATION = "permission_violation"
    COW_FAULT = "cow_fault"


@dataclass(frozen=True)
class PageFault:
    """Typed fault returned (never raised) by PageTable.access."""

    kind: FaultKind
    vpn: int
    level: PrivilegeLevel


@dataclass(frozen=True)
class PagePerms:
    """Per-privilege-level read/write grants for one mapping."""

    read: frozenset
    write: frozenset

    @staticmethod
    def make(read: Iterable[PrivilegeLevel] = (),
             write: Iterable[PrivilegeLevel] = ()) -> "PagePerms":
        return PagePerms(frozenset(read), frozenset(write))

    @staticmethod
    def monitor_private() -> "PagePerms":
        return PagePerms.make(read=[PL0], write=[PL0])

    @staticmethod
    def process_rw() -> "PagePerms":
        return PagePerms.make(read=[PL0, PL1], write=[PL0, PL1])

    @staticmethod
    def process_ro() -> "PagePerms":
        return PagePerms.make(read=[PL0, PL1], write=[PL0])

    @staticmethod
    def process_wo() -> "PagePerms":
        # Write-only object grant: the writer streams data out but cannot
        # read it back through this mapping.
        return PagePerms.make(read=[PL0], write=[PL0, PL1])

    @staticmethod
    def guest_rw() -> "PagePerms":
        return PagePerms.make(read=[PL0, PL2], write=[PL0, PL2])

    def can(self, level: PrivilegeLevel, kind: AccessKind) -> bool:
        grants = self.read if kind is AccessKind.READ else self.write
        return level in grants

    def pl1_accessible(self) -> bool:
        return PL1 in self.read or PL1 in self.write

    def without_pl1_write(self) -> "PagePerms":
        return PagePerms(self.read, self.write - {PL1})


@dataclass
class CostModel:
    """Simulated-time rates; defaults follow the emulated platform profile.

    validation_us_per_page: one-time cost of validating a fresh 4 KiB page.
    hash_mb_per_s: SHA-512 measurement throughput (MiB/s); also used for
        transport crypto charges, which similarly lack acceleration.
    cow_copy_us_per_page: page copy cost (tunable; chosen so descriptor-clone
        dominated trustlet creation lands under the 0.2 ms bound).
    transfer_us_per_mb: cross-level data transfer cost per MiB.
    """

    validation_us_per_page: float = 24.0
    hash_mb_per_s: float = 54.5
    cow_copy_us_per_page: float = 2.0
    transfer_us_per_mb: float = 1089.0

    def __post_init__(self) -> None:
        for name in ("validation_us_per_page", "hash_mb_per_s",
                     "cow_copy_us_per_page", "transfer_us_per_mb"):
            if getattr(self, name) <= 0:
                raise ConfigInvalid(f"{name} must be strictly positive")

    def validation_us(self, pages: int) -> int:
        return int(round(pages * self.validation_us_per_page))

    def copy_us(self, pages: int) -> int:
        return int(round(pages * self.cow_copy_us_per_page))

    def hash_us(self, nbytes: int) -> int:
        return int(round(nbytes / (self.hash_mb_per_s * 1048576) * 1e6))

    def transfer_us(self, nbytes: int) -> int:
        return int(round(nbytes / 1048576 * self.transfer_us_per_mb))

    def crypto_us(self, nbytes: int) -> int:
        return self.hash_us(nbytes)


class Frame:
    """One 4 KiB physical frame. Bytes are materialized on first touch."""

    __slots__ = ("fid", "validated", "owner_level", "_data")

    def __init__(self, fid: int, validated: bool = False,
                 owner_level: Optional[PrivilegeLevel] = None):
        self.fid = fid
        self.validated = validated
        self.owner_level = owner_level
        self._data: Optional[bytearray] = None

    @property
    def data(self) -> bytearray:
        if self._data is None:
            self._data = bytearray(PAGE_SIZE)
        return self._data

    def scrub(self) -> None:
        self._data = None


class FrameStore:
    """Owns all frames, their reference counts, and the global copy counter.

    Reference counts live in a numpy array indexed by frame id so that CoW
    forks of multi-hundred-MiB zygotes stay O(pages) at C speed.  A frame's
    ref_count equals the number of page-table entries (including CoW view
    entries) that map it.
    """

    def __init__(self) -> None:
        self._frames: dict[int, Frame] = {}
        self._ref = np.zeros(1024, dtype=np.int64)
        self._next_fid = 0
        # Ranges of lazily-reserved frame ids created in validated state.
        self._validated_ranges: list[tuple[int, int]] = []
        self.copied_bytes_total = 0

    # -- frame lifecycle --

    def reserve(self, n: int, validated: bool) -> tuple[int, int]:
        """Reserve n fresh frame ids without materializing Frame objects."""
        start = self._next_fid
        self._next_fid += n
        if self._next_fid > len(self._ref):
            new_len = max(self._next_fid, len(self._ref) * 2)
            grown = np.zeros(new_len, dtype=np.int64)
            grown[: len(self._ref)] = self._ref
            self._ref = grown
        if validated and n > 0:
            self._validated_ranges.append((start, start + n))
        return start, start + n

    def _reserved_validated(self, fid: int) -> bool:
        return any(lo <= fid < hi for lo, hi in self._validated_ranges)

    def get(self, fid: int) -> Frame:
        frame = self._frames.get(fid)
        if frame is None:
            if not 0 <= fid < self._next_fid:
                raise KeyError(f"unknown frame {fid}")
            frame = Frame(fid, validated=self._reserved_validated(fid))
            self._frames[fid] = frame
        return frame

    def exists(self, fid: int) -> bool:
        return 0 <= fid < self._next_fid

    # -- reference counting --

    def ref(self, fid: int) -> int:
        return int(self._ref[fid])

    def incref(self, fid: int) -> None:
        self._ref[fid] += 1

    def decref(self, fid: int) -> int:
        self._ref[fid] -= 1
        if self._ref[fid] < 0:
            raise AssertionError(f"ref underflow on frame {fid}")
        return int(self._ref[fid])

    def bulk_incref(self, fids: np.ndarray) -> None:
        # add.at accumulates duplicate ids correctly, unlike fancy indexing.
        np.add.at(self._ref, fids, 1)

    def bulk_decref(self, fids: np.ndarray) -> None:
        np.add.at(self._ref, fids, -1)

    def refs_of(self, fids: np.ndarray) -> np.ndarray:
        return self._ref[fids]

    def total_refs(self) -> int:
        return int(self._ref[: self._next_fid].sum())

    # -- byte access (monitor-side, uncharged) --

    def write_bytes(self, fid: int, offset: int, data: bytes) -> None:
        self.get(fid).data[offset : offset + len(data)] = data

    def read_bytes(self, fid: int) -> bytes:
        return bytes(self.get(fid).data)

    def copy_frame(self, src_fid: int, dst_fid: int) -> None:
        src = self._frames.get(src_fid)
        dst = self.get(dst_fid)
        if src is None or src._data is None:
            dst.scrub()  # source never touched: both are zero pages
        else:
            dst._data = bytearray(src._data)
        self.copied_bytes_total += PAGE_SIZE


@dataclass
class PageEntry:
    frame_id: int
    perms: PagePerms


class PageTable:
    """Per-process virtual address space.

    A table either owns all of its entries, or is a copy-on-write *view*
    over a sealed base table: lookups fall through to the base unless a
    local override exists.  Views let a 147 MiB zygote be forked hundreds
    of times without duplicating page-table entries; frame reference counts
    are still exact.
    """

    def __init__(self, store: FrameStore, owner: int,
                 base: Optional["PageTable"] = None):
        if base is not None and not base.sealed:
            raise NotSealed(f"table of process {base.owner} is not sealed")
        self.store = store
        self.owner = owner
        self.base = base
        self.entries: dict[int, PageEntry] = {}
        self._hidden: set[int] = set()
        self.sealed = False
        self._sealed_fids: Optional[np.ndarray] = None
        self._sealed_pl1_fids: Optional[np.ndarray] = None
        self._next_vpn = base.next_unused_vpn() if base is not None else 0

    # -- lookup helpers --

    def lookup(self, vpn: int) -> Optional[PageEntry]:
        entry = self.entries.get(vpn)
        if entry is not None:
            return entry
        if self.base is not None and vpn not in self._hidden:
            return self.base.entries.get(vpn)
        return None

    def mapped_vpns(self) -> Iterator[int]:
        if self.base is not None:
            for vpn in self.base.entries:
                if vpn not in self._hidden and vpn not in self.entries:
                    yield vpn
        yield from self.entries

    def n_entries(self) -> int:
        return self._n_aliased() + len(self.entries)

    def _n_aliased(self) -> int:
        if self.base is None:
            return 0
        return sum(1 for vpn in self.base.entries
                   if vpn not in self._hidden and vpn not in self.entries)

    def n_aliased(self) -> int:
        """Entries served by the base table rather than local overrides."""
        return self._n_aliased()

    def next_unused_vpn(self) -> int:
        return self._next_vpn

    def take_vpns(self, n: int) -> list[int]:
        """Hand out n fresh virtual page numbers (bump allocation)."""
        vpns = list(range(self._next_vpn, self._next_vpn + n))
        self._next_vpn += n
        return vpns

    def local_frame_ids(self, pl1_only: bool = False) -> np.ndarray:
        if pl1_only:
            it = (e.frame_id for e in self.entries.values()
                  if e.perms.pl1_accessible())
        else:
            it = (e.frame_id for e in self.entries.values())
        return np.fromiter(it, dtype=np.int64)

    def _aliased_frame_ids(self, pl1_only: bool = False) -> np.ndarray:
        assert self.base is not None
        if not self._hidden and not any(vpn in self.base.entries
                                        for vpn in self.entries):
            return self.base.sealed_frame_ids(pl1_only=pl1_only)
        it = (e.frame_id for vpn, e in self.base.entries.items()
              if vpn not in self._hidden and vpn not in self.entries
              and (not pl1_only or e.perms.pl1_accessible()))
        return np.fromiter(it, dtype=np.int64)

    def frame_id_parts(self, pl1_only: bool = False) -> list[np.ndarray]:
        """Arrays jointly covering every mapped frame.

        Forks without local overrides of base pages return the base's
        cached array object, so callers can deduplicate by identity.
        """
        parts = [self.local_frame_ids(pl1_only=pl1_only)]
        if self.base is not None:
            parts.append(self._aliased_frame_ids(pl1_only=pl1_only))
        return parts

    # -- mutation (PL0 only) --

    def map_page(self, vpn: int, frame_id: int, perms: PagePerms,
                 caller: PrivilegeLevel = PL0) -> None:
        """Install a mapping. Only the monitor manages page tables."""
        if caller is not PL0:
            raise PermissionDenied(f"{caller.name} may not map pages")
        if self.sealed:
            raise NotSealed(
                f"table of process {self.owner} is sealed; templates are frozen")
        if not self.store.exists(frame_id):
            raise KeyError(f"unknown frame {frame_id}")
        if self.lookup(vpn) is not None:
            raise DoubleMap(f"vpn {vpn} already mapped in process {self.owner}")
        frame = self.store.get(frame_id)
        grants_pl2 = PL2 in perms.read or PL2 in perms.write
        if grants_pl2 and frame.owner_level in (PL0, PL1):
            raise PermissionDenied(
                f"frame {frame_id} owned at {frame.owner_level.name} cannot "
                "be exposed to the guest")
        self.entries[vpn] = PageEntry(frame_id, perms)
        self.store.incref(frame_id)
        self._next_vpn = max(self._next_vpn, vpn + 1)

    def unmap_page(self, vpn: int, caller: PrivilegeLevel = PL0) -> int:
        """Remove a mapping and return the frame's new reference count."""
        if caller is not PL0:
            raise PermissionDenied(f"{caller.name} may not unmap pages")
        entry = self.entries.pop(vpn, None)
        if entry is None:
            if (self.base is not None and vpn not in self._hidden
                    and vpn in self.base.entries):
                self._hidden.add(vpn)
                return self.store.decref(self.base.entries[vpn].frame_id)
            raise KeyError(f"vpn {vpn} not mapped")
        return self.store.decref(entry.frame_id)

    def set_perms(self, vpn: int, perms: PagePerms,
                  caller: PrivilegeLevel = PL0) -> None:
        if caller is not PL0:
            raise PermissionDenied(f"{caller.name} may not change permissions")
        if self.sealed:
            raise NotSealed(
                f"table of process {self.owner} is sealed; templates are frozen")
        entry = self.entries.get(vpn)
        if entry is not None:
            entry.perms = perms
            return
        base_entry = self.base.entries.get(vpn) if self.base is not None else None
        if base_entry is None or vpn in self._hidden:
            raise KeyError(f"vpn {vpn} not mapped")
        # Materialize a local override so the shared base stays pristine.
        # The frame is already counted for this table via the fork.
        self.entries[vpn] = PageEntry(base_entry.frame_id, perms)

    def seal(self, caller: PrivilegeLevel = PL0) -> None:
        """Strip PL1 write everywhere and freeze the table for forking."""
        if caller is not PL0:
            raise PermissionDenied(f"{caller.name} may not seal")
        for entry in self.entries.values():
            if PL1 in entry.perms.write:
                entry.perms = entry.perms.without_pl1_write()
        self.sealed = True
        self._sealed_fids = self.local_frame_ids()
        self._sealed_pl1_fids = self.local_frame_ids(pl1_only=True)

    def sealed_frame_ids(self, pl1_only: bool = False) -> np.ndarray:
        if self.sealed:
            return self._sealed_pl1_fids if pl1_only else self._sealed_fids
        return self.local_frame_ids(pl1_only=pl1_only)

    # -- access (any level; faults are return values) --

    def access(self, level: PrivilegeLevel, vpn: int, kind: AccessKind,
               data: Optional[bytes] = None, offset: int = 0):
        """Read or write one page.

        Returns page bytes for a successful read, None for a successful
        write, or a PageFault value.  Writes additionally require the frame
        to be exclusively mapped (ref_count == 1); a write to a shared frame
        yields a COW_FAULT for the monitor to resolve.
        """
        kind = AccessKind(kind)
        entry = self.lookup(vpn)
        if entry is None:
            return PageFault(FaultKind.NOT_MAPPED, vpn, level)
        aliased = vpn not in self.entries and self.base is not None
        if not entry.perms.can(level, kind):
            if kind is AccessKind.WRITE and aliased and level is PL1:
                # The page is inherited read-only from the sealed template:
                # the owner's write attempt is a resolvable CoW fault, not a
                # plain permission error.
                return PageFault(FaultKind.COW_FAULT, vpn, level)
            return PageFault(FaultKind.PERMISSION_VIOLATION, vpn, level)
        if kind is AccessKind.READ:
            return self.store.read_bytes(entry.frame_id)
        if self.store.ref(entry.frame_id) > 1:
            return PageFault(FaultKind.COW_FAULT, vpn, level)
        if data is None:
            raise ValueError("write access requires data")
        if offset + len(data) > PAGE_SIZE:
            raise ValueError("write crosses page boundary")
        self.store.write_bytes(entry.frame_id, offset, data)
        return None

    # -- forking --

    def fork_cow(self, new_owner: int) -> "PageTable":
        """Create a CoW alias of this sealed table; zero bytes are copied."""
        if not self.sealed:
            raise NotSealed(f"zygote table of process {self.owner} is not sealed")
        for entry in self.entries.values():
            if PL1 in entry.perms.write:
                raise NotSealed("sealed table retains a PL1-writable entry")
        child = PageTable(self.store, new_owner, base=self)
        self.store.bulk_incref(self.sealed_frame_ids())
        return child

    def resolve_cow(self, vpn: int, pool: "MemoryPool",
                    model: CostModel) -> tuple[int, int]:
        """Break sharing for vpn: copy the page into a fresh exclusive frame.

        Returns (new frame id, simulated charge in microseconds).
        """
        entry = self.lookup(vpn)
        if entry is None:
            raise KeyError(f"vpn {vpn} not mapped")
        if self.store.ref(entry.frame_id) <= 1:
            raise ValueError(f"vpn {vpn} is not shared; nothing to resolve")
        new_fids, charge = alloc_frames(pool, 1, model, owner_level=PL1)
        new_fid = new_fids[0]
        old_fid = entry.frame_id
        self.store.copy_frame(old_fid, new_fid)
        charge += model.copy_us(1)
        self.entries[vpn] = PageEntry(new_fid, PagePerms.process_rw())
        self.store.incref(new_fid)
        self.store.decref(old_fid)
        return new_fid, charge

    def release_all(self) -> list[int]:
        """Unmap everything; returns frame ids whose ref_count reached 0."""
        freed: set[int] = set()
        local = self.local_frame_ids()
        if len(local):
            self.store.bulk_decref(local)
            freed.update(int(f) for f in local[self.store.refs_of(local) == 0])
        if self.base is not None:
            aliased = np.fromiter(
                (e.frame_id for vpn, e in self.base.entries.items()
                 if vpn not in self._hidden and vpn not in self.entries),
                dtype=np.int64)
            if len(aliased):
                self.store.bulk_decref(aliased)
                freed.update(int(f) for f in
                             aliased[self.store.refs_of(aliased) == 0])
            self._hidden = set(self.base.entries)
        self.entries.clear()
        return sorted(freed)


class MemoryPool:
    """Free-frame pool, optionally prevalidated at boot.

    Free frames are tracked as id ranges so a 16 GiB pool costs O(1) host
    memory until frames are actually touched.
    """

    def __init__(self, store: FrameStore, prevalidated: bool = False):
        self.store = store
        self.prevalidated = prevalidated
        self._ranges: list[tuple[int, int]] = []
        self.free_count = 0
        self.clock_charged_us = 0

    def grow(self, n_frames: int, validated: bool) -> None:
        if n_frames <= 0:
            return
        lo, hi = self.store.reserve(n_frames, validated=validated)
        self._ranges.append((lo, hi))
        self.free_count += n_frames

    def take(self, n: int) -> list[int]:
        if n > self.free_count:
            raise OutOfMemory(f"requested {n} frames, {self.free_count} free")
        out: list[int] = []
        while n > 0:
            lo, hi = self._ranges[0]
            grab = min(n, hi - lo)
            out.extend(range(lo, lo + grab))
            if lo + grab == hi:
                self._ranges.pop(0)
            else:
                self._ranges[0] = (lo + grab, hi)
            n -= grab
            self.free_count -= grab
        return out

    def _push_range(self, lo: int, hi: int) -> None:
        self._ranges.append((lo, hi))
        self.free_count += hi - lo

    def release(self, fids: Iterable[int]) -> None:
        fids = sorted(int(f) for f in fids)
        if not fids:
            return
        run_start = prev = fids[0]
        for fid in fids[1:]:
            if fid == prev + 1:
                prev = fid
                continue
            self._push_range(run_start, prev + 1)
            run_start = prev = fid
        self._push_range(run_start, prev + 1)
        for fid in fids:
            frame = self.store._frames.get(fid)
            if frame is not None:
                frame.scrub()
                frame.owner_level = None


def alloc_frames(pool: MemoryPool, n: int, model: CostModel,
                 owner_level: Optional[PrivilegeLevel] = None) -> tuple[list[int], int]:
    """Allocate n frames; returns (frame ids, simulated validation charge).

    A prevalidated pool charges nothing; otherwise every not-yet-validated
    frame is validated now at validation_us_per_page.
    """
    fids = pool.take(n)
    charge = 0
    if not pool.prevalidated:
        unvalidated = 0
        for fid in fids:
            frame = pool.store.get(fid)
            if not frame.validated:
                frame.validated = True
                unvalidated += 1
        charge = model.validation_us(unvalidated)
    if owner_level is not None:
        for fid in fids:
            pool.store.get(fid).owner_level = owner_level
    pool.clock_charged_us += charge
    return fids, charge


def preallocate(pool: MemoryPool, nbytes: int, model: CostModel) -> int:
    """Grow the pool by ceil(nbytes/4096) validated frames at boot.

    Returns the validation charge added to the boot time.  Host memory is
    only consumed when frames are later touched.
    """
    pages = pages_for(nbytes)
    try:
        pool.grow(pages, validated=True)
    except MemoryError as exc:  # pragma: no cover - host-dependent
        raise OutOfHostMemory(str(exc)) from exc
    pool.prevalidated = True
    charge = model.validation_us(pages)
    pool.clock_charged_us += charge
    return charge


@dataclass
class MemoryAccounting:
    shared_bytes: int
    exclusive_bytes: int
    total_resident_bytes: int


def accounting(tables: Iterable[PageTable]) -> MemoryAccounting:
    """Resident-memory split over a set of page tables.

    shared: frames referenced by more than one entry, counted once.
    exclusive: singly-referenced frames granted any PL1 access.
    Base arrays shared between sibling CoW views are deduplicated by object
    identity before the value-level unique pass, keeping the computation
    O(distinct frames) even with hundreds of forks.
    """
    tables = list(tables)
    if not tables:
        return MemoryAccounting(0, 0, 0)
    store = tables[0].store

    def unique_fids(pl1_only: bool) -> np.ndarray:
        parts: dict[int, np.ndarray] = {}
        for table in tables:
            for arr in table.frame_id_parts(pl1_only=pl1_only):
                if len(arr):
                    parts[id(arr)] = arr
        if not parts:
            return np.empty(0, dtype=np.int64)
        return np.unique(np.concatenate(list(parts.values())))

    mapped = unique_fids(pl1_only=False)
    if not len(mapped):
        return MemoryAccounting(0, 0, 0)
    shared = int((store.refs_of(mapped) > 1).sum()) * PAGE_SIZE
    pl1_mapped = unique_fids(pl1_only=True)
    exclusive = 0
    if len(pl1_mapped):
        exclusive = int((store.refs_of(pl1_mapped) == 1).sum()) * PAGE_SIZE
    return MemoryAccounting(shared, exclusive, shared + exclusive)
