"""Data-object store tests: attachments, grants, chaining accounting."""

import pytest

from walletemu.crypto import Rng
from walletemu.errors import (
    AlreadyAttached,
    NoInput,
    NoRoute,
    NotWriter,
    QuotaExceeded,
    UnknownObject,
)
from walletemu.guest import GuestBroker
from walletemu.memory import (
    PAGE_SIZE,
    PL1,
    PL2,
    AccessKind,
    CostModel,
    FaultKind,
    FrameStore,
    MemoryPool,
    PageFault,
    PageTable,
)
from walletemu.objects import (
    MONITOR_PID,
    ObjectStore,
    ObjectType,
    fallback_transfer,
)

MIB = 1048576


@pytest.fixture
def env():
    store = FrameStore()
    pool = MemoryPool(store, prevalidated=True)
    pool.grow(65536, validated=True)
    objects = ObjectStore(pool, CostModel())
    writer_table = PageTable(store, 1)
    reader_table = PageTable(store, 2)
    return objects, writer_table, reader_table


class TestCreate:
    def test_small_object_takes_one_page(self, env):
        objects, writer, _ = env
        obj_id, _ = objects.create(1, writer, 8)
        obj = objects.get(obj_id)
        assert len(obj.frames) == 1
        assert obj.writer == 1

    def test_two_page_object(self, env):
        objects, writer, _ = env
        obj_id, _ = objects.create(1, writer, 8192)
        assert len(objects.get(obj_id).frames) == 2

    def test_object_count_quota(self, env):
        objects, writer, _ = env
        objects.quota_objects = 2
        objects.create(1, writer, 8)
        objects.create(1, writer, 8)
        with pytest.raises(QuotaExceeded):
            objects.create(1, writer, 8)

    def test_byte_quota(self, env):
        objects, writer, _ = env
        objects.quota_bytes = 4096
        with pytest.raises(QuotaExceeded):
            objects.create(1, writer, 8192)


class TestAttachments:
    def test_reader_sees_writer_bytes_without_copies(self, env):
        objects, writer, reader = env
        obj_id, _ = objects.create(1, writer, 64)
        objects.write_through(1, writer, obj_id, b"x" * 64)
        copied_before = objects.pool.store.copied_bytes_total
        objects.attach_reader(2, reader, obj_id)
        assert objects.read_through(2, reader, obj_id) == b"x" * 64
        assert objects.pool.store.copied_bytes_total == copied_before

    def test_second_reader_rejected(self, env):
        objects, writer, reader = env
        store = objects.pool.store
        third = PageTable(store, 3)
        obj_id, _ = objects.create(1, writer, 8)
        objects.attach_reader(2, reader, obj_id)
        with pytest.raises(AlreadyAttached):
            objects.attach_reader(3, third, obj_id)

    def test_reader_write_through_grant_faults(self, env):
        objects, writer, reader = env
        obj_id, _ = objects.create(1, writer, 8)
        objects.write_through(1, writer, obj_id, b"payload!")
        obj = objects.attach_reader(2, reader, obj_id)
        fault = reader.access(PL1, obj.reader_vpns[0], AccessKind.WRITE, b"x")
        assert isinstance(fault, PageFault)
        assert fault.kind is FaultKind.PERMISSION_VIOLATION

    def test_reader_attach_downgrades_writer_grant(self, env):
        objects, writer, reader = env
        obj_id, _ = objects.create(1, writer, 8)
        objects.write_through(1, writer, obj_id, b"payload!")
        obj = objects.attach_reader(2, reader, obj_id)
        store = objects.pool.store
        # No frame of the object is PL1-writable anywhere once shared.
        for vpn in obj.writer_vpns:
            entry = writer.lookup(vpn)
            assert PL1 not in entry.perms.write
            assert store.ref(entry.frame_id) == 2

    def test_unknown_object(self, env):
        objects, _, reader = env
        with pytest.raises(UnknownObject):
            objects.attach_reader(2, reader, 999)


class TestInputBinding:
    def test_get_input_idempotent(self, env):
        objects, _, reader = env
        obj_id, _ = objects.create(MONITOR_PID, None, 5, ObjectType.INPUT)
        objects.write_monitor(obj_id, b"hello")
        objects.bind_input(2, obj_id)
        first = objects.get_input(2, reader)
        second = objects.get_input(2, reader)
        assert first == second == (obj_id, 5)

    def test_no_input_outside_invocation(self, env):
        objects, _, reader = env
        with pytest.raises(NoInput):
            objects.get_input(2, reader)


class TestSetOutput:
    def test_writer_sets_own_object(self, env):
        objects, writer, _ = env
        obj_id, _ = objects.create(1, writer, 8)
        objects.set_output(1, obj_id)
        assert objects.get(obj_id).otype is ObjectType.OUTPUT

    def test_non_writer_rejected(self, env):
        objects, writer, _ = env
        obj_id, _ = objects.create(1, writer, 8)
        with pytest.raises(NotWriter):
            objects.set_output(2, obj_id)

    def test_last_set_wins(self, env):
        objects, writer, _ = env
        first, _ = objects.create(1, writer, 8)
        second, _ = objects.create(1, writer, 8)
        objects.set_output(1, first)
        objects.set_output(1, second)
        assert objects.get(second).otype is ObjectType.OUTPUT


class TestFallbackTransfer:
    def test_one_mib_costs_two_copies_two_crypto(self, env):
        objects, writer, _ = env
        payload = bytes(range(256)) * 4096  # 1 MiB
        obj_id, _ = objects.create(1, writer, len(payload))
        objects.write_through(1, writer, obj_id, payload)
        base = objects.counter.snapshot()
        guest = GuestBroker()
        envelope, delivered, charge = fallback_transfer(
            objects, obj_id, objects, Rng(1).bytes(32), guest, Rng(2))
        delta_payload = objects.counter.payload_bytes_copied \
            - base["payload_bytes_copied"]
        assert delta_payload == 2 * MIB
        assert objects.counter.crypto_ops - base["crypto_ops"] == 2
        assert delivered == payload
        assert payload[:64] not in b"".join(guest.tap)

    def test_empty_payload_still_two_crypto_ops(self, env):
        objects, writer, _ = env
        obj_id, _ = objects.create(1, writer, 1)
        base = objects.counter.snapshot()
        _, delivered, _ = fallback_transfer(
            objects, obj_id, objects, Rng(1).bytes(32), GuestBroker(), Rng(2))
        assert objects.counter.crypto_ops - base["crypto_ops"] == 2
        assert delivered == b"\x00"  # one zero page byte, never written

    def test_colocated_flagged(self, env):
        objects, writer, _ = env
        obj_id, _ = objects.create(1, writer, 8)
        objects.write_through(1, writer, obj_id, b"x" * 8)
        fallback_transfer(objects, obj_id, objects, Rng(1).bytes(32),
                          GuestBroker(), Rng(2), colocated=True)
        assert objects.counter.colocated_fallbacks == 1

    def test_no_destination_is_no_route(self, env):
        objects, writer, _ = env
        obj_id, _ = objects.create(1, writer, 8)
        with pytest.raises(NoRoute):
            fallback_transfer(objects, obj_id, None, Rng(1).bytes(32),
                              GuestBroker(), Rng(2))


class TestReclaim:
    def test_object_persists_until_reader_exits(self, env):
        objects, writer, reader = env
        obj_id, _ = objects.create(1, writer, 8)
        objects.write_through(1, writer, obj_id, b"chained!")
        objects.attach_reader(2, reader, obj_id)
        objects.reclaim(1, writer)
        assert obj_id in objects.objects  # reader still attached
        assert objects.read_through(2, reader, obj_id) == b"chained!"
        writer.release_all()
        objects.reclaim(2, reader)
        reader.release_all()
        assert obj_id not in objects.objects

    def test_unattached_objects_freed(self, env):
        objects, writer, _ = env
        obj_id, _ = objects.create(1, writer, 8)
        free_before = objects.pool.free_count
        writer.release_all()
        objects.reclaim(1, writer)
        assert obj_id not in objects.objects
        assert objects.pool.free_count == free_before + 1

    def test_reclaim_idempotent(self, env):
        objects, writer, _ = env
        objects.create(1, writer, 8)
        writer.release_all()
        objects.reclaim(1, writer)
        objects.reclaim(1, writer)
        assert not objects.objects

    def test_designated_reader_keeps_object_alive(self, env):
        objects, writer, reader = env
        obj_id, _ = objects.create(1, writer, 8)
        objects.get(obj_id).designated_reader = 2
        writer.release_all()
        objects.reclaim(1, writer)
        assert obj_id in objects.objects


class TestTwoPartyBound:
    def test_roles_disjoint_and_bounded(self, env):
        objects, writer, reader = env
        obj_id, _ = objects.create(1, writer, 8)
        with pytest.raises(AlreadyAttached):
            objects.attach_reader(1, writer, obj_id)  # writer as reader
        objects.attach_reader(2, reader, obj_id)
        obj = objects.get(obj_id)
        assert obj.attachments() == {1, 2}

    def test_guest_never_mapped(self, env):
        objects, writer, reader = env
        obj_id, _ = objects.create(1, writer, 64)
        objects.write_through(1, writer, obj_id, b"y" * 64)
        obj = objects.attach_reader(2, reader, obj_id)
        for table, vpns in ((writer, obj.writer_vpns),
                            (reader, obj.reader_vpns)):
            for vpn in vpns:
                entry = table.lookup(vpn)
                assert PL2 not in entry.perms.read
                assert PL2 not in entry.perms.write
