import itertools
from collections import deque

import numpy as np
import pytest

from conftest import pattern
from qkeymesh.errors import DigestMismatch, InsufficientMaterial, SequenceGap, UnknownAllocation
from qkeymesh.keypool import AllocationEnd, QuantumKeyPool
from qkeymesh.kms.sealing import KeySelectionInfo
from qkeymesh.kms.sync import PoolSynchronizer, SyncListener
from qkeymesh.wire import DigestMessage, ErrorMessage, PoolEvent


class Link:
    """In-order message pipe between two synchronizers with optional drops"""

    def __init__(self):
        self.queue = deque()
        self.now = 0.0
        self.drop = lambda message: False
        self.compared = []
        self.sides = {}

    def clock(self):
        return self.now

    def sender(self, dst):
        return lambda message: self.queue.append((dst, message))

    def pump(self):
        while self.queue:
            dst, message = self.queue.popleft()
            if self.drop(message):
                continue
            side = self.sides[dst]
            if isinstance(message, PoolEvent):
                try:
                    side.apply_peer_event(message)
                except SequenceGap:
                    pass
            elif isinstance(message, DigestMessage):
                try:
                    self.compared.append(side.handle_digest(message))
                except DigestMismatch:
                    self.compared.append(None)
            elif isinstance(message, ErrorMessage):
                side.handle_error(message)


class Recorder:
    def __init__(self):
        self.lost, self.mirrored, self.keys = [], [], []
        self.purges = 0
        self.refresh_requests = 0

    def listener(self):
        def purged():
            self.purges += 1

        def requested():
            self.refresh_requests += 1

        return SyncListener(
            sessions_lost=self.lost.extend,
            session_mirrored=self.mirrored.append,
            purged=purged,
            refreshed=self.keys.append,
            refresh_requested=requested,
        )


def make_pair(capacity_bytes=1 << 20, working_set_bytes=256, **pool_options):
    link = Link()
    recorders = {"A": Recorder(), "B": Recorder()}
    for local, peer in (("A", "B"), ("B", "A")):
        pool = QuantumKeyPool(7, capacity_bytes, ("A", "B"), working_set_bytes=working_set_bytes, **pool_options)
        link.sides[local] = PoolSynchronizer(pool, local, peer, link.sender(peer), link.clock,
                                             recorders[local].listener())
    return link, link.sides["A"], link.sides["B"], recorders


def deliver(link, chunk_id, data):
    link.sides["A"].deliver_chunk(chunk_id, data)
    link.sides["B"].deliver_chunk(chunk_id, data)
    link.pump()


def grant(side, session_id, end=AllocationEnd.BEGIN, op="confirm"):
    allocation = side.pool.allocate(32, end, session_id)
    getattr(side.pool, op)(allocation)
    side.record_consume(op, allocation.offset_bytes, 32, session_id)
    return allocation


def test_smaller_site_leads():
    _, a, b, _ = make_pair()
    assert a.leader and not b.leader


def test_inject_is_mirrored_in_either_arrival_order():
    link, a, b, _ = make_pair()
    deliver(link, "c1", pattern(300))
    # follower sees the inject event before its own copy of the chunk
    a.deliver_chunk("c2", pattern(300, 1))
    link.pump()
    assert b.pool.material_end == 300
    b.deliver_chunk("c2", pattern(300, 1))
    assert b.pool.material_end == 600
    assert a.pool.digest() == b.pool.digest()


def test_confirm_and_abort_replay_on_the_peer():
    link, a, b, _ = make_pair()
    deliver(link, "c1", pattern(640))
    grant(b, 1, AllocationEnd.END)
    grant(a, 2, op="abort")
    link.pump()
    assert a.pool.digest() == b.pool.digest()
    assert a.pool.read(352, 32) == bytes(32)


def test_resolve_replay_keeps_the_reservation():
    link, a, b, recorders = make_pair()
    deliver(link, "c1", pattern(640))
    allocation = a.pool.allocate(32, AllocationEnd.BEGIN, 5)
    selection = KeySelectionInfo(7, 0, allocation.offset_bytes, 32, 5)
    b.pool.resolve(selection)
    b.record_resolve(selection)
    link.pump()
    assert a.pool.reserved_sessions() == [5]
    assert a.pool.digest() == b.pool.digest()
    b.pool.confirm(b.pool.resolve(selection))
    b.record_consume("confirm", allocation.offset_bytes, 32, 5)
    link.pump()
    assert recorders["A"].mirrored == [5]


def test_overlapping_reservation_is_reported_lost():
    link, a, b, recorders = make_pair()
    deliver(link, "c1", pattern(640))
    mine = b.pool.allocate(32, AllocationEnd.BEGIN, 2)
    grant(a, 1)
    link.pump()
    assert recorders["B"].lost == [2]
    with pytest.raises(UnknownAllocation):
        b.pool.confirm(mine)


def test_overwrite_victims_come_from_the_leader():
    link, a, b, recorders = make_pair(capacity_bytes=256, working_set_bytes=64,
                                      reserved_region_bytes=0, continuous_overwrite=True)
    deliver(link, "c1", pattern(256))
    a.pool.force_consume(64, 92)
    a.record_consume("abort", 64, 92, None)
    link.pump()
    # oversize reservation the leader has not heard of yet
    b.pool.allocate(100, AllocationEnd.END, 7)
    fresh = pattern(120, 3)
    deliver(link, "c2", fresh)
    assert a.pool.last_overwrite_victims == [(156, 28)]
    assert recorders["B"].lost == [7]
    assert b.pool.reserved_sessions() == []
    assert a.pool.digest() == b.pool.digest()
    assert a.pool.read(256, 92) == b.pool.read(256, 92) == fresh[28:]


def test_working_set_advance_follows_the_leader():
    link, a, b, _ = make_pair()
    deliver(link, "c1", pattern(1024))
    for session in range(6):
        grant(b, session + 1)
        link.pump()
    assert a.pool.working_set.offset_bytes == 320
    assert b.pool.working_set.offset_bytes == 320


def test_sequence_gap_triggers_resend():
    link, a, b, _ = make_pair()
    dropped = []

    def drop_first_event(message):
        if isinstance(message, PoolEvent) and not dropped:
            dropped.append(message)
            return True
        return False

    link.drop = drop_first_event
    a.deliver_chunk("c1", pattern(200))
    a.deliver_chunk("c2", pattern(200, 1))
    b.deliver_chunk("c1", pattern(200))
    b.deliver_chunk("c2", pattern(200, 1))
    link.pump()
    assert b.stats.gaps == 1
    assert a.stats.resends >= 1
    assert b.pool.material_end == 400
    assert a.pool.digest() == b.pool.digest()


def test_lost_tail_is_recovered_by_digest_exchange():
    link, a, b, _ = make_pair()
    link.drop = lambda message: isinstance(message, PoolEvent)
    deliver(link, "c1", pattern(200))
    assert b.pool.material_end == 0
    link.drop = lambda message: False
    link.now += 2.0
    a.tick()
    link.pump()
    assert b.pool.material_end == 200
    assert a.pool.digest() == b.pool.digest()
    link.now += 2.0
    a.tick()
    link.pump()
    assert not a.log
    assert b.stats.checkpoints


def test_quiescent_checkpoint_compares_digests():
    link, a, b, _ = make_pair()
    deliver(link, "c1", pattern(640))
    grant(a, 1)
    grant(b, 2, AllocationEnd.END)
    link.pump()
    a.send_digest()
    link.pump()
    assert True in link.compared
    assert b.stats.checkpoints[-1] == (0, a.pool.digest().hex())


def test_no_comparison_while_a_session_is_reserved():
    link, a, b, _ = make_pair()
    deliver(link, "c1", pattern(640))
    b.pool.allocate(32, AllocationEnd.BEGIN, 3)
    a.send_digest()
    link.pump()
    assert True not in link.compared
    assert b.stats.digest_checks == 0


def test_corruption_purges_both_mirrors():
    link, a, b, recorders = make_pair()
    deliver(link, "c1", pattern(640))
    b.pool.inject(pattern(64, 3))  # local change the leader never hears about
    a.send_digest()
    link.pump()
    assert None in link.compared
    assert a.pool.generation == b.pool.generation == 1
    assert a.pool.digest() == b.pool.digest()
    assert recorders["A"].purges == recorders["B"].purges == 1


def test_generation_catch_up_when_the_purge_notice_is_lost():
    link, a, b, _ = make_pair()
    deliver(link, "c1", pattern(640))
    link.drop = lambda message: isinstance(message, PoolEvent) and message.op == "purge_all"
    a.purge("test")
    link.pump()
    assert (a.pool.generation, b.pool.generation) == (1, 0)
    link.drop = lambda message: False
    a.send_digest()
    link.pump()
    assert b.pool.generation == 1
    assert a.pool.digest() == b.pool.digest()


def test_refresh_from_the_reserved_region():
    link, a, b, recorders = make_pair()
    deliver(link, "c1", pattern(640))
    keys = [a.refresh() for _ in range(4)]
    link.pump()
    assert keys[0] == pattern(640)[:32]
    assert recorders["B"].keys == keys == recorders["A"].keys
    with pytest.raises(InsufficientMaterial):
        a.refresh()
    assert a.pool.digest() == b.pool.digest()


def test_follower_refresh_asks_the_leader():
    link, a, b, recorders = make_pair()
    deliver(link, "c1", pattern(640))
    assert b.refresh() is None
    link.pump()
    assert recorders["A"].refresh_requests == 1


def test_content_expiry_purges_both():
    link, a, b, _ = make_pair(max_age_s=5.0)
    deliver(link, "c1", pattern(640))
    link.now = 6.0
    a.tick()
    link.pump()
    assert a.pool.generation == b.pool.generation == 1


def test_missing_chunk_diverges():
    link, a, b, _ = make_pair()
    a.deliver_chunk("c1", pattern(200))
    link.pump()
    assert len(b.queue) == 1
    link.now = 11.0
    b.tick()
    link.pump()
    assert a.pool.generation == b.pool.generation == 1
    assert b.stats.digest_mismatches == 1


def test_grow_replays_on_the_follower():
    link, a, b, _ = make_pair(capacity_bytes=4096)
    a.grow(4096)
    b.grow(4096)  # follower ignores local growth
    link.pump()
    assert a.pool.capacity_bytes == b.pool.capacity_bytes == 8192


def random_session(seed, steps, drop_probability):
    rng = np.random.default_rng(seed)
    link, a, b, _ = make_pair(capacity_bytes=1 << 16)
    link.drop = lambda message: rng.random() < drop_probability
    sessions = itertools.count(1)
    chunks = itertools.count(1)
    for step in range(steps):
        link.now += 0.05
        roll = rng.random()
        if a.pool.available_bytes < 1024 and a.pool.free_bytes >= 512:
            chunk_id = f"c{next(chunks)}"
            data = rng.bytes(512)
            a.deliver_chunk(chunk_id, data)
            b.deliver_chunk(chunk_id, data)
        elif roll < 0.9:
            side = a if rng.random() < 0.5 else b
            end = AllocationEnd.BEGIN if side is a else AllocationEnd.END
            try:
                grant(side, next(sessions), end, "confirm" if rng.random() < 0.8 else "abort")
            except InsufficientMaterial:
                pass
        elif roll < 0.93:
            a.purge("random")
        else:
            try:
                a.refresh()
            except InsufficientMaterial:
                pass
        if step % 20 == 0:
            a.tick()
            b.tick()
        link.pump()

    link.drop = lambda message: False
    for _ in range(30):
        link.now += 1.0
        a.tick()
        b.tick()
        link.pump()
    a.send_digest()
    link.pump()
    return link, a, b


def test_random_in_order_events_keep_mirrors_equal():
    link, a, b = random_session(seed=11, steps=1000, drop_probability=0.0)
    assert None not in link.compared
    assert b.stats.checkpoints
    assert a.stats.digest_mismatches == b.stats.digest_mismatches == 0
    assert a.pool.generation == b.pool.generation
    assert a.pool.digest() == b.pool.digest()


@pytest.mark.slow
@pytest.mark.parametrize("seed", [1, 2, 3])
def test_random_events_with_drops_converge(seed):
    link, a, b = random_session(seed=seed, steps=10_000, drop_probability=0.05)
    assert None not in link.compared
    assert a.pool.generation == b.pool.generation
    assert a.pool.digest() == b.pool.digest()
