from collections import deque

import numpy as np
import pytest

from conftest import pattern
from qkeymesh import config
from qkeymesh.errors import (
    InsufficientMaterial,
    InvariantViolation,
    PolicyDenied,
    RemoteUnconfirmed,
    TokenExpired,
    TokenUnknown,
)
from qkeymesh.kms.policy import KeyRequestParams, SecurityClass
from qkeymesh.kms.service import GrantState, KeyManagementService, pool_ids_for
from qkeymesh.wire import KeyNegotiation


class Mesh:
    """Two or more KMSs joined by one in-order message queue"""

    def __init__(self, mode="direct", sites=("A", "B"), capacity_bytes=4096, working_set_bytes=256):
        self.now = 0.0
        self.queue = deque()
        self.drop = lambda message: False
        self.notices = {site: [] for site in sites}
        self.ledger = []
        self.kms = {}
        for index, site in enumerate(sites):
            self.kms[site] = KeyManagementService(
                site, sites, self.queue.append, self.clock,
                streams={name: np.random.default_rng([seed, index])
                         for seed, name in enumerate(("session", "nonce", "classical"))},
                mode=mode,
                pool_options={"capacity_bytes": capacity_bytes, "working_set_bytes": working_set_bytes},
                notify=self.notices[site].append,
                ledger=self._ledger_for(site),
            )

    def clock(self):
        return self.now

    def _ledger_for(self, site):
        return lambda *entry: self.ledger.append((site,) + entry)

    def pump(self):
        while self.queue:
            message = self.queue.popleft()
            if not self.drop(message):
                self.kms[message.dst_site].on_message(message)

    def deliver(self, chunk_id, data, a="A", b="B"):
        self.kms[a].deliver_key_material(b, chunk_id, data)
        self.kms[b].deliver_key_material(a, chunk_id, data)
        self.pump()

    def settle(self, rounds=4):
        for _ in range(rounds):
            self.now += 0.5
            for kms in self.kms.values():
                kms.tick()
            self.pump()

    def kinds(self, site, kind):
        return [notice for notice in self.notices[site] if notice.kind == kind]


def assert_ledger_disjoint(ledger):
    ranges = {}
    for _, _, pool_id, generation, offset, length, session_id in ledger:
        ranges.setdefault(session_id, set()).add((pool_id, generation, offset, length))
    assert all(len(spans) == 1 for spans in ranges.values())
    spans = sorted(next(iter(s)) for s in ranges.values())
    for (p1, g1, o1, l1), (p2, g2, o2, _) in zip(spans, spans[1:]):
        if (p1, g1) == (p2, g2):
            assert o1 + l1 <= o2


@pytest.fixture
def mesh():
    mesh = Mesh()
    mesh.deliver("c1", pattern(640))
    return mesh


def test_pool_ids_cover_every_pair():
    ids = pool_ids_for(["C", "A", "B"])
    assert sorted(ids.values()) == [1, 2, 3]
    assert ids[frozenset(("A", "B"))] == 1


def test_direct_grant_is_confirmed_and_keys_match(mesh):
    a, b = mesh.kms["A"], mesh.kms["B"]
    grant = a.handle_key_request("h1", "h2", "B")
    assert grant.session_key == pattern(640)[128:160]
    assert grant.state is GrantState.PENDING
    with pytest.raises(InvariantViolation):
        a.begin_traffic(grant.session_id)
    mesh.pump()
    assert grant.confirmed
    assert b.remote_sessions[grant.session_id].session_key == grant.session_key
    assert a.begin_traffic(grant.session_id) == b.begin_traffic(grant.session_id)
    assert [n.kind for n in mesh.notices["A"]] == ["confirmed"]
    assert [n.kind for n in mesh.notices["B"]] == ["key_delivered"]
    assert a.pool("B").digest() == b.pool("A").digest()
    assert_ledger_disjoint(mesh.ledger)


def test_follower_allocates_from_the_other_end(mesh):
    grant = mesh.kms["B"].handle_key_request("h2", "h1", "A")
    assert grant.selection.offset_bytes == 352
    mesh.pump()
    assert grant.confirmed
    assert mesh.kms["A"].remote_sessions[grant.session_id].session_key == grant.session_key


def test_tampered_selection_is_rejected(mesh):
    a, b = mesh.kms["A"], mesh.kms["B"]
    grant = a.handle_key_request("h1", "h2", "B")
    message = mesh.queue.popleft()
    assert isinstance(message, KeyNegotiation)
    packet = grant.packet.flip_bit(5)
    b.on_message(message.model_copy(update={"ciphertext": packet.ciphertext.hex(), "mac": packet.mac.hex()}))
    mesh.pump()
    assert b.stats.mac_failures == 1
    assert not b.remote_sessions
    assert grant.state is GrantState.FAILED
    assert [n.detail for n in mesh.kinds("A", "failed")] == ["MAC_INVALID"]
    assert a.pool("B").reserved_sessions() == []


def test_clear_session_id_must_match_the_sealed_one(mesh):
    a, b = mesh.kms["A"], mesh.kms["B"]
    grant = a.handle_key_request("h1", "h2", "B")
    message = mesh.queue.popleft()
    b.on_message(message.model_copy(update={"session_id": grant.session_id + 1}))
    assert b.stats.mac_failures == 1
    assert not b.remote_sessions
    (answer,) = mesh.queue
    assert answer.code == "MAC_INVALID"


def test_refresh_racing_a_negotiation_fails_fast(mesh):
    a, b = mesh.kms["A"], mesh.kms["B"]
    params = KeyRequestParams(security_class=SecurityClass.EXPANDABLE)
    grant = a.handle_key_request("h1", "h2", "B", params)
    stale = mesh.queue.popleft()
    a.refresh_intersite_key("B")
    mesh.pump()
    assert a.intersite_keys["B"] == b.intersite_keys["A"]
    b.on_message(stale)
    mesh.pump()
    assert b.stats.mac_failures == 1
    assert grant.state is GrantState.FAILED
    assert a.stats.timeouts == 0
    assert [n.detail for n in mesh.kinds("A", "failed")] == ["MAC_INVALID"]
    assert a.pool("B").reserved_sessions() == []
    assert a.pool("B").digest() == b.pool("A").digest()


def test_token_mode_reseals_after_a_refresh_race(mesh):
    a, b = mesh.kms["A"], mesh.kms["B"]
    token = a.token_request("h1", "h2", "B")
    stale = mesh.queue.popleft()
    a.refresh_intersite_key("B")
    mesh.pump()
    b.on_message(stale)
    mesh.pump()
    assert a.stats.token_retries == 1
    assert not mesh.kinds("A", "failed")
    grant = a.token_redeem(token)
    assert grant.session_key == b.remote_sessions[grant.session_id].session_key


def test_session_ids_use_the_full_width(mesh):
    a = mesh.kms["A"]
    ids = [a.handle_key_request("h1", "h2", "B").session_id for _ in range(4)]
    assert len(set(ids)) == 4
    assert all(0 < session_id < 2**128 for session_id in ids)
    assert max(ids) >= 2**64


def test_session_state_is_dropped_after_the_key_expires(mesh):
    a, b = mesh.kms["A"], mesh.kms["B"]
    grant = a.handle_key_request("h1", "h2", "B")
    mesh.pump()
    mesh.now = grant.expiry_timestamp
    a.tick()
    b.tick()
    assert a.begin_traffic(grant.session_id) == b.begin_traffic(grant.session_id)
    mesh.now = grant.expiry_timestamp + config.NEGOTIATION_TIMEOUT_S + 1.0
    a.tick()
    b.tick()
    assert grant.session_id not in a.confirmed_keys
    assert not b.remote_sessions
    for kms in (a, b):
        with pytest.raises(InvariantViolation):
            kms.begin_traffic(grant.session_id)


def test_negotiation_timeout_releases_the_reservation(mesh):
    a = mesh.kms["A"]
    mesh.drop = lambda message: isinstance(message, KeyNegotiation)
    grant = a.handle_key_request("h1", "h2", "B")
    mesh.pump()
    assert a.pool("B").reserved_sessions() == [grant.session_id]
    mesh.now = 6.0
    a.tick()
    assert grant.state is GrantState.FAILED
    assert a.stats.timeouts == 1
    assert mesh.kinds("A", "failed")[0].detail == "NEGOTIATION_TIMEOUT"
    assert a.pool("B").reserved_sessions() == []


def test_one_time_pad_consumes_exactly_the_payload(mesh):
    a, b = mesh.kms["A"], mesh.kms["B"]
    before = a.pool("B").held_bytes
    params = KeyRequestParams(security_class=SecurityClass.ONE_TIME_PAD, payload_bytes=100)
    grant = a.handle_key_request("h1", "h2", "B", params)
    mesh.pump()
    assert grant.confirmed
    assert len(grant.session_key) == 100
    assert before - a.pool("B").held_bytes == 100
    assert before - b.pool("A").held_bytes == 100


def test_one_time_pad_without_payload_is_denied(mesh):
    with pytest.raises(PolicyDenied):
        mesh.kms["A"].handle_key_request("h1", "h2", "B", KeyRequestParams(security_class=SecurityClass.ONE_TIME_PAD))


def test_one_time_pad_on_empty_pool_blocks_and_requests_generation():
    mesh = Mesh()
    a = mesh.kms["A"]
    params = KeyRequestParams(security_class=SecurityClass.ONE_TIME_PAD, payload_bytes=100)
    with pytest.raises(InsufficientMaterial):
        a.handle_key_request("h1", "h2", "B", params)
    assert a.stats.blocked == 1
    assert a.achieved_rates["B"] == 800


def test_class_four_blocks_on_empty_pool():
    mesh = Mesh()
    with pytest.raises(InsufficientMaterial):
        mesh.kms["A"].handle_key_request("h1", "h2", "B")
    assert mesh.kms["A"].stats.blocked == 1
    assert not mesh.queue


def test_expandable_class_derives_a_key_on_empty_pool():
    mesh = Mesh()
    a, b = mesh.kms["A"], mesh.kms["B"]
    grant = a.handle_key_request("h1", "h2", "B", KeyRequestParams(security_class=SecurityClass.EXPANDABLE))
    assert grant.fallback == "expanded"
    assert grant.selection.derived
    mesh.pump()
    assert grant.confirmed
    assert b.remote_sessions[grant.session_id].session_key == grant.session_key
    assert a.stats.fallbacks[2] == 1
    assert a.pool("B").held_bytes == b.pool("A").held_bytes == 0


def test_classical_class_never_touches_the_pool(mesh):
    a, b = mesh.kms["A"], mesh.kms["B"]
    digest = a.pool("B").digest()
    grant = a.handle_key_request("h1", "h2", "B", KeyRequestParams(security_class=SecurityClass.CLASSICAL))
    mesh.pump()
    assert grant.confirmed
    assert grant.fallback == "classical"
    assert b.remote_sessions[grant.session_id].session_key == grant.session_key
    assert a.pool("B").digest() == b.pool("A").digest() == digest
    assert a.stats.fallbacks[0] == 1


def test_host_key_is_reused_after_first_grant(mesh):
    a, b = mesh.kms["A"], mesh.kms["B"]
    params = KeyRequestParams(security_class=SecurityClass.HOST_KEY)
    first = a.handle_key_request("h1", "h2", "B", params)
    mesh.pump()
    held = a.pool("B").held_bytes
    second = a.handle_key_request("h1", "h2", "B", params)
    mesh.pump()
    assert second.confirmed
    assert second.fallback == "host_key"
    assert second.session_key == first.session_key
    assert b.remote_sessions[second.session_id].session_key == first.session_key
    assert a.pool("B").held_bytes == held
    assert a.stats.fallbacks[1] == 1


def test_unknown_site_is_denied(mesh):
    with pytest.raises(PolicyDenied):
        mesh.kms["A"].handle_key_request("h1", "h9", "Z")


def test_kms_to_kms_pushes_the_key():
    mesh = Mesh(mode="kms-to-kms")
    mesh.deliver("c1", pattern(640))
    grant = mesh.kms["A"].handle_key_request("h1", "h2", "B")
    assert grant.session_key is not None
    mesh.pump()
    delivered = mesh.kinds("B", "key_delivered")
    assert delivered[0].detail == "kms"
    assert delivered[0].session_key == grant.session_key
    assert delivered[0].host_id == "h2"


def test_token_is_redeemed_after_remote_confirmation(mesh):
    a, b = mesh.kms["A"], mesh.kms["B"]
    token = a.token_request("h1", "h2", "B")
    with pytest.raises(RemoteUnconfirmed):
        a.token_redeem(token)
    mesh.pump()
    assert mesh.kinds("A", "token_ready")
    grant = a.token_redeem(token)
    assert grant.confirmed
    assert grant.session_key == b.remote_sessions[grant.session_id].session_key
    with pytest.raises(TokenUnknown):
        a.token_redeem(token)


def test_token_expires(mesh):
    a = mesh.kms["A"]
    token = a.token_request("h1", "h2", "B")
    mesh.pump()
    mesh.now = 11.0
    with pytest.raises(TokenExpired):
        a.token_redeem(token)
    assert a.pool("B").reserved_sessions() == []


def test_intersite_key_refresh_reaches_both_sites(mesh):
    a, b = mesh.kms["A"], mesh.kms["B"]
    old = a.intersite_keys["B"]
    key = a.refresh_intersite_key("B")
    mesh.pump()
    assert key == pattern(640)[:32]
    assert a.intersite_keys["B"] == b.intersite_keys["A"] == key != old
    assert a.stats.refreshes == b.stats.refreshes == 1
    grant = a.handle_key_request("h1", "h2", "B")
    mesh.pump()
    assert grant.confirmed


def test_follower_refresh_goes_through_the_leader(mesh):
    a, b = mesh.kms["A"], mesh.kms["B"]
    assert b.refresh_intersite_key("A") is None
    mesh.pump()
    assert a.intersite_keys["B"] == b.intersite_keys["A"] == pattern(640)[:32]


def test_full_pool_suspends_generation(mesh):
    a = mesh.kms["A"]
    a.deliver_key_material("B", "big", pattern(4096 - 640))
    assert not a.suspended["B"]
    a.deliver_key_material("B", "overflow", pattern(16))
    assert a.suspended["B"]
    assert a.stats.pool_full == 1


def start_race(mode):
    mesh = Mesh(mode=mode)
    mesh.deliver("c1", pattern(176))
    a, b = mesh.kms["A"], mesh.kms["B"]
    if mode == "token":
        handles = a.token_request("h1", "h2", "B"), b.token_request("h2", "h1", "A")
    else:
        handles = a.handle_key_request("h1", "h2", "B"), b.handle_key_request("h2", "h1", "A")
    first = a.negotiations[handles[0].session_id].grant.selection
    second = b.negotiations[handles[1].session_id].grant.selection
    assert (first.offset_bytes, first.offset_bytes + first.length_bytes) == (128, 160)
    assert (second.offset_bytes, second.offset_bytes + second.length_bytes) == (144, 176)
    return mesh, handles


def test_direct_mode_race_reaches_the_hosts():
    mesh, (grant_a, grant_b) = start_race("direct")
    mesh.pump()
    for site, grant in (("A", grant_a), ("B", grant_b)):
        assert grant.state is GrantState.FAILED
        assert [n.detail for n in mesh.kinds(site, "failed")] == ["RACE_CONFLICT"]
        assert mesh.kms[site].stats.race_conflicts >= 1
    a, b = mesh.kms["A"], mesh.kms["B"]
    assert a.pool("B").digest() == b.pool("A").digest()

    mesh.deliver("c2", pattern(512, 1))
    retry = a.handle_key_request("h1", "h2", "B")
    mesh.pump()
    assert retry.confirmed
    assert b.remote_sessions[retry.session_id].session_key == retry.session_key
    assert_ledger_disjoint(mesh.ledger)


def test_token_mode_race_is_hidden_from_the_hosts():
    mesh, (token_a, token_b) = start_race("token")
    mesh.kms["A"].deliver_key_material("B", "c2", pattern(208, 1))
    mesh.kms["B"].deliver_key_material("A", "c2", pattern(208, 1))
    mesh.pump()
    mesh.settle()
    a, b = mesh.kms["A"], mesh.kms["B"]
    assert not mesh.kinds("A", "failed") and not mesh.kinds("B", "failed")
    assert a.stats.token_retries + b.stats.token_retries > 0
    grant_a = a.token_redeem(token_a)
    grant_b = b.token_redeem(token_b)
    assert grant_a.session_key == b.remote_sessions[grant_a.session_id].session_key
    assert grant_b.session_key == a.remote_sessions[grant_b.session_id].session_key
    assert grant_a.session_key != grant_b.session_key
    assert_ledger_disjoint(mesh.ledger)
    assert a.pool("B").digest() == b.pool("A").digest()
