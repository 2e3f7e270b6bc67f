from collections import Counter, deque

import numpy as np
import pytest

from qkeymesh.kms.demand import Continuous, Hybrid, OneTime
from qkeymesh.kms.policy import MultiPath, SinglePath
from qkeymesh.qll import LinkIndication
from qkeymesh.qnl.control import ControlPlane, neighbor_key, solve_shared
from qkeymesh.qnl.mcfp import RouteSpec
from qkeymesh.qnl.routing import TopologyGraph

RING = [("A", "B", 1000.0), ("B", "C", 1000.0), ("C", "D", 1000.0), ("A", "D", 1000.0)]
CHAIN = [("A", "B", 1000.0), ("B", "C", 1000.0)]


class Net:
    """Control planes of a network exchanging sealed frames over one queue"""

    def __init__(self, links=RING, qnl_options=None):
        self.now = 0.0
        self.queue = deque()
        self.executed = []
        self.queued = {}
        neighbors = {}
        for a, b, capacity in links:
            neighbors.setdefault(a, {})[b] = capacity
            neighbors.setdefault(b, {})[a] = capacity
        self.planes = {
            node: ControlPlane(node, nbrs, self.send, self.clock, np.random.default_rng(i),
                               executor=self.execute, qnl_options=qnl_options,
                               transit_backlog=lambda node=node: self.queued.get(node, {}))
            for i, (node, nbrs) in enumerate(sorted(neighbors.items()))
        }
        for plane in self.planes.values():
            plane.originate_lsa()
        self.pump()

    def clock(self):
        return self.now

    def send(self, channel, dst, message):
        assert channel == "conventional"
        self.queue.append((dst, message))

    def execute(self, ticket):
        self.executed.append(ticket)
        return ticket.amount_bits

    def pump(self):
        while self.queue:
            dst, message = self.queue.popleft()
            self.planes[dst].on_message(message)


@pytest.fixture
def net():
    return Net()


def test_link_state_flooding_builds_one_topology(net):
    expected = TopologyGraph(RING)
    for plane in net.planes.values():
        assert plane.topology() == expected
    assert net.planes["A"].routing_table() == {"B": "B", "C": "B", "D": "D"}


def test_kgm_flooding_gives_identical_demand_and_flows(net):
    a = net.planes["A"]
    achieved = a.request_generation("A", "C", Continuous(800.0), SinglePath())
    net.pump()
    assert achieved == pytest.approx(800.0)
    snapshots = {plane.demand_snapshot() for plane in net.planes.values()}
    assert len(snapshots) == 1
    assert {plane.lam for plane in net.planes.values()} == {a.lam}
    assert 0.95 * 2.5 <= a.lam <= 2.5 + 1e-9
    assert [net.planes[n].stats.kgm_received for n in "ABCD"] == [0, 1, 1, 1]


def test_small_rate_changes_are_not_reflooded(net):
    a = net.planes["A"]
    a.request_generation("A", "C", Continuous(800.0), SinglePath())
    a.request_generation("A", "C", Continuous(850.0), SinglePath())
    assert a.stats.kgm_sent == 1
    a.request_generation("A", "C", Continuous(1000.0), SinglePath())
    assert a.stats.kgm_sent == 2


def test_stop_clears_the_demand_everywhere(net):
    a = net.planes["A"]
    a.request_generation("A", "C", Continuous(800.0), SinglePath())
    net.pump()
    assert a.request_generation("A", "C", None, None) == 0.0
    net.pump()
    for plane in net.planes.values():
        assert plane.flood.demand.rates() == {}
        assert plane.lam == 0.0
        assert plane.satisfied_ratio() == 1.0


def test_one_time_request_is_queued_on_the_first_hop(net):
    a = net.planes["A"]
    assert a.request_generation("A", "C", OneTime(16384), SinglePath()) == 16384.0
    net.pump()
    assert a.schedulers[("A", "B")].fifo.pending_bits(("A", "C")) == 16384
    for plane in net.planes.values():
        assert plane.flood.demand.one_time_bits(("A", "C")) == 16384


def test_hybrid_announces_rate_and_reserve(net):
    a = net.planes["A"]
    a.request_generation("A", "C", Hybrid(400.0, 8192), SinglePath())
    net.pump()
    assert net.planes["C"].flood.demand.rates() == {("A", "C"): 400.0}
    assert net.planes["C"].flood.demand.one_time_bits(("A", "C")) == 8192


def test_missed_hellos_take_the_link_down(net):
    a, c, d = net.planes["A"], net.planes["C"], net.planes["D"]
    net.now = 2.0
    for node in "ABC":
        net.planes[node].send_hellos()
    net.pump()
    net.now = 3.5
    assert len(a.check_hellos()) == 1
    net.pump()
    assert not a.neighbors["D"].alive
    assert not c.topology().has_link("A", "D")
    assert c.routing_table()["A"] == "B"
    d.send_hellos()
    net.pump()
    assert a.neighbors["D"].alive
    assert c.topology().has_link("A", "D")


def test_link_indications_change_the_advertised_capacity(net):
    a, c = net.planes["A"], net.planes["C"]
    assert a.detect_link_change(LinkIndication(("A", "B"), "capacity", 400.0)) is not None
    net.pump()
    assert c.topology().capacity("A", "B") == 400.0
    assert a.detect_link_change(LinkIndication(("A", "B"), "capacity", 400.0)) is None
    a.detect_link_change(LinkIndication(("A", "B"), "down", 0.0))
    net.pump()
    assert not c.topology().has_link("A", "B")
    a.detect_link_change(LinkIndication(("A", "B"), "up", 900.0))
    net.pump()
    assert c.topology().capacity("A", "B") == 900.0


def test_tampered_frame_is_dropped(net):
    a, b = net.planes["A"], net.planes["B"]
    a.send_hellos()
    dst, frame = net.queue.popleft()
    assert dst == "B"
    bad = frame.model_copy(update={"mac": ("0" if frame.mac[0] != "0" else "1") + frame.mac[1:]})
    b.on_message(bad)
    assert b.stats.mac_failures == 1
    assert b.neighbors["A"].last_hello == 0.0


def test_multipath_demand_without_disjoint_paths_is_dropped():
    net = Net([("A", "B", 1000.0), ("B", "C", 1000.0)])
    a = net.planes["A"]
    assert a.request_generation("A", "C", Continuous(100.0), MultiPath(2)) == 0.0
    assert a.stats.dropped_commodities >= 1
    assert a.assignment() is None


def test_scheduling_round_serves_the_assigned_rate(net):
    a = net.planes["A"]
    a.request_generation("A", "C", Continuous(800.0), SinglePath())
    served = a.schedule(0.5)
    assert 398 <= served <= 400
    assert net.executed
    for ticket in net.executed:
        assert ticket.commodity == ("A", "C")
        assert ticket.column[0][0] == "A"
        assert ticket.link == ("A", ticket.column[0][1])
    assert a.stats.served_bits == served


def test_one_time_work_is_clipped_to_the_link_budget(net):
    a = net.planes["A"]
    a.request_generation("A", "C", OneTime(16384), SinglePath())
    assert a.schedule(0.5) == 500
    assert net.executed[0].on_demand
    assert a.schedulers[("A", "B")].fifo.pending_bits(("A", "C")) == 16384 - 500


def test_shared_solve_is_memoised():
    topology = TopologyGraph(RING)
    demands = {("A", "C"): 100.0}
    routes = {("A", "C"): RouteSpec()}
    first = solve_shared(topology, demands, {("A", "C"): 1.0}, routes)
    assert solve_shared(TopologyGraph(RING), dict(demands), {("A", "C"): 1.0}, dict(routes)) is first


def test_neighbor_keys_are_symmetric():
    assert neighbor_key(b"m", "A", "B") == neighbor_key(b"m", "B", "A")
    assert neighbor_key(b"m", "A", "B") != neighbor_key(b"m", "A", "C")


def test_relayed_and_local_commodities_share_a_transit_link():
    net = Net(CHAIN)
    net.planes["A"].request_generation("A", "C", Continuous(1200.0), SinglePath())
    net.planes["B"].request_generation("B", "C", Continuous(600.0), SinglePath())
    net.pump()
    b = net.planes["B"]
    assignment = b.assignment().capped()
    relayed, local = assignment.delivered(("A", "C")), assignment.delivered(("B", "C"))
    net.queued["B"] = {(("B", "C"), ("A", "C")): 10 ** 7}
    for _ in range(40):
        b.schedule(0.5)
    served = Counter()
    for ticket in net.executed:
        assert ticket.link == ("B", "C")
        if ticket.commodity == ("A", "C"):
            assert ticket.column is None
        served[ticket.commodity] += ticket.amount_bits
    assert sum(served.values()) == 40 * 500
    assert served[("B", "C")] >= 0.95 * local * 20
    assert served[("A", "C")] >= 0.9 * relayed * 20
    assert 1.6 <= served[("A", "C")] / served[("B", "C")] <= 2.6


def test_queued_relay_without_assigned_rate_still_gets_tickets():
    net = Net(CHAIN)
    net.queued["B"] = {(("B", "C"), ("A", "C")): 800}
    assert net.planes["B"].schedule(0.5) == 500
    assert [(t.link, t.commodity, t.amount_bits) for t in net.executed] == [(("B", "C"), ("A", "C"), 500)]


def test_high_priority_demand_is_reserved_before_the_shared_solve():
    net = Net(CHAIN)
    net.planes["A"].request_generation("A", "C", Continuous(600.0), SinglePath(), priority=3.0)
    net.planes["B"].request_generation("B", "C", Continuous(800.0), SinglePath())
    net.pump()
    for plane in net.planes.values():
        assert plane.achieved_rate(("A", "C")) == pytest.approx(600.0)
        assert plane.achieved_rate(("B", "C")) >= 0.475 * 800
        assert not plane.assignment().violations(TopologyGraph(CHAIN))


def test_below_the_threshold_priority_only_weights_the_solve():
    net = Net(CHAIN, qnl_options={"priority_reservation_threshold": 10.0})
    net.planes["A"].request_generation("A", "C", Continuous(600.0), SinglePath(), priority=3.0)
    net.planes["B"].request_generation("B", "C", Continuous(800.0), SinglePath())
    net.pump()
    assert net.planes["C"].achieved_rate(("B", "C")) < 0.45 * 800
