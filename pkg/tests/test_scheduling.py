from collections import Counter

import pytest
from conftest import ReferenceDrr

from qkeymesh.errors import NoActiveCommodities
from qkeymesh.qnl.scheduling import (
    DwrrScheduler,
    FifoQueue,
    LinkScheduler,
    entry_key,
    schedule_dwrr,
    schedule_fifo,
)

LINK = ("A", "B")


def run_shares(weights, total_bits=1_000_000):
    scheduler = DwrrScheduler(LINK, quantum_bits=8192)
    served = Counter()
    while sum(served.values()) < total_bits:
        ticket = schedule_dwrr(scheduler, weights if not served else None)
        served[ticket.commodity] += ticket.amount_bits
    return served


@pytest.mark.parametrize("weights", [
    {("A", "B"): 2, ("A", "C"): 1},
    {("A", "B"): 5, ("A", "C"): 3, ("A", "D"): 1},
])
def test_long_run_shares_follow_weights(weights):
    served = run_shares(weights)
    total = sum(served.values())
    weight_sum = sum(weights.values())
    for commodity, weight in weights.items():
        assert abs(served[commodity] - total * weight / weight_sum) <= 8192


def test_heaviest_entry_gets_a_full_quantum_per_round():
    scheduler = DwrrScheduler(LINK, quantum_bits=8192)
    scheduler.set_weights({("A", "B"): 2, ("A", "C"): 1}, unbounded=True)
    amounts = [(t.commodity, t.amount_bits) for t in (scheduler.next_ticket() for _ in range(4))]
    assert amounts == [(("A", "B"), 8192), (("A", "C"), 4096), (("A", "B"), 8192), (("A", "C"), 4096)]


def test_backlog_bounds_tickets_and_drained_entries_lose_deficit():
    scheduler = DwrrScheduler(LINK, quantum_bits=8192)
    scheduler.set_weights({("A", "B"): 1, ("A", "C"): 1})
    with pytest.raises(NoActiveCommodities):
        scheduler.next_ticket()
    scheduler.accrue(("A", "B"), 10_000)
    assert [scheduler.next_ticket().amount_bits for _ in range(2)] == [8192, 1808]
    assert not scheduler.active()
    assert scheduler.deficits[entry_key(("A", "B"))] == 0
    assert scheduler.deficits[entry_key(("A", "C"))] == 0


def test_requeue_returns_unserved_bits():
    scheduler = DwrrScheduler(LINK, quantum_bits=8192)
    scheduler.set_weights({("A", "B"): 1})
    scheduler.accrue(("A", "B"), 8192)
    ticket = scheduler.next_ticket()
    scheduler.requeue(ticket, 2000)
    assert scheduler.backlog(("A", "B")) == 2000
    assert scheduler.next_ticket().amount_bits == 2000


def test_reweighting_keeps_surviving_state():
    scheduler = DwrrScheduler(LINK, quantum_bits=100)
    scheduler.set_weights({("A", "B"): 1, ("A", "C"): 1})
    scheduler.accrue(("A", "B"), 100)
    scheduler.requeue(scheduler.next_ticket(), 50)
    scheduler.set_weights({("A", "B"): 3})
    assert scheduler.deficits == {entry_key(("A", "B")): 50}
    assert scheduler.backlog(("A", "B")) == 50
    assert scheduler.backlog(("A", "C")) == 0.0


def test_column_entries_are_scheduled_separately():
    scheduler = DwrrScheduler(LINK, quantum_bits=1000)
    column_one = ((("A", "B"),),)
    key_one = (("A", "Z"), (("A", "B", "Z"),))
    key_two = (("A", "Z"), (("A", "C", "Z"),))
    scheduler.set_weights({key_one: 1, key_two: 1}, unbounded=True)
    first, second = scheduler.next_ticket(), scheduler.next_ticket()
    assert {first.column, second.column} == {key_one[1], key_two[1]}
    assert first.commodity == second.commodity == ("A", "Z")
    assert entry_key(("A", "B")) == (("A", "B"), None)
    assert entry_key(column_one) == column_one


def test_fifo_serves_in_arrival_order():
    fifo = FifoQueue(LINK, quantum_bits=8192)
    with pytest.raises(NoActiveCommodities):
        schedule_fifo(fifo)
    fifo.push(("A", "C"), 10_000, deadline=5.0)
    fifo.push(("A", "D"), 100)
    fifo.push(("A", "E"), 0)
    assert len(fifo) == 2
    first = schedule_fifo(fifo)
    assert (first.commodity, first.amount_bits, first.deadline, first.on_demand) == (("A", "C"), 8192, 5.0, True)
    fifo.requeue(first, 1000)
    assert fifo.pending_bits(("A", "C")) == 2808
    assert schedule_fifo(fifo).amount_bits == 2808
    last = schedule_fifo(fifo)
    assert last.commodity == ("A", "D")
    fifo.requeue(last, 40)
    assert fifo.pending_bits(("A", "D")) == 40
    fifo.cancel(("A", "D"))
    assert len(fifo) == 0


def test_link_scheduler_drains_one_time_work_first():
    link = LinkScheduler(LINK, quantum_bits=8192)
    link.dwrr.set_weights({("A", "B"): 1}, unbounded=True)
    link.fifo.push(("A", "D"), 10_000)
    tickets = link.tickets(20_000)
    assert [t.amount_bits for t in tickets] == [8192, 1808, 8192, 1808]
    assert [t.on_demand for t in tickets] == [True, True, False, False]
    assert link.dwrr.deficits[entry_key(("A", "B"))] == 6384


def test_link_scheduler_continuous_first_and_idle():
    link = LinkScheduler(LINK, quantum_bits=8192, on_demand_first=False)
    with pytest.raises(NoActiveCommodities):
        link.next_ticket()
    assert link.tickets(10_000) == []
    link.dwrr.set_weights({("A", "B"): 1}, unbounded=True)
    link.fifo.push(("A", "D"), 100)
    assert not link.next_ticket().on_demand


def test_round_sums_match_weighted_quanta():
    weights = {("A", "B"): 5, ("A", "C"): 3, ("A", "D"): 1}
    quanta = {flow: 8192 * w / 5 for flow, w in weights.items()}
    scheduler = DwrrScheduler(LINK, quantum_bits=8192)
    scheduler.set_weights(weights, unbounded=True)
    served = Counter()
    for completed in range(1, 1001):
        round_ = [scheduler.next_ticket() for _ in weights]
        assert [t.commodity for t in round_] == sorted(weights)
        for ticket in round_:
            served[ticket.commodity] += ticket.amount_bits
        for flow, quantum in quanta.items():
            assert -1e-6 <= completed * quantum - served[flow] < 1 + 1e-6


def test_drained_entry_banks_no_credit():
    scheduler = DwrrScheduler(LINK, quantum_bits=1000)
    scheduler.set_weights({("A", "B"): 1, ("A", "C"): 1})
    scheduler.accrue(("A", "B"), 100_000)
    scheduler.accrue(("A", "C"), 200)
    trace = [(t.commodity, t.amount_bits) for t in (scheduler.next_ticket() for _ in range(4))]
    assert trace == [(("A", "B"), 1000), (("A", "C"), 200), (("A", "B"), 1000), (("A", "B"), 1000)]
    scheduler.accrue(("A", "C"), 5000)
    ticket = scheduler.next_ticket()
    assert (ticket.commodity, ticket.amount_bits) == (("A", "C"), 1000)


def test_intermittent_flows_track_packet_deficit_round_robin():
    flows = [("A", "B"), ("A", "C"), ("A", "D")]
    link = LinkScheduler(LINK, quantum_bits=1200)
    link.dwrr.set_weights({flow: 1 for flow in flows})
    reference = ReferenceDrr({flow: 1200 for flow in flows})
    served = Counter()
    for epoch in range(40):
        for flow in flows:
            if flow != ("A", "D") or epoch % 4 in (0, 1):
                link.dwrr.accrue(flow, 3000)
                reference.arrive(flow, 100, 30)
        for ticket in link.tickets(6000):
            served[ticket.commodity] += ticket.amount_bits
        reference.serve(6000)
        assert sum(served.values()) == sum(reference.served.values()) == 6000 * (epoch + 1)
        for flow in flows:
            assert abs(served[flow] - reference.served[flow]) <= 3600
    # the intermittent flow still got everything it asked for
    assert served[("A", "D")] == reference.served[("A", "D")] == 20 * 3000
