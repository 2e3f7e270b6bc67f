import pytest

from qkeymesh.errors import InvariantViolation
from qkeymesh.qnl.mcfp import FlowAssignment
from qkeymesh.qnl.relay import DIRECT, ENDPOINT, DataPlane
from qkeymesh.qnl.routing import TopologyGraph
from qkeymesh.simnet.invariants import (
    GrantLedger,
    RelayAudit,
    check_flow_feasibility,
    check_stream_audit,
)


def test_ledger_accepts_both_ends_of_one_session():
    ledger = GrantLedger()
    ledger("B", 1, 0, 128, 32, session_id=1)
    ledger("A", 1, 0, 128, 32, session_id=1)
    ledger("B", 1, 0, 160, 32, session_id=2)
    ledger("B", 1, 1, 128, 32, session_id=3)
    assert ledger.entries == 4


def test_ledger_rejects_shared_bytes():
    ledger = GrantLedger()
    ledger.record("B", 1, 0, 128, 32, 1)
    with pytest.raises(InvariantViolation, match="share bytes"):
        ledger.record("B", 1, 0, 150, 32, 2)
    with pytest.raises(InvariantViolation, match="session 1"):
        ledger.record("A", 1, 0, 129, 32, 1)


def test_relay_audit():
    audit = RelayAudit()
    audit.record("A", "D", "c1", b"key")
    assert audit.unmatched == 1
    audit.record("D", "A", "c1", b"key")
    assert (audit.matched, audit.unmatched) == (1, 0)
    audit.record("A", "D", "c2", b"key")
    with pytest.raises(InvariantViolation, match="different key bytes"):
        audit.record("D", "A", "c2", b"kez")
    audit.record("A", "D", "c3", b"key")
    with pytest.raises(InvariantViolation, match="twice"):
        audit.record("A", "D", "c3", b"key")


def test_stream_audit_spots_reused_pad_bytes():
    plane = DataPlane("A", lambda *args: None, lambda: 0.0, lambda *args: None)
    plane.add_raw_key("B", bytes(64))
    plane.pools.draw(DIRECT, "B", 16)
    plane.pools.draw(ENDPOINT, "B", 16)
    check_stream_audit([plane])
    plane.pools.drawn[ENDPOINT]["B"].append((8, 4))
    with pytest.raises(InvariantViolation, match="used twice"):
        check_stream_audit([plane])


def test_flow_feasibility():
    topology = TopologyGraph([("A", "B", 10), ("B", "C", 10)])
    column = (("A", "B", "C"),)
    fine = FlowAssignment(lam=1.0, demands={("A", "C"): 10}, column_flows={("A", "C"): {column: 10.0}})
    check_flow_feasibility(fine, topology)
    over = FlowAssignment(lam=1.0, demands={("A", "C"): 30}, column_flows={("A", "C"): {column: 20.0}})
    with pytest.raises(InvariantViolation):
        check_flow_feasibility(over, topology)
