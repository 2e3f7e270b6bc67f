# Shared fixtures for the QKeyMesh test suite

import sys
from collections import Counter, deque
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from qkeymesh.keypool import QuantumKeyPool  # noqa: E402


def pattern(length: int, salt: int = 0) -> bytes:
    """Deterministic non-zero-ish test material"""
    return bytes(((i * 7 + salt * 13 + 1) % 251) + 1 for i in range(length))


@pytest.fixture
def make_pool():
    def factory(capacity_bytes=4096, working_set_bytes=256, **kwargs):
        return QuantumKeyPool(1, capacity_bytes, ("A", "B"), working_set_bytes=working_set_bytes, **kwargs)
    return factory


@pytest.fixture
def mirrored_pools(make_pool):
    """Two pool instances fed the same 640 bytes"""
    a, b = make_pool(), make_pool()
    data = pattern(640)
    a.inject(data)
    b.inject(data)
    return a, b


class ReferenceDrr:
    """
    Textbook packet deficit round robin (Shreedhar and Varghese). A flow's
    visit adds its quantum, sends head packets while they fit the deficit,
    and an emptied queue forfeits the deficit. `serve` stops mid-visit when
    the budget runs out and resumes there.
    """

    def __init__(self, quanta):
        self.quanta = dict(quanta)
        self.flows = sorted(self.quanta)
        self.queues = {flow: deque() for flow in self.flows}
        self.deficits = {flow: 0 for flow in self.flows}
        self.served = Counter()
        self.index = 0
        self.fresh = True

    def arrive(self, flow, packet_bits, count):
        self.queues[flow].extend([packet_bits] * count)

    def serve(self, budget_bits):
        while budget_bits > 0 and any(self.queues.values()):
            flow = self.flows[self.index]
            queue = self.queues[flow]
            if queue and self.fresh:
                self.deficits[flow] += self.quanta[flow]
                self.fresh = False
            if queue and queue[0] <= self.deficits[flow]:
                if queue[0] > budget_bits:
                    return
                size = queue.popleft()
                self.deficits[flow] -= size
                self.served[flow] += size
                budget_bits -= size
                continue
            if not queue:
                self.deficits[flow] = 0
            self.index = (self.index + 1) % len(self.flows)
            self.fresh = True
