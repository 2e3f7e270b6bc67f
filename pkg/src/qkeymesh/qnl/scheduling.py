# Per-link work ticket scheduling

"""
Scheduling Module for QKeyMesh
Turns assigned commodity rates into per-link work tickets: deficit-weighted
round-robin for continuous demand, FIFO for one-time requests
"""

import logging
from collections import deque
from dataclasses import dataclass, replace
from typing import Deque, Dict, Hashable, List, Mapping, Optional, Tuple

from .. import config
from ..errors import NoActiveCommodities

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class WorkTicket:
    """Permission to move `amount_bits` of one commodity over one link"""
    link: Tuple[str, str]
    commodity: Tuple[str, str]
    amount_bits: int
    deadline: Optional[float] = None
    column: Optional[tuple] = None  # paths the bits take
    on_demand: bool = False

    @property
    def key(self) -> Hashable:
        return (self.commodity, self.column)


def entry_key(key) -> Tuple[tuple, Optional[tuple]]:
    """DWRR entries are (commodity, column); a bare commodity means any path"""
    if isinstance(key[0], str):
        return (tuple(key), None)
    return key


class DwrrScheduler:
    """
    Deficit-weighted round-robin over the entries of one link.

    Each visit to an entry with backlog adds quantum x weight / max weight to
    its deficit and emits a ticket of min(deficit, backlog). An entry whose
    backlog runs dry loses its deficit. Entries are visited in sorted key
    order. A backlog of None means always backlogged.
    """

    def __init__(self, link: Tuple[str, str], quantum_bits: int = None):
        self.link = link
        self.quantum_bits = quantum_bits or config.DWRR_QUANTUM_BITS
        self.weights: Dict[Hashable, float] = {}
        self.deficits: Dict[Hashable, float] = {}
        self.backlogs: Dict[Hashable, Optional[float]] = {}
        self._order: List[Hashable] = []
        self._cursor = 0

    def set_weights(self, weights: Mapping[Hashable, float], unbounded: bool = False):
        """Replace the weights; surviving entries keep deficit and backlog"""
        self.weights = {entry_key(k): float(w) for k, w in weights.items() if w > 0}
        self._order = sorted(self.weights, key=repr)
        for key in list(self.deficits):
            if key not in self.weights:
                del self.deficits[key]
                self.backlogs.pop(key, None)
        for key in self._order:
            self.deficits.setdefault(key, 0.0)
            if unbounded:
                self.backlogs[key] = None
            else:
                self.backlogs.setdefault(key, 0.0)
        if self._cursor >= len(self._order):
            self._cursor = 0

    def accrue(self, key: Hashable, bits: float):
        key = entry_key(key)
        if key in self.weights and self.backlogs.get(key) is not None:
            self.backlogs[key] += bits

    def set_backlog(self, key: Hashable, bits: float):
        """Replace a bounded entry's backlog with a measured queue"""
        key = entry_key(key)
        if key in self.weights:
            self.backlogs[key] = float(bits)

    def backlog(self, key: Hashable) -> Optional[float]:
        return self.backlogs.get(entry_key(key), 0.0)

    def _has_backlog(self, key: Hashable) -> bool:
        backlog = self.backlogs.get(key)
        return backlog is None or backlog >= 1

    def active(self) -> bool:
        return any(self._has_backlog(k) for k in self._order)

    def next_ticket(self) -> WorkTicket:
        """
        Raises:
            NoActiveCommodities: no entry has backlog
        """
        if not self.active():
            raise NoActiveCommodities(f"link {self.link[0]}->{self.link[1]}: nothing to schedule")
        top = max(self.weights.values())
        while True:
            key = self._order[self._cursor]
            self._cursor = (self._cursor + 1) % len(self._order)
            if not self._has_backlog(key):
                self.deficits[key] = 0.0
                continue
            self.deficits[key] += self.quantum_bits * self.weights[key] / top
            backlog = self.backlogs[key]
            amount = int(self.deficits[key] if backlog is None else min(self.deficits[key], backlog))
            if amount <= 0:
                continue
            self.deficits[key] -= amount
            if backlog is not None:
                self.backlogs[key] = backlog - amount
                if not self._has_backlog(key):
                    self.deficits[key] = 0.0
            commodity, column = key
            return WorkTicket(self.link, commodity, amount, column=column)

    def requeue(self, ticket: WorkTicket, unserved_bits: int):
        """Give back the unserved part of a ticket"""
        key = ticket.key
        if key not in self.weights or unserved_bits <= 0:
            return
        self.deficits[key] += unserved_bits
        if self.backlogs.get(key) is not None:
            self.backlogs[key] += unserved_bits


@dataclass
class _Pending:
    commodity: Tuple[str, str]
    remaining_bits: int
    deadline: Optional[float]
    column: Optional[tuple]


class FifoQueue:
    """One-time requests of one link in arrival order"""

    def __init__(self, link: Tuple[str, str], quantum_bits: int = None):
        self.link = link
        self.quantum_bits = quantum_bits or config.DWRR_QUANTUM_BITS
        self.queue: Deque[_Pending] = deque()

    def __len__(self):
        return len(self.queue)

    def push(self, commodity: Tuple[str, str], amount_bits: int, deadline: Optional[float] = None,
             column: Optional[tuple] = None):
        if amount_bits > 0:
            self.queue.append(_Pending(commodity, int(amount_bits), deadline, column))

    def pending_bits(self, commodity: Tuple[str, str]) -> int:
        return sum(p.remaining_bits for p in self.queue if p.commodity == commodity)

    def cancel(self, commodity: Tuple[str, str]):
        self.queue = deque(p for p in self.queue if p.commodity != commodity)

    def next_ticket(self) -> WorkTicket:
        """
        Raises:
            NoActiveCommodities: queue is empty
        """
        if not self.queue:
            raise NoActiveCommodities(f"link {self.link[0]}->{self.link[1]}: FIFO empty")
        head = self.queue[0]
        amount = min(head.remaining_bits, self.quantum_bits)
        head.remaining_bits -= amount
        if head.remaining_bits == 0:
            self.queue.popleft()
        return WorkTicket(self.link, head.commodity, amount, head.deadline, head.column, on_demand=True)

    def requeue(self, ticket: WorkTicket, unserved_bits: int):
        if unserved_bits <= 0:
            return
        head = self.queue[0] if self.queue else None
        if head is not None and head.commodity == ticket.commodity and head.column == ticket.column:
            head.remaining_bits += unserved_bits
        else:
            self.queue.appendleft(_Pending(ticket.commodity, unserved_bits, ticket.deadline, ticket.column))


def schedule_dwrr(scheduler: DwrrScheduler, weights: Optional[Mapping[Hashable, float]] = None) -> WorkTicket:
    """Next DWRR ticket, after optionally replacing the weights"""
    if weights is not None:
        scheduler.set_weights(weights, unbounded=True)
    return scheduler.next_ticket()


def schedule_fifo(queue: FifoQueue) -> WorkTicket:
    return queue.next_ticket()


class LinkScheduler:
    """FIFO and DWRR for one outgoing link; one-time tickets go first by default"""

    def __init__(self, link: Tuple[str, str], quantum_bits: int = None, on_demand_first: bool = None):
        self.link = link
        self.dwrr = DwrrScheduler(link, quantum_bits)
        self.fifo = FifoQueue(link, quantum_bits)
        self.on_demand_first = config.ON_DEMAND_FIRST if on_demand_first is None else on_demand_first

    def next_ticket(self) -> WorkTicket:
        first, second = (self.fifo, self.dwrr) if self.on_demand_first else (self.dwrr, self.fifo)
        for source in (first, second):
            try:
                return source.next_ticket()
            except NoActiveCommodities:
                continue
        raise NoActiveCommodities(f"link {self.link[0]}->{self.link[1]}: idle")

    def tickets(self, budget_bits: float) -> List[WorkTicket]:
        """Tickets for one scheduling interval, the last one clipped to the budget"""
        out: List[WorkTicket] = []
        remaining = int(budget_bits)
        while remaining > 0:
            try:
                ticket = self.next_ticket()
            except NoActiveCommodities:
                break
            if ticket.amount_bits > remaining:
                self.requeue(ticket, ticket.amount_bits - remaining)
                ticket = replace(ticket, amount_bits=remaining)
            out.append(ticket)
            remaining -= ticket.amount_bits
        return out

    def requeue(self, ticket: WorkTicket, unserved_bits: int):
        if ticket.on_demand:
            self.fifo.requeue(ticket, unserved_bits)
        else:
            self.dwrr.requeue(ticket, unserved_bits)
