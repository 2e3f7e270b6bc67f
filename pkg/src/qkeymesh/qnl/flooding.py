# Network-wide flooding of demand and link state

"""
Flooding Module for QKeyMesh
Key generation messages build the global demand matrix; link-state
advertisements build the topology. Both are flooded over the trusted network
with per-origin sequence numbers.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Set, Tuple

from .. import config
from ..wire import KgmMessage, LsaMessage

logger = logging.getLogger(__name__)

Commodity = Tuple[str, str]

SEQ_LIMIT = 2 ** 32


@dataclass(frozen=True)
class DemandEntry:
    """Continuous demand of one site pair"""
    rate_bits_per_s: float
    priority: float = 1.0
    tactic: str = "single"
    max_hops: Optional[int] = None
    path_count: int = 1
    seq: int = 0


class DemandMatrix:
    """
    Global key-generation demand as seen by one node.

    Continuous entries follow the newest KGM of their pair; one-time amounts
    are kept per message so arrival order does not matter; a Stop removes the
    pair's continuous entry and every older one-time amount.
    """

    def __init__(self):
        self.continuous: Dict[Commodity, DemandEntry] = {}
        self.one_time: Dict[Commodity, Dict[int, int]] = {}
        self._latest: Dict[Commodity, int] = {}
        self._stops: Dict[Commodity, int] = {}

    def apply(self, kgm: KgmMessage) -> bool:
        """Fold one KGM in; returns True when the continuous demand changed"""
        pair = (kgm.src_site, kgm.dst_site)
        if kgm.mode == "one_time":
            if kgm.msg_seq > self._stops.get(pair, -1):
                self.one_time.setdefault(pair, {})[kgm.msg_seq] = int(kgm.amount_bits)
            return False
        if kgm.msg_seq <= self._latest.get(pair, -1):
            return False
        self._latest[pair] = kgm.msg_seq
        before = self.continuous.get(pair)
        if kgm.mode == "stop":
            self.continuous.pop(pair, None)
            self._stops[pair] = kgm.msg_seq
            amounts = self.one_time.get(pair, {})
            for seq in [s for s in amounts if s < kgm.msg_seq]:
                del amounts[seq]
            if not amounts:
                self.one_time.pop(pair, None)
            return before is not None
        entry = DemandEntry(
            rate_bits_per_s=float(kgm.rate_bits_per_s),
            priority=float(kgm.priority),
            tactic=kgm.tactic,
            max_hops=kgm.max_hops,
            path_count=kgm.path_count,
            seq=kgm.msg_seq,
        )
        self.continuous[pair] = entry
        return before is None or before.rate_bits_per_s != entry.rate_bits_per_s or before.tactic != entry.tactic

    def rates(self) -> Dict[Commodity, float]:
        return {pair: e.rate_bits_per_s for pair, e in sorted(self.continuous.items()) if e.rate_bits_per_s > 0}

    def priorities(self) -> Dict[Commodity, float]:
        return {pair: e.priority for pair, e in sorted(self.continuous.items())}

    def one_time_bits(self, pair: Commodity) -> int:
        return sum(self.one_time.get(pair, {}).values())

    def snapshot(self) -> Tuple:
        """Canonical content for cross-node comparison"""
        return (
            tuple(sorted((pair, e.rate_bits_per_s, e.priority, e.tactic, e.max_hops, e.path_count, e.seq)
                         for pair, e in self.continuous.items())),
            tuple(sorted((pair, tuple(sorted(a.items()))) for pair, a in self.one_time.items() if a)),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, DemandMatrix):
            return NotImplemented
        return self.snapshot() == other.snapshot()

    def __len__(self):
        return len(self.continuous)


class FloodState:
    """Duplicate suppression and link-state database of one node"""

    def __init__(self, node_id: str, seen_window: int = None):
        self.node_id = node_id
        self.seen_window = seen_window or config.KGM_SEEN_WINDOW
        # origin -> (highest sequence forgotten, sequences seen above it)
        self.seen_kgm: Dict[str, Tuple[int, Set[int]]] = {}
        self.lsa_db: Dict[str, LsaMessage] = {}
        self.demand = DemandMatrix()
        self.kgm_seq = 0
        self.lsa_seq = 0

    def next_kgm_seq(self) -> int:
        self.kgm_seq += 1
        if self.kgm_seq >= SEQ_LIMIT:
            raise OverflowError(f"{self.node_id}: KGM sequence space exhausted")
        return self.kgm_seq

    def accept_kgm(self, kgm: KgmMessage) -> bool:
        """
        Apply a KGM once; False for duplicates.

        Each origin keeps the newest `seen_window` sequence numbers; anything
        at or below the forgotten ones counts as a duplicate.
        """
        floor, seen = self.seen_kgm.get(kgm.origin, (-1, set()))
        if kgm.msg_seq <= floor or kgm.msg_seq in seen:
            return False
        seen.add(kgm.msg_seq)
        if len(seen) > self.seen_window:
            floor = max(seen) - self.seen_window
            seen = {seq for seq in seen if seq > floor}
        self.seen_kgm[kgm.origin] = (floor, seen)
        self.demand.apply(kgm)
        return True

    def originate_lsa(self, neighbors: Iterable[Tuple[str, float]]) -> LsaMessage:
        self.lsa_seq += 1
        if self.lsa_seq >= SEQ_LIMIT:
            raise OverflowError(f"{self.node_id}: LSA sequence space exhausted")
        lsa = LsaMessage(origin_node=self.node_id, seq_no=self.lsa_seq,
                         neighbors=sorted((n, float(c)) for n, c in neighbors))
        self.lsa_db[self.node_id] = lsa
        return lsa

    def accept_lsa(self, lsa: LsaMessage) -> bool:
        """Store an LSA only if it is newer than the stored one for its origin"""
        stored = self.lsa_db.get(lsa.origin_node)
        if stored is not None and lsa.seq_no <= stored.seq_no:
            return False
        self.lsa_db[lsa.origin_node] = lsa
        return True


def flood_targets(neighbors: Iterable[str], received_from: Optional[str]) -> List[str]:
    """Neighbours a flooded message is forwarded to"""
    return sorted(n for n in neighbors if n != received_from)
