# Run-time assertions across modules

"""
Invariant Checks for QKeyMesh
Global properties the simulator asserts while a run is in progress. Every
check raises InvariantViolation with the failing detail.
"""

import hashlib
import logging
from collections import defaultdict
from typing import Dict, Iterable, List, Tuple

from ..errors import InvariantViolation
from ..qnl.mcfp import FlowAssignment
from ..qnl.relay import CATEGORIES, DataPlane
from ..qnl.routing import TopologyGraph

logger = logging.getLogger(__name__)


class GrantLedger:
    """
    Every pool range consumed by a session, per pool generation.

    Two different sessions must never consume overlapping bytes; both sites of
    one session must consume the same range.
    """

    def __init__(self):
        self._ranges: Dict[Tuple[int, int], Dict[int, Tuple[int, int]]] = defaultdict(dict)
        self.entries = 0

    def record(self, remote_site: str, pool_id: int, generation: int, offset: int, length: int, session_id: int):
        ranges = self._ranges[(pool_id, generation)]
        self.entries += 1
        known = ranges.get(session_id)
        if known is not None:
            if known != (offset, length):
                raise InvariantViolation(
                    f"session {session_id} consumed [{offset}, {offset + length}) on one site, "
                    f"[{known[0]}, {known[0] + known[1]}) on the other"
                )
            return
        for other, (o, n) in ranges.items():
            if o < offset + length and offset < o + n:
                raise InvariantViolation(
                    f"pool {pool_id} gen {generation}: sessions {other} and {session_id} share bytes"
                )
        ranges[session_id] = (offset, length)

    __call__ = record


class RelayAudit:
    """Key delivered at the two ends of every relayed or direct chunk must match"""

    def __init__(self):
        self._pending: Dict[Tuple[frozenset, str], Tuple[str, bytes]] = {}
        self.matched = 0

    def record(self, node: str, remote: str, chunk_id: str, data: bytes):
        key = (frozenset((node, remote)), chunk_id)
        digest = hashlib.sha256(data).digest()
        first = self._pending.pop(key, None)
        if first is None:
            self._pending[key] = (node, digest)
            return
        if first[0] == node:
            raise InvariantViolation(f"chunk {chunk_id} delivered twice at {node}")
        if first[1] != digest:
            raise InvariantViolation(f"chunk {chunk_id}: {first[0]} and {node} hold different key bytes")
        self.matched += 1

    @property
    def unmatched(self) -> int:
        return len(self._pending)


def check_stream_audit(data_planes: Iterable[DataPlane]):
    """No (stream, offset) is drawn twice at any node, across all categories"""
    for plane in data_planes:
        per_neighbor: Dict[str, List[Tuple[int, int]]] = defaultdict(list)
        for category in CATEGORIES:
            for neighbor, ranges in plane.pools.drawn[category].items():
                per_neighbor[neighbor].extend(ranges)
        for neighbor, ranges in per_neighbor.items():
            ranges.sort()
            for (o1, n1), (o2, _) in zip(ranges, ranges[1:]):
                if o2 < o1 + n1:
                    raise InvariantViolation(
                        f"{plane.node_id}-{neighbor}: pad bytes at {o2} used twice"
                    )


def check_flow_feasibility(assignment: FlowAssignment, topology: TopologyGraph):
    problems = assignment.capped().violations(topology)
    if problems:
        raise InvariantViolation("; ".join(problems))

