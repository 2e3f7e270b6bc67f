# Trusted-node key relay and temporary key pools

"""
Relay Module for QKeyMesh

Data plane of one node. Raw key from every quantum link lands in a
PairwiseKeyStream shared with that neighbour. Keys for remote sites are
relayed hop by hop under one-time pads drawn from those streams:

    source S asks the first hop P1 (RELAY_REQUEST)
    P1 selects K from the S-P1 stream, tells S the offset (KEY_SELECTED) and
        forwards K xor pad(P1-P2) (RELAY)
    every hop decrypts with the previous stream and re-encrypts with the next
    the destination stages K and acknowledges (RELAY_ACK), again every second
    S passes K to its KMS on the ack and commits (RELAY_COMMIT)
    the destination passes K to its KMS on the commit

An ack for a path set S already gave up on is answered with an abort, so
the two ends never disagree about a chunk.

With transit scheduling on, a hop queues each frame per (outgoing link,
commodity) and forwards it only under a work ticket for that link.

Direct-link commodities skip the envelope: the source draws stream bytes and
names them to the neighbour (DIRECT_KEY). Multipath commodities send one part
per node-disjoint path and XOR the parts.

The lower-id endpoint of a link owns its stream; the other endpoint draws only
from ranges the owner leased to it, so no byte is ever drawn twice.
"""

import bisect
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, Dict, List, Optional, Sequence, Tuple

from .. import config
from ..errors import (
    DataPlaneError,
    InsufficientPairwiseKey,
    InvariantViolation,
    MissingPart,
    StreamUnderflow,
    WrongNode,
)
from ..kms.sealing import xor_bytes
from ..wire import (
    DirectKey,
    ErrorMessage,
    KeySelected,
    LeaseGrant,
    LeaseRequest,
    RelayAck,
    RelayCommit,
    RelayFrame,
    RelayRequest,
    WireMessage,
)
from .scheduling import WorkTicket

logger = logging.getLogger(__name__)

DIRECT = 1  # local <-> direct neighbour
ENDPOINT = 2  # relays this node starts or ends
INTERMEDIARY = 3  # relays passing through
CATEGORIES = (DIRECT, ENDPOINT, INTERMEDIARY)

LEASE_RETRY_S = 1.0
ACK_RESEND_S = 1.0


class PairwiseKeyStream:
    """Raw key shared with one neighbour, addressed by absolute byte offset"""

    def __init__(self, local_id: str, neighbor_id: str):
        self.local_id = local_id
        self.neighbor_id = neighbor_id
        self.owner = local_id < neighbor_id
        self._base = 0
        self._buffer = bytearray()
        self._consumed: List[List[int]] = []  # sorted, merged [start, end)
        self.frontier = 0
        self.leases: Deque[List[int]] = deque()
        self.consumed_bytes = 0

    @property
    def end(self) -> int:
        return self._base + len(self._buffer)

    @property
    def consumed_watermark(self) -> int:
        """Every byte below this offset has been used"""
        if self._consumed and self._consumed[0][0] == 0:
            return self._consumed[0][1]
        return 0

    def append(self, data: bytes):
        self._buffer.extend(data)

    def drawable(self) -> int:
        if self.owner:
            return self.end - self.frontier
        return sum(max(0, min(end, self.end) - start) for start, end in self.leases)

    def contiguous(self) -> int:
        """Largest single draw possible right now"""
        if self.owner:
            return self.end - self.frontier
        return max((min(end, self.end) - start for start, end in self.leases), default=0)

    def can_draw(self, length: int) -> bool:
        if self.owner:
            return self.end - self.frontier >= length
        return any(min(end, self.end) - start >= length for start, end in self.leases)

    def allocate(self, length: int) -> int:
        """
        Claim `length` fresh bytes for this side to use.

        Raises:
            InsufficientPairwiseKey: not enough undrawn (or leased) bytes
        """
        if self.owner:
            if self.end - self.frontier < length:
                raise InsufficientPairwiseKey(
                    f"{self.local_id}-{self.neighbor_id}: {self.end - self.frontier} bytes left, {length} needed"
                )
            offset = self.frontier
            self.frontier += length
            return offset
        while self.leases:
            start, end = self.leases[0]
            if min(end, self.end) - start >= length:
                self.leases[0][0] = start + length
                if start + length >= end:
                    self.leases.popleft()
                return start
            if end <= self.end:
                self.leases.popleft()
                self._discard(start, end)
            else:
                break
        raise InsufficientPairwiseKey(f"{self.local_id}-{self.neighbor_id}: no lease covers {length} bytes")

    def _discard(self, start: int, end: int):
        if end > start:
            self.consume(start, end - start)

    def grant_lease(self, length: int) -> Optional[Tuple[int, int]]:
        """Owner side: hand the next undrawn bytes to the neighbour"""
        count = min(length, self.end - self.frontier)
        if not self.owner or count <= 0:
            return None
        offset = self.frontier
        self.frontier += count
        return offset, count

    def add_lease(self, offset: int, length: int):
        self.leases.append([offset, offset + length])

    def leased_remaining(self) -> int:
        return sum(end - start for start, end in self.leases)

    def consume(self, offset: int, length: int) -> bytes:
        """
        Read bytes at a stated offset exactly once and zeroize them.

        Raises:
            StreamUnderflow: the bytes have not been generated yet
            InvariantViolation: any of the bytes was used before
        """
        if length <= 0:
            raise ValueError("length must be positive")
        end = offset + length
        if offset < self._base and not self._overlaps(offset, end):
            raise InvariantViolation(f"{self.local_id}-{self.neighbor_id}: offset {offset} already trimmed")
        if end > self.end:
            raise StreamUnderflow(f"{self.local_id}-{self.neighbor_id}: bytes up to {end} not generated ({self.end})")
        if self._overlaps(offset, end):
            raise InvariantViolation(f"{self.local_id}-{self.neighbor_id}: pad bytes [{offset}, {end}) reused")
        lo = offset - self._base
        data = bytes(self._buffer[lo: lo + length])
        self._buffer[lo: lo + length] = bytes(length)
        self._mark(offset, end)
        self.consumed_bytes += length
        self._trim()
        return data

    def _overlaps(self, start: int, end: int) -> bool:
        i = bisect.bisect_right(self._consumed, [start, float("inf")]) - 1
        for j in (i, i + 1):
            if 0 <= j < len(self._consumed):
                s, e = self._consumed[j]
                if s < end and start < e:
                    return True
        return False

    def _mark(self, start: int, end: int):
        bisect.insort(self._consumed, [start, end])
        merged: List[List[int]] = []
        for s, e in self._consumed:
            if merged and s <= merged[-1][1]:
                merged[-1][1] = max(merged[-1][1], e)
            else:
                merged.append([s, e])
        self._consumed = merged

    def _trim(self):
        mark = self.consumed_watermark
        if mark > self._base:
            del self._buffer[: mark - self._base]
            self._base = mark

    def consumed_ranges(self) -> List[Tuple[int, int]]:
        return [(s, e) for s, e in self._consumed]


class TempKeyPools:
    """
    Stream buffers of one node with per-category draw records.

    Category 1 holds bits for direct-neighbour key, category 2 bits for relays
    this node starts or ends, category 3 bits for relays passing through.
    """

    def __init__(self, node_id: str):
        self.node_id = node_id
        self.streams: Dict[str, PairwiseKeyStream] = {}
        self.drawn: Dict[int, Dict[str, List[Tuple[int, int]]]] = {c: {} for c in CATEGORIES}
        self.in_transit: Dict[str, "_Held"] = {}

    def stream(self, neighbor: str) -> PairwiseKeyStream:
        if neighbor not in self.streams:
            self.streams[neighbor] = PairwiseKeyStream(self.node_id, neighbor)
        return self.streams[neighbor]

    def add_raw(self, neighbor: str, data: bytes):
        self.stream(neighbor).append(data)

    def draw(self, category: int, neighbor: str, length: int) -> Tuple[int, bytes]:
        """
        Take fresh bytes from a neighbour stream for one category.

        Raises:
            InsufficientPairwiseKey: stream (or lease) too short
        """
        if category not in CATEGORIES:
            raise ValueError(f"unknown category {category}")
        stream = self.streams.get(neighbor)
        if stream is None:
            raise InsufficientPairwiseKey(f"{self.node_id}: no stream with {neighbor}")
        offset = stream.allocate(length)
        return offset, self._take(category, stream, offset, length)

    def take(self, category: int, neighbor: str, offset: int, length: int) -> bytes:
        """Bytes the neighbour named (the other side of a draw)"""
        stream = self.streams.get(neighbor)
        if stream is None:
            raise StreamUnderflow(f"{self.node_id}: no stream with {neighbor}")
        return self._take(category, stream, offset, length)

    def _take(self, category: int, stream: PairwiseKeyStream, offset: int, length: int) -> bytes:
        data = stream.consume(offset, length)
        self.drawn[category].setdefault(stream.neighbor_id, []).append((offset, length))
        return data


def draw_temp_bits(pools: TempKeyPools, category: int, neighbor: str, length: int) -> bytes:
    """Fresh bytes from one category's view of a neighbour stream"""
    return pools.draw(category, neighbor, length)[1]


def combine_multipath(parts: Sequence[Optional[bytes]]) -> bytes:
    """
    XOR of all parts of a path set.

    Raises:
        MissingPart: a part has not arrived
        LengthMismatch: parts differ in length
    """
    if not parts or any(p is None for p in parts):
        raise MissingPart(f"{sum(p is None for p in parts)} of {len(parts)} parts missing")
    return xor_bytes(*parts)


@dataclass
class _Held:
    """Decrypted key at an intermediary waiting for pad bytes"""
    frame: RelayFrame
    key: bytes
    since: float


@dataclass
class _Sourced:
    ticket: WorkTicket
    dst: str
    part_count: int
    length_bytes: int
    started: float
    parts: Dict[int, bytes] = field(default_factory=dict)
    acked: bool = False


@dataclass
class _Arriving:
    src: str
    part_count: int
    started: float
    parts: Dict[int, bytes] = field(default_factory=dict)


@dataclass
class _Staged:
    """Combined key at the destination waiting for the source's commit"""
    src: str
    key: bytes
    since: float
    acked_at: float


@dataclass(frozen=True)
class Forward:
    frame: RelayFrame


@dataclass(frozen=True)
class Deliver:
    path_set_id: str
    part_index: int
    key: bytes


@dataclass
class DataPlaneStats:
    relays_started: int = 0
    relays_completed: int = 0
    relays_failed: int = 0
    direct_chunks: int = 0
    delivered_bits: Dict[Tuple[str, str], int] = field(default_factory=dict)
    latencies: List[float] = field(default_factory=list)
    missing_parts: int = 0
    held: int = 0
    discarded: int = 0
    unsettled: int = 0


class DataPlane:
    """QNL data plane of one node"""

    def __init__(
        self,
        node_id: str,
        send: Callable[[str, str, WireMessage], None],
        clock: Callable[[], float],
        deliver_key: Callable[[str, str, bytes], None],
        requeue: Callable[[WorkTicket, int], None] = None,
        relay_timeout_s: float = None,
        transit_scheduled: bool = False,
    ):
        """
        Args:
            node_id: Local node
            send: Transport, called as send(channel, destination node, message)
            clock: Simulation time source
            deliver_key: Hands (remote site, chunk id, key bytes) to the local KMS
            requeue: Gives bits of a failed ticket back to the scheduler
            relay_timeout_s: Give up on unacknowledged or incomplete path sets
            transit_scheduled: Queue relays passing through until a work
                ticket for the outgoing link releases them
        """
        self.node_id = node_id
        self._send = send
        self._clock = clock
        self._deliver_key = deliver_key
        self._requeue = requeue or (lambda ticket, bits: None)
        self.relay_timeout_s = relay_timeout_s or config.RELAY_TIMEOUT_S
        self.transit_scheduled = transit_scheduled
        self.pools = TempKeyPools(node_id)
        self.transit: Dict[Tuple[str, Tuple[str, str]], Deque[_Held]] = {}  # (next hop, commodity)
        self.sourced: Dict[str, _Sourced] = {}
        self.arriving: Dict[str, _Arriving] = {}
        self.staged: Dict[str, _Staged] = {}
        self._settled: Dict[str, Tuple[bool, float]] = {}  # path set -> (committed, when)
        self._lease_pending: Dict[str, float] = {}
        self._abandoned_hops: Dict[str, Tuple[str, float]] = {}  # relay id -> (first hop, when)
        self._counter = 0
        self.stats = DataPlaneStats()

    def add_raw_key(self, neighbor: str, data: bytes):
        """Key bytes from the link layer"""
        self.pools.add_raw(neighbor, data)

    # --------------------------------------------------------- leases

    def _ensure_lease(self, neighbor: str, needed: int):
        stream = self.pools.stream(neighbor)
        if stream.owner:
            return
        if stream.leased_remaining() >= max(needed, config.LEASE_CHUNK_BYTES // 2):
            return
        since = self._lease_pending.get(neighbor)
        if since is not None and self._clock() - since < LEASE_RETRY_S:
            return
        self._lease_pending[neighbor] = self._clock()
        self._send("data_plane", neighbor, LeaseRequest(
            requester=self.node_id, owner=neighbor, length_bytes=max(config.LEASE_CHUNK_BYTES, needed),
        ))

    def _can_draw(self, neighbor: str, length: int) -> bool:
        ok = neighbor in self.pools.streams and self.pools.streams[neighbor].can_draw(length)
        self._ensure_lease(neighbor, length)
        return ok

    def _draw(self, category: int, neighbor: str, length: int) -> Tuple[int, bytes]:
        result = self.pools.draw(category, neighbor, length)
        self._ensure_lease(neighbor, length)
        return result

    def _on_lease_request(self, message: LeaseRequest):
        grant = self.pools.stream(message.requester).grant_lease(message.length_bytes)
        if grant is None:
            logger.debug(f"[Relay] {self.node_id}: nothing to lease to {message.requester}")
            return
        offset, length = grant
        self._send("data_plane", message.requester, LeaseGrant(
            owner=self.node_id, requester=message.requester, offset=offset, length_bytes=length,
        ))

    def _on_lease_grant(self, message: LeaseGrant):
        self.pools.stream(message.owner).add_lease(message.offset, message.length_bytes)
        self._lease_pending.pop(message.owner, None)

    # --------------------------------------------------------- source

    def execute_ticket(self, ticket: WorkTicket) -> int:
        """
        Start the key movement a ticket allows. A ticket for a commodity
        sourced elsewhere releases queued transit frames.

        Returns:
            bits served; the caller re-queues the rest. Relayed bits count as
            served once requested; a failed relay gives them back later.
        """
        if ticket.link[0] != self.node_id:
            raise WrongNode(f"{self.node_id}: ticket for link {ticket.link[0]}->{ticket.link[1]}")
        src, dst = ticket.commodity
        if src != self.node_id:
            return self._release_transit(ticket)
        length = ticket.amount_bits // 8
        column = ticket.column
        if length <= 0 or not column:
            return 0
        if len(column) == 1 and len(column[0]) == 2:
            return self._direct(ticket, dst, length)

        self._counter += 1
        path_set_id = f"{src}>{dst}#{self._counter}"
        self.sourced[path_set_id] = _Sourced(ticket, dst, len(column), length, self._clock())
        for index, path in enumerate(column):
            self._send("data_plane", path[1], RelayRequest(
                relay_id=f"{path_set_id}.{index}",
                path_set_id=path_set_id,
                part_index=index,
                part_count=len(column),
                src=src,
                dst=dst,
                path=list(path),
                length_bytes=length,
            ))
        self.stats.relays_started += 1
        return length * 8

    def _direct(self, ticket: WorkTicket, dst: str, length: int) -> int:
        stream = self.pools.stream(dst)
        wanted = length
        length = min(length, stream.contiguous())
        if length <= 0:
            self._ensure_lease(dst, wanted)
            return 0
        offset, data = self._draw(DIRECT, dst, length)
        chunk_id = f"{self.node_id}>{dst}:{offset}"
        self._send("data_plane", dst, DirectKey(
            chunk_id=chunk_id, src=self.node_id, dst=dst, stream_offset=offset, length_bytes=length,
        ))
        self._delivered(dst, chunk_id, data)
        self.stats.direct_chunks += 1
        return length * 8

    def _on_direct_key(self, message: DirectKey):
        if message.dst != self.node_id:
            raise WrongNode(f"{self.node_id}: direct key for {message.dst}")
        data = self.pools.take(DIRECT, message.src, message.stream_offset, message.length_bytes)
        self._delivered(message.src, message.chunk_id, data)

    def _on_key_selected(self, message: KeySelected):
        sourced = self.sourced.get(message.path_set_id)
        if sourced is None:
            # late selection for an abandoned path set: use up the bytes anyway
            abandoned = self._abandoned_hops.pop(message.relay_id, None)
            if abandoned is not None:
                self.pools.take(ENDPOINT, abandoned[0], message.stream_offset, message.length_bytes)
            return
        first_hop = sourced.ticket.column[message.part_index][1]
        sourced.parts[message.part_index] = self.pools.take(
            ENDPOINT, first_hop, message.stream_offset, message.length_bytes)
        self._try_complete_source(message.path_set_id)

    def _on_ack(self, message: RelayAck):
        sourced = self.sourced.get(message.path_set_id)
        if sourced is None:
            # repeated ack, or one for a path set given up on (unknown ids abort too)
            committed, _ = self._settled.get(message.path_set_id, (False, 0.0))
            self._commit(message.path_set_id, message.dst, committed)
            return
        sourced.acked = True
        self._try_complete_source(message.path_set_id)

    def _try_complete_source(self, path_set_id: str):
        sourced = self.sourced[path_set_id]
        if not sourced.acked or len(sourced.parts) < sourced.part_count:
            return
        del self.sourced[path_set_id]
        key = combine_multipath([sourced.parts[i] for i in range(sourced.part_count)])
        self.stats.relays_completed += 1
        self.stats.latencies.append(self._clock() - sourced.started)
        self._delivered(sourced.dst, path_set_id, key)
        self._settled[path_set_id] = (True, self._clock())
        self._commit(path_set_id, sourced.dst, True)

    def _commit(self, path_set_id: str, dst: str, commit: bool):
        self._send("conventional", dst, RelayCommit(
            path_set_id=path_set_id, src=self.node_id, dst=dst, commit=commit,
        ))

    def _abandon(self, path_set_id: str, reason: str):
        sourced = self.sourced.pop(path_set_id, None)
        if sourced is None:
            return
        now = self._clock()
        for index, path in enumerate(sourced.ticket.column):
            if index not in sourced.parts:
                self._abandoned_hops[f"{path_set_id}.{index}"] = (path[1], now)
        sourced.parts.clear()
        self._settled[path_set_id] = (False, now)
        self.stats.relays_failed += 1
        logger.info(f"[Relay] {self.node_id}: path set {path_set_id} abandoned: {reason}")
        self._requeue(sourced.ticket, sourced.length_bytes * 8)

    # ---------------------------------------------------- relay nodes

    def relay_originate(self, request: RelayRequest) -> Optional[object]:
        """
        First hop: select K from the stream shared with the source.

        Returns:
            Forward or Deliver (first hop is the destination)

        Raises:
            InsufficientPairwiseKey: a stream is too short (nothing consumed)
            WrongNode: this node is not the first hop
        """
        path = request.path
        if len(path) < 2 or path[1] != self.node_id:
            raise WrongNode(f"{self.node_id}: not the first hop of {'-'.join(path)}")
        if request.length_bytes <= 0:
            raise ValueError("relay length must be positive")
        src, length = path[0], request.length_bytes
        last = len(path) == 2
        ok_src = self._can_draw(src, length)
        ok_next = last or self._can_draw(path[2], length)
        if not (ok_src and ok_next):
            raise InsufficientPairwiseKey(f"{self.node_id}: streams too short for {request.relay_id}")
        offset, key = self._draw(ENDPOINT if last else INTERMEDIARY, src, length)
        self._send("data_plane", src, KeySelected(
            relay_id=request.relay_id, path_set_id=request.path_set_id,
            part_index=request.part_index, stream_offset=offset, length_bytes=length,
        ))
        frame = RelayFrame(
            relay_id=request.relay_id, path_set_id=request.path_set_id,
            part_index=request.part_index, part_count=request.part_count,
            src=request.src, dst=request.dst, path=path, hop_index=1,
            stream_offset=offset, length_bytes=length, ciphertext="",
        )
        if last:
            self._arrive(frame, key)
            return Deliver(request.path_set_id, request.part_index, key)
        return self._pass_on(frame, key)

    def relay_receive(self, frame: RelayFrame) -> Optional[object]:
        """
        Decrypt with the previous hop's stream, then deliver or re-encrypt.

        Raises:
            WrongNode: this node is not path[hop_index]
            StreamUnderflow: pad bytes not generated here yet
        """
        if frame.hop_index >= len(frame.path) or frame.path[frame.hop_index] != self.node_id:
            raise WrongNode(f"{self.node_id}: relay {frame.relay_id} addressed to hop {frame.hop_index}")
        previous = frame.path[frame.hop_index - 1]
        last = frame.hop_index == len(frame.path) - 1
        pad = self.pools.take(ENDPOINT if last else INTERMEDIARY, previous, frame.stream_offset, frame.length_bytes)
        key = xor_bytes(bytes.fromhex(frame.ciphertext), pad)
        if last:
            self._arrive(frame, key)
            return Deliver(frame.path_set_id, frame.part_index, key)
        return self._pass_on(frame, key)

    def _pass_on(self, frame: RelayFrame, key: bytes) -> Optional[Forward]:
        if not self.transit_scheduled:
            return self._forward(frame, key)
        slot = (frame.path[frame.hop_index + 1], (frame.src, frame.dst))
        self.transit.setdefault(slot, deque()).append(_Held(frame, key, self._clock()))
        return None

    def transit_backlog(self) -> Dict[Tuple[Tuple[str, str], Tuple[str, str]], int]:
        """Queued relay bits per (outgoing link, commodity)"""
        return {
            ((self.node_id, nxt), commodity): 8 * sum(held.frame.length_bytes for held in queue)
            for (nxt, commodity), queue in self.transit.items() if queue
        }

    def _release_transit(self, ticket: WorkTicket) -> int:
        """Forward queued relays of one commodity until the ticket is used up"""
        slot = (ticket.link[1], tuple(ticket.commodity))
        queue = self.transit.get(slot)
        released = 0
        while queue and released < ticket.amount_bits:
            held = queue[0]
            if not self._can_draw(slot[0], held.frame.length_bytes):
                break
            queue.popleft()
            self._forward(held.frame, held.key)
            released += 8 * held.frame.length_bytes
        if queue is not None and not queue:
            del self.transit[slot]
        return released

    def _forward(self, frame: RelayFrame, key: bytes) -> Optional[Forward]:
        nxt = frame.path[frame.hop_index + 1]
        try:
            offset, pad = self._draw(INTERMEDIARY, nxt, frame.length_bytes)
        except InsufficientPairwiseKey:
            self.pools.in_transit[frame.relay_id] = _Held(frame, key, self._clock())
            self.stats.held += 1
            return None
        out = frame.model_copy(update={
            "hop_index": frame.hop_index + 1,
            "stream_offset": offset,
            "ciphertext": xor_bytes(key, pad).hex(),
        })
        self.pools.in_transit.pop(frame.relay_id, None)
        self._send("data_plane", nxt, out)
        return Forward(out)

    def _arrive(self, frame: RelayFrame, key: bytes):
        arriving = self.arriving.get(frame.path_set_id)
        if arriving is None:
            arriving = self.arriving[frame.path_set_id] = _Arriving(frame.src, frame.part_count, self._clock())
        arriving.parts[frame.part_index] = key
        if len(arriving.parts) < arriving.part_count:
            return
        del self.arriving[frame.path_set_id]
        combined = combine_multipath([arriving.parts[i] for i in range(arriving.part_count)])
        now = self._clock()
        self.staged[frame.path_set_id] = _Staged(frame.src, combined, now, now)
        self._ack(frame.path_set_id)

    def _ack(self, path_set_id: str):
        staged = self.staged[path_set_id]
        staged.acked_at = self._clock()
        self._send("conventional", staged.src, RelayAck(
            path_set_id=path_set_id, src=staged.src, dst=self.node_id, length_bytes=len(staged.key),
        ))

    def _on_commit(self, message: RelayCommit):
        if message.dst != self.node_id:
            raise WrongNode(f"{self.node_id}: commit for {message.dst}")
        self.arriving.pop(message.path_set_id, None)
        staged = self.staged.pop(message.path_set_id, None)
        if staged is None:
            return
        if message.commit:
            self._delivered(staged.src, message.path_set_id, staged.key)
            return
        self.stats.discarded += 1
        logger.info(f"[Relay] {self.node_id}: path set {message.path_set_id} aborted by {staged.src}")

    def _delivered(self, remote: str, chunk_id: str, data: bytes):
        pair = (self.node_id, remote)
        self.stats.delivered_bits[pair] = self.stats.delivered_bits.get(pair, 0) + 8 * len(data)
        self._deliver_key(remote, chunk_id, data)

    # ------------------------------------------------------- dispatch

    def on_message(self, message: WireMessage):
        try:
            if isinstance(message, RelayRequest):
                try:
                    self.relay_originate(message)
                except InsufficientPairwiseKey as e:
                    self._send("data_plane", message.src, ErrorMessage(
                        src_site=self.node_id, dst_site=message.src, code=e.code,
                        detail=str(e), relay_id=message.relay_id,
                    ))
            elif isinstance(message, RelayFrame):
                self.relay_receive(message)
            elif isinstance(message, KeySelected):
                self._on_key_selected(message)
            elif isinstance(message, RelayAck):
                self._on_ack(message)
            elif isinstance(message, RelayCommit):
                self._on_commit(message)
            elif isinstance(message, DirectKey):
                self._on_direct_key(message)
            elif isinstance(message, LeaseRequest):
                self._on_lease_request(message)
            elif isinstance(message, LeaseGrant):
                self._on_lease_grant(message)
            elif isinstance(message, ErrorMessage) and message.relay_id:
                self._abandon(message.relay_id.rsplit(".", 1)[0], message.code)
        except DataPlaneError as e:
            logger.warning(f"[Relay] {self.node_id}: {type(message).__name__} dropped: {e}")

    def _drop_held(self, held: _Held, reason: str):
        frame = held.frame
        logger.warning(f"[Relay] {self.node_id}: relay {frame.relay_id} dropped towards "
                       f"{frame.path[frame.hop_index + 1]}: {reason}")
        self._send("conventional", frame.src, ErrorMessage(
            src_site=self.node_id, dst_site=frame.src, code=StreamUnderflow.code,
            detail=reason, relay_id=frame.relay_id,
        ))

    def tick(self):
        """Retry held relays, repeat unanswered acks and expire stale path sets"""
        now = self._clock()
        for relay_id in sorted(self.pools.in_transit):
            held = self.pools.in_transit[relay_id]
            if now - held.since > self.relay_timeout_s:
                del self.pools.in_transit[relay_id]
                self._drop_held(held, "no pad bytes")
                continue
            self._forward(held.frame, held.key)
        for slot in sorted(self.transit):
            queue = self.transit[slot]
            while queue and now - queue[0].since > self.relay_timeout_s:
                self._drop_held(queue.popleft(), "no work ticket")
            if not queue:
                del self.transit[slot]
        for path_set_id in sorted(self.sourced):
            if now - self.sourced[path_set_id].started > self.relay_timeout_s:
                self._abandon(path_set_id, "no acknowledgement")
        for path_set_id in sorted(self.arriving):
            arriving = self.arriving[path_set_id]
            if now - arriving.started > self.relay_timeout_s:
                del self.arriving[path_set_id]
                self.stats.missing_parts += 1
                logger.warning(f"[Relay] {self.node_id}: path set {path_set_id} incomplete, "
                               f"{len(arriving.parts)} of {arriving.part_count} parts")
        for path_set_id in sorted(self.staged):
            staged = self.staged[path_set_id]
            if now - staged.since > 2 * self.relay_timeout_s:
                del self.staged[path_set_id]
                self.stats.unsettled += 1
                logger.warning(f"[Relay] {self.node_id}: path set {path_set_id} never committed by {staged.src}")
            elif now - staged.acked_at >= ACK_RESEND_S:
                self._ack(path_set_id)
        horizon = now - 3 * self.relay_timeout_s
        self._settled = {k: v for k, v in self._settled.items() if v[1] >= horizon}
        self._abandoned_hops = {k: v for k, v in self._abandoned_hops.items() if v[1] >= horizon}
