# Remote pool synchronization

"""
Keeps the two mirrors of a quantum key pool in step.

The lexicographically smaller site leads: it injects delivered key chunks in
arrival order and decides working-set advances, growth, expiry purges and
inter-site key refreshes. The follower stages its own copy of each chunk by
chunk id and injects it when the leader's inject event says so. Confirm and
abort on either side are replayed on the other as a forced consume.

Events are sequence-numbered per direction. A gap is answered with an ERROR
frame asking for a resend; the sender keeps a log until the peer acknowledges
the events in a DIGEST and resends whatever stays unacknowledged too long.
The leader sends its digest every N events; the follower compares digests
when both sides are quiescent and every event has been applied on both
sides, and a mismatch purges both mirrors. A digest from a later generation
means the peer purged unseen, so the receiver purges too.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, Dict, List, Optional, Tuple

from .. import config
from ..errors import (
    DigestMismatch,
    InsufficientMaterial,
    RaceConflict,
    SequenceGap,
    StaleGeneration,
)
from ..keypool import QuantumKeyPool
from ..wire import DigestMessage, ErrorMessage, PoolEvent, WireMessage
from .sealing import KeySelectionInfo

logger = logging.getLogger(__name__)


@dataclass
class SyncListener:
    """Callbacks into the owning KMS"""
    sessions_lost: Callable[[List[int]], None] = lambda sessions: None
    session_mirrored: Callable[[int], None] = lambda session_id: None
    purged: Callable[[], None] = lambda: None
    refreshed: Callable[[bytes], None] = lambda key: None
    refresh_requested: Callable[[], None] = lambda: None
    material_added: Callable[[], None] = lambda: None


@dataclass
class SyncStats:
    events_sent: int = 0
    events_applied: int = 0
    resends: int = 0
    gaps: int = 0
    digest_checks: int = 0
    digest_mismatches: int = 0
    purges: int = 0
    checkpoints: List[Tuple[int, str]] = field(default_factory=list)


class PoolSynchronizer:
    """One side of the mirrored-pool protocol for a site pair"""

    def __init__(
        self,
        pool: QuantumKeyPool,
        local_site: str,
        peer_site: str,
        send: Callable[[WireMessage], None],
        clock: Callable[[], float],
        listener: Optional[SyncListener] = None,
        digest_every: int = None,
        chunk_timeout_s: float = None,
    ):
        self.pool = pool
        self.local_site = local_site
        self.peer_site = peer_site
        self.leader = local_site < peer_site
        self._send = send
        self._clock = clock
        self.listener = listener or SyncListener()
        self.digest_every = digest_every or config.DIGEST_EVERY_EVENTS
        self.chunk_timeout_s = chunk_timeout_s or config.SYNC_CHUNK_TIMEOUT_S

        self.seq_out = 0
        self.seq_in = 0
        self.log: Dict[int, PoolEvent] = {}
        self.staged: Dict[str, Tuple[bytes, float]] = {}
        self.queue: Deque[PoolEvent] = deque()
        self._head_since: Optional[float] = None
        self._gap_requested: Optional[Tuple[int, float]] = None
        self._since_digest = 0
        self._sent_at: Dict[int, float] = {}
        self._last_digest_at = float("-inf")
        self.stats = SyncStats()

    @property
    def applied(self) -> int:
        return self.seq_in - len(self.queue)

    # ------------------------------------------------------ local events

    def deliver_chunk(self, chunk_id: str, data: bytes) -> Optional[int]:
        """
        Hand a delivered key chunk to the pool.

        The leader injects immediately (PoolFull propagates); the follower stages
        it until the leader's inject event arrives.
        """
        if self.leader:
            segment_id = self.pool.inject(data)
            self.emit("inject", chunk_id=chunk_id, length_bytes=len(data),
                      victims=self.pool.last_overwrite_victims)
            self.maybe_advance()
            self.listener.material_added()
            return segment_id
        self.staged[chunk_id] = (bytes(data), self._clock())
        self._drain()
        return None

    def emit(self, op: str, **fields) -> PoolEvent:
        self.seq_out += 1
        event = PoolEvent(
            src_site=self.local_site,
            dst_site=self.peer_site,
            pool_id=self.pool.pool_id,
            generation=self.pool.generation,
            seq=self.seq_out,
            op=op,
            **fields,
        )
        self.log[event.seq] = event
        self._sent_at[event.seq] = self._clock()
        self.stats.events_sent += 1
        self._send(event)
        self._since_digest += 1
        if self.leader and self._since_digest >= self.digest_every:
            self.send_digest()
        return event

    def record_consume(self, op: str, offset: int, length: int, session_id: Optional[int]):
        """Mirror a local confirm or abort"""
        self.emit(op, offset_bytes=offset, length_bytes=length, session_id=session_id)
        self.maybe_advance()

    def record_resolve(self, selection: KeySelectionInfo):
        self.emit("resolve", offset_bytes=selection.offset_bytes,
                  length_bytes=selection.length_bytes, session_id=selection.session_id)

    def maybe_advance(self):
        if self.leader and self.pool.working_set_due():
            start = self.pool.advance_working_set()
            self.emit("advance_ws", offset_bytes=start)

    def grow(self, extra_bytes: int):
        if not self.leader:
            return
        self.pool.grow(extra_bytes)
        self.emit("grow", length_bytes=extra_bytes)

    def purge(self, reason: str = ""):
        """Leader-driven purge of both mirrors"""
        self.emit("purge_all")
        self._purge_local(reason or "purge requested")

    def refresh(self, length: int = None) -> Optional[bytes]:
        """
        Draw a new inter-site key from the reserved region.

        On the follower this only asks the leader to refresh.

        Raises:
            InsufficientMaterial: reserved region has no Available run left
        """
        length = length or config.INTERSITE_KEY_BYTES
        if not self.leader:
            self.emit("refresh", length_bytes=length)
            return None
        allocation = self.pool.allocate_reserved(length, session_id=0)
        key = self.pool.key_bytes(allocation)
        self.pool.confirm(allocation)
        self.emit("refresh", offset_bytes=allocation.offset_bytes, length_bytes=length)
        self.listener.refreshed(key)
        return key

    def tick(self):
        """Periodic housekeeping: expiry, stale staging, stuck queue, lost tail"""
        now = self._clock()
        if self.leader and self.pool.expired(now):
            logger.info(f"[Sync] pool {self.pool.pool_id}: content expired")
            self.purge("expired")
        for chunk_id, (_, since) in list(self.staged.items()):
            if now - since > self.chunk_timeout_s:
                del self.staged[chunk_id]
        if self.queue and self._head_since is not None and now - self._head_since > self.chunk_timeout_s:
            logger.warning(f"[Sync] pool {self.pool.pool_id}: chunk {self.queue[0].chunk_id} never arrived")
            self._diverged("missing chunk")
        if (self.leader and self._since_digest) or self.log:
            self.send_digest()

    # ---------------------------------------------------- peer events

    def apply_peer_event(self, event: PoolEvent):
        """
        Apply one event from the peer in sequence order.

        Raises:
            SequenceGap: an earlier event is missing (a resend was requested)
        """
        if event.seq <= self.seq_in:
            return
        if event.seq > self.seq_in + 1:
            self.stats.gaps += 1
            self._request_resend()
            raise SequenceGap(self.seq_in + 1, event.seq)
        self.seq_in = event.seq
        self._gap_requested = None
        self.queue.append(event)
        self._drain()

    def _request_resend(self):
        now = self._clock()
        wanted = self.seq_in + 1
        if self._gap_requested and self._gap_requested[0] == wanted and now - self._gap_requested[1] < self.chunk_timeout_s / 2:
            return
        self._gap_requested = (wanted, now)
        self._send(ErrorMessage(
            src_site=self.local_site, dst_site=self.peer_site, code=SequenceGap.code,
            detail="pool event gap", pool_id=self.pool.pool_id, resend_from=wanted,
        ))

    def resend_from(self, seq: int):
        now = self._clock()
        for s in range(seq, self.seq_out + 1):
            event = self.log.get(s)
            if event is not None:
                self.stats.resends += 1
                self._sent_at[s] = now
                self._send(event)

    def _resend_unacked(self, acked: int):
        # events the peer has not acknowledged for a while were probably lost
        now = self._clock()
        stale = [s for s in sorted(self.log) if s > acked and now - self._sent_at[s] >= config.SYNC_RESEND_AFTER_S]
        if stale:
            self.resend_from(stale[0])

    def _drain(self):
        while self.queue:
            event = self.queue[0]
            if (
                event.op == "inject"
                and event.generation == self.pool.generation
                and event.chunk_id not in self.staged
            ):
                if self._head_since is None:
                    self._head_since = self._clock()
                return
            self.queue.popleft()
            self._head_since = None
            self._apply(event)
            self.stats.events_applied += 1

    def _apply(self, event: PoolEvent):
        pool = self.pool
        if event.generation != pool.generation:
            logger.debug(f"[Sync] pool {pool.pool_id}: dropped {event.op} from generation {event.generation}")
            return
        op = event.op
        if op == "inject":
            data, _ = self.staged.pop(event.chunk_id)
            if len(data) != event.length_bytes:
                self._diverged(f"chunk {event.chunk_id} length differs")
                return
            pool.mirror_inject(data, event.victims)
            if pool.last_clobbered:
                for offset, length, session_id in pool.last_clobbered:
                    self.emit("abort", offset_bytes=offset, length_bytes=length, session_id=session_id)
                self.listener.sessions_lost([session_id for _, _, session_id in pool.last_clobbered])
            self.listener.material_added()
        elif op == "resolve":
            selection = KeySelectionInfo(pool.pool_id, event.generation, event.offset_bytes,
                                         event.length_bytes, event.session_id or 0)
            try:
                pool.resolve(selection)
            except (RaceConflict, InsufficientMaterial, StaleGeneration):
                pass
        elif op in ("confirm", "abort"):
            taken = pool.force_consume(event.offset_bytes, event.length_bytes)
            lost = [s for s in taken if s != event.session_id]
            if event.session_id in taken:
                self.listener.session_mirrored(event.session_id)
            if lost:
                self.listener.sessions_lost(lost)
            self.maybe_advance()
        elif op == "purge_all":
            self._purge_local("peer purge")
        elif op == "advance_ws":
            pool.advance_working_set(event.offset_bytes)
        elif op == "grow":
            pool.grow(event.length_bytes)
        elif op == "refresh":
            if self.leader:
                self.listener.refresh_requested()
                return
            key = pool.read(event.offset_bytes, event.length_bytes)
            lost = pool.force_consume(event.offset_bytes, event.length_bytes)
            if lost:
                self.listener.sessions_lost(lost)
            self.listener.refreshed(key)

    # ------------------------------------------------------------ digest

    def quiescent(self) -> bool:
        return not self.queue and not self.pool.reserved_sessions()

    def send_digest(self):
        self._since_digest = 0
        self._last_digest_at = self._clock()
        self._send(DigestMessage(
            src_site=self.local_site,
            dst_site=self.peer_site,
            pool_id=self.pool.pool_id,
            generation=self.pool.generation,
            seq_out=self.seq_out,
            seq_in=self.applied,
            quiescent=self.quiescent(),
            digest=self.pool.digest().hex(),
        ))

    def handle_digest(self, message: DigestMessage) -> bool:
        """
        Process the peer's checkpoint.

        Returns:
            True when the digests were compared and matched

        Raises:
            DigestMismatch: mirrors diverged; both sides purge
        """
        for s in [s for s in self.log if s <= message.seq_in]:
            del self.log[s]
            del self._sent_at[s]
        # the peer purged without us hearing about it
        while self.pool.generation < message.generation:
            self._purge_local(f"peer is in generation {message.generation}")
        if message.seq_out > self.seq_in:
            self._request_resend()
        self._resend_unacked(message.seq_in)
        if self.leader:
            # answer at most once per resend period so the exchange ends
            if self._clock() - self._last_digest_at >= config.SYNC_RESEND_AFTER_S:
                self.send_digest()
            return False
        self.send_digest()
        if not (
            message.generation == self.pool.generation
            and message.quiescent
            and self.quiescent()
            and message.seq_out == self.seq_in
            and message.seq_in == self.seq_out
        ):
            return False
        self.stats.digest_checks += 1
        local = self.pool.digest().hex()
        if local == message.digest:
            self.stats.checkpoints.append((self.pool.generation, local))
            return True
        self._diverged("digest mismatch")
        raise DigestMismatch(f"pool {self.pool.pool_id}: mirrors diverged in generation {message.generation}")

    def handle_error(self, message: ErrorMessage):
        """ERROR frames about this pool: resend requests and divergence notices"""
        if message.code == SequenceGap.code and message.resend_from is not None:
            self.resend_from(message.resend_from)
        elif message.code == DigestMismatch.code:
            if message.generation == self.pool.generation:
                self._purge_local("peer reported divergence")

    def _diverged(self, reason: str):
        self.stats.digest_mismatches += 1
        generation = self.pool.generation
        self._send(ErrorMessage(
            src_site=self.local_site, dst_site=self.peer_site, code=DigestMismatch.code,
            detail=reason, pool_id=self.pool.pool_id, generation=generation,
        ))
        self._purge_local(reason)

    def _purge_local(self, reason: str):
        logger.warning(f"[Sync] pool {self.pool.pool_id} ({self.local_site}<->{self.peer_site}): purge, {reason}")
        self.pool.purge_all(self._clock())
        self.stats.purges += 1
        self.queue = deque(e for e in self.queue if e.generation >= self.pool.generation)
        self._head_since = None
        self.listener.purged()
