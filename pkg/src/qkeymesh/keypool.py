# Quantum key pool: mirrored byte store with a segment lifecycle

"""
Quantum Key Pool for QKeyMesh

A pool holds the QKD-generated bytes shared by one pair of sites. Both sites
keep an instance; replaying the same operations on both yields the same digest.

Bytes move through Available -> Reserved -> Consumed (or straight to Consumed
on purge/overwrite protection), never backward. Offsets are absolute within a
generation; purge_all starts a new generation at offset 0.
"""

import bisect
import hashlib
import logging
import struct
from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterator, List, Optional, Sequence, Tuple

from . import config
from .errors import (
    InsufficientMaterial,
    PoolFull,
    RaceConflict,
    StaleGeneration,
    UnknownAllocation,
)

logger = logging.getLogger(__name__)


class SegmentState(Enum):
    """Lifecycle state of a run of pool bytes"""
    AVAILABLE = 0
    RESERVED = 1
    CONSUMED = 2


class AllocationEnd(Enum):
    """Which end of the working set an allocation is taken from"""
    BEGIN = "begin"
    END = "end"


@dataclass
class Segment:
    """Contiguous run of pool bytes sharing one state"""
    offset_bytes: int
    length_bytes: int
    state: SegmentState = SegmentState.AVAILABLE
    session_id: Optional[int] = None

    @property
    def end(self) -> int:
        return self.offset_bytes + self.length_bytes


@dataclass(frozen=True)
class Window:
    """Offset + length window over absolute pool offsets"""
    offset_bytes: int
    length_bytes: int

    @property
    def end(self) -> int:
        return self.offset_bytes + self.length_bytes

    def overlaps(self, other: "Window") -> bool:
        return self.offset_bytes < other.end and other.offset_bytes < self.end


@dataclass(frozen=True)
class KeyAllocation:
    """Reference to exactly one Reserved segment"""
    pool_id: int
    generation: int
    offset_bytes: int
    length_bytes: int
    session_id: int
    end_used: AllocationEnd = AllocationEnd.BEGIN

    @property
    def end(self) -> int:
        return self.offset_bytes + self.length_bytes


@dataclass(frozen=True)
class PoolDigest:
    """Fixed 32-byte fingerprint of a pool's generation, states and material"""
    generation: int
    digest: bytes

    def hex(self) -> str:
        return self.digest.hex()


class QuantumKeyPool:
    """
    Pairwise-mirrored store of QKD key bytes.

    A pool instance is single-writer: callers serialise operations on it.
    """

    def __init__(
        self,
        pool_id: int,
        capacity_bytes: int,
        sites: Tuple[str, str] = ("", ""),
        working_set_bytes: int = None,
        reserved_region_bytes: int = None,
        continuous_overwrite: bool = None,
        advance_fraction: float = None,
        max_age_s: Optional[float] = None,
        max_grants: Optional[int] = None,
        created_at: float = 0.0,
    ):
        """
        Args:
            pool_id: Site-pair identifier (fits the 4-digit hint field)
            capacity_bytes: Maximum bytes held (Available + Reserved)
            sites: The two site ids sharing this pool
            working_set_bytes: Allocation window size
            reserved_region_bytes: Bytes kept for inter-site key refresh
            continuous_overwrite: Overwrite oldest Available bytes when full
            advance_fraction: Consumed fraction that makes the working set advance
            max_age_s: Optional content expiry age
            max_grants: Optional content expiry after this many confirmed grants
            created_at: Simulation time the first generation started
        """
        if capacity_bytes <= 0:
            raise ValueError("capacity_bytes must be positive")
        self.pool_id = pool_id
        self.capacity_bytes = capacity_bytes
        self.sites = tuple(sites)
        self.working_set_bytes = working_set_bytes or config.WORKING_SET_BYTES
        self.reserved_region_bytes = (
            config.RESERVED_REGION_BYTES if reserved_region_bytes is None else reserved_region_bytes
        )
        self.continuous_overwrite = (
            config.CONTINUOUS_OVERWRITE if continuous_overwrite is None else continuous_overwrite
        )
        self.advance_fraction = advance_fraction or config.WORKING_SET_ADVANCE_FRACTION
        self.max_age_s = max_age_s
        self.max_grants = max_grants

        self.generation = 0
        self.last_overwrite_bytes = 0
        self.last_overwrite_victims: List[Tuple[int, int]] = []
        self.last_clobbered: List[Tuple[int, int, int]] = []
        self._reset(created_at)

    # ------------------------------------------------------------ state

    def _reset(self, now: float):
        self._base = 0
        self._material = bytearray()
        self._segments: List[Segment] = []
        self.reserved_region = Window(0, self.reserved_region_bytes)
        self.working_set = Window(self.reserved_region_bytes, self.working_set_bytes)
        self.grants_confirmed = 0
        self.generation_started_at = now

    @property
    def material_end(self) -> int:
        return self._base + len(self._material)

    @property
    def held_bytes(self) -> int:
        """Bytes still Available or Reserved"""
        return sum(s.length_bytes for s in self._segments if s.state is not SegmentState.CONSUMED)

    @property
    def available_bytes(self) -> int:
        return sum(s.length_bytes for s in self._segments if s.state is SegmentState.AVAILABLE)

    @property
    def free_bytes(self) -> int:
        return max(0, self.capacity_bytes - self.held_bytes)

    @property
    def fill_level(self) -> float:
        return self.held_bytes / self.capacity_bytes

    def segments(self) -> Tuple[Segment, ...]:
        """Copies of the segment table in offset order"""
        return tuple(replace(s) for s in self._segments)

    def reserved_sessions(self) -> List[int]:
        return [s.session_id for s in self._segments if s.state is SegmentState.RESERVED]

    # ------------------------------------------------------- inject / grow

    def inject(self, data: bytes) -> int:
        """
        Append QKD key bytes as a new Available segment.

        Returns:
            segment id (the absolute offset of the first byte written)

        Raises:
            PoolFull: capacity exhausted and overwrite disabled (or nothing left
                to overwrite)
        """
        if not data:
            raise ValueError("cannot inject an empty byte string")
        overflow = max(0, self.held_bytes + len(data) - self.capacity_bytes)
        if overflow and not self.continuous_overwrite:
            raise PoolFull(
                f"pool {self.pool_id}: {len(data)} bytes do not fit "
                f"({self.free_bytes} of {self.capacity_bytes} free)"
            )
        if overflow and self._overwritable_bytes() < overflow:
            raise PoolFull(f"pool {self.pool_id}: nothing left to overwrite")
        return self.mirror_inject(data, self._overwrite_victims(overflow) if overflow else ())

    def mirror_inject(self, data: bytes, victims: Sequence[Tuple[int, int]] = ()) -> int:
        """
        Replay an injection decided by the leader: lay the first bytes over the
        victim ranges (offset, length) it chose, append the rest. Capacity is
        not checked so a lagging mirror can follow its peer.

        Victim bytes still Available here take the new material and Consumed
        ones stay Consumed. A local reservation under a victim is consumed whole
        and reported in `last_clobbered` as (offset, length, session id).
        """
        view = memoryview(bytes(data))
        first_offset = None
        written = 0
        clobbered = {}
        for offset, length in victims:
            chunk = view[written: written + length]
            written += length
            if first_offset is None:
                first_offset = offset
            for seg in self._segments_between(offset, offset + length):
                lo, hi = max(seg.offset_bytes, offset), min(seg.end, offset + length)
                if seg.state is SegmentState.AVAILABLE:
                    self._material[lo - self._base: hi - self._base] = chunk[lo - offset: hi - offset]
                elif seg.state is SegmentState.RESERVED:
                    clobbered[seg.offset_bytes] = (seg.offset_bytes, seg.length_bytes, seg.session_id)
        self.last_overwrite_victims = [(offset, length) for offset, length in victims]
        self.last_overwrite_bytes = written
        self.last_clobbered = [clobbered[offset] for offset in sorted(clobbered)]
        for offset, length, session_id in self.last_clobbered:
            logger.info(f"[KeyPool] pool {self.pool_id}: overwrite took session {session_id} at {offset}")
            self._consume(offset, length)
        rest = view[written:]
        if rest.nbytes:
            offset = self.material_end
            self._material.extend(rest)
            self._segments.append(Segment(offset, rest.nbytes))
            if first_offset is None:
                first_offset = offset
        if written:
            logger.debug(f"[KeyPool] pool {self.pool_id}: overwrote {written} Available bytes")
        return first_offset

    def _overwritable(self) -> Iterator[Tuple[int, int]]:
        # Available bytes outside the working set and the reserved region, lowest first
        protected = (self.reserved_region, self.working_set)
        for seg in self._segments:
            if seg.state is not SegmentState.AVAILABLE:
                continue
            start = seg.offset_bytes
            while start < seg.end:
                stop = seg.end
                hit = None
                for window in protected:
                    if window.offset_bytes <= start < window.end:
                        hit = window
                        break
                if hit is not None:
                    start = hit.end
                    continue
                for window in protected:
                    if start < window.offset_bytes < stop:
                        stop = window.offset_bytes
                yield start, stop - start
                start = stop

    def _overwritable_bytes(self) -> int:
        return sum(length for _, length in self._overwritable())

    def _overwrite_victims(self, amount: int) -> List[Tuple[int, int]]:
        victims = []
        for offset, length in self._overwritable():
            take = min(length, amount)
            victims.append((offset, take))
            amount -= take
            if amount == 0:
                break
        return victims

    def grow(self, extra_bytes: int):
        """Enlarge the pool; the peer must apply the same growth"""
        if extra_bytes <= 0:
            raise ValueError("extra_bytes must be positive")
        self.capacity_bytes += extra_bytes
        logger.info(f"[KeyPool] pool {self.pool_id}: capacity grown to {self.capacity_bytes} bytes")

    # ------------------------------------------------------------ allocate

    def allocate(self, length_bytes: int, end: AllocationEnd, session_id: int) -> KeyAllocation:
        """
        Reserve `length_bytes` contiguous Available bytes from one end of the
        working set (from the whole remaining material for oversize requests).

        Raises:
            InsufficientMaterial: no Available run long enough
        """
        if length_bytes <= 0:
            raise ValueError("length_bytes must be positive")
        start, stop = self._allocation_window(length_bytes)
        runs = [r for r in self._available_runs(start, stop) if r[1] >= length_bytes]
        if not runs:
            raise InsufficientMaterial(
                f"pool {self.pool_id}: no {length_bytes}-byte Available run in [{start},{stop})"
            )
        if end is AllocationEnd.BEGIN:
            offset = runs[0][0]
        else:
            run_offset, run_length = runs[-1]
            offset = run_offset + run_length - length_bytes
        self._carve(offset, length_bytes, SegmentState.RESERVED, session_id)
        return KeyAllocation(self.pool_id, self.generation, offset, length_bytes, session_id, end)

    def allocate_reserved(self, length_bytes: int, session_id: int) -> KeyAllocation:
        """Reserve bytes from the inter-site key refresh region"""
        region = self.reserved_region
        runs = [r for r in self._available_runs(region.offset_bytes, region.end) if r[1] >= length_bytes]
        if not runs:
            raise InsufficientMaterial(f"pool {self.pool_id}: reserved region drained")
        offset = runs[0][0]
        self._carve(offset, length_bytes, SegmentState.RESERVED, session_id)
        return KeyAllocation(self.pool_id, self.generation, offset, length_bytes, session_id)

    def _allocation_window(self, length_bytes: int) -> Tuple[int, int]:
        ws = self.working_set
        if length_bytes > ws.length_bytes:
            return ws.offset_bytes, self.material_end
        return ws.offset_bytes, min(ws.end, self.material_end)

    def _available_runs(self, start: int, stop: int) -> List[Tuple[int, int]]:
        runs: List[Tuple[int, int]] = []
        for seg in self._segments_between(start, stop):
            if seg.state is not SegmentState.AVAILABLE:
                continue
            lo, hi = max(seg.offset_bytes, start), min(seg.end, stop)
            if hi <= lo:
                continue
            if runs and runs[-1][0] + runs[-1][1] == lo:
                runs[-1] = (runs[-1][0], runs[-1][1] + hi - lo)
            else:
                runs.append((lo, hi - lo))
        return runs

    # ------------------------------------------------------------- resolve

    def resolve(self, selection) -> KeyAllocation:
        """
        Reserve the bytes a peer's selection refers to, for the same session.

        Args:
            selection: KeySelectionInfo (pool_id, generation, offset, length, session)

        Raises:
            StaleGeneration: selection from an earlier generation
            InsufficientMaterial: bytes not injected here yet
            RaceConflict: bytes held by another session or already Consumed
        """
        if selection.generation != self.generation:
            raise StaleGeneration(
                f"pool {self.pool_id}: selection generation {selection.generation} != {self.generation}"
            )
        offset, length = selection.offset_bytes, selection.length_bytes
        if length <= 0 or offset < 0:
            raise RaceConflict(f"pool {self.pool_id}: empty or negative selection")
        if offset + length > self.material_end:
            raise InsufficientMaterial(
                f"pool {self.pool_id}: bytes [{offset},{offset + length}) not injected yet"
            )
        covered = list(self._segments_between(offset, offset + length))
        if offset < self._base or not covered:
            raise RaceConflict(f"pool {self.pool_id}: bytes at {offset} already consumed")
        if all(s.state is SegmentState.AVAILABLE for s in covered):
            self._carve(offset, length, SegmentState.RESERVED, selection.session_id)
            return KeyAllocation(self.pool_id, self.generation, offset, length, selection.session_id)
        if (
            len(covered) == 1
            and covered[0].state is SegmentState.RESERVED
            and covered[0].session_id == selection.session_id
            and covered[0].offset_bytes == offset
            and covered[0].length_bytes == length
        ):
            return KeyAllocation(self.pool_id, self.generation, offset, length, selection.session_id)
        raise RaceConflict(
            f"pool {self.pool_id}: bytes [{offset},{offset + length}) held by another session"
        )

    # ------------------------------------------------- confirm / abort / read

    def read(self, offset: int, length: int) -> bytes:
        """Key bytes at an offset; Consumed or trimmed bytes read as zero"""
        out = bytearray(length)
        lo = max(offset, self._base)
        hi = min(offset + length, self.material_end)
        if hi > lo:
            out[lo - offset: hi - offset] = self._material[lo - self._base: hi - self._base]
        return bytes(out)

    def key_bytes(self, allocation: KeyAllocation) -> bytes:
        self._reserved_segment(allocation)
        return self.read(allocation.offset_bytes, allocation.length_bytes)

    def confirm(self, allocation: KeyAllocation):
        """Consume and zeroize a Reserved allocation after the grant is confirmed"""
        self._reserved_segment(allocation)
        self._consume(allocation.offset_bytes, allocation.length_bytes)
        self.grants_confirmed += 1

    def abort(self, allocation: KeyAllocation):
        """Consume an allocation whose negotiation failed; it is never recycled"""
        self._reserved_segment(allocation)
        self._consume(allocation.offset_bytes, allocation.length_bytes)

    def force_consume(self, offset: int, length: int) -> List[int]:
        """
        Consume a range whatever its state (peer confirm/abort replay).

        Returns:
            session ids whose Reserved bytes were taken
        """
        lo = max(offset, self._base)
        hi = min(offset + length, self.material_end)
        if hi <= lo:
            return []
        taken = sorted({
            s.session_id for s in self._segments_between(lo, hi)
            if s.state is SegmentState.RESERVED and s.session_id is not None
        })
        self._consume(lo, hi - lo)
        return taken

    def _reserved_segment(self, allocation: KeyAllocation) -> Segment:
        if allocation.generation != self.generation or allocation.pool_id != self.pool_id:
            raise UnknownAllocation(f"pool {self.pool_id}: allocation from another generation")
        covered = list(self._segments_between(allocation.offset_bytes, allocation.end))
        if (
            len(covered) != 1
            or covered[0].state is not SegmentState.RESERVED
            or covered[0].session_id != allocation.session_id
            or covered[0].offset_bytes != allocation.offset_bytes
            or covered[0].length_bytes != allocation.length_bytes
        ):
            raise UnknownAllocation(
                f"pool {self.pool_id}: no Reserved segment for session {allocation.session_id} "
                f"at {allocation.offset_bytes}"
            )
        return covered[0]

    def _consume(self, offset: int, length: int):
        self._carve(offset, length, SegmentState.CONSUMED, None, require_available=False)
        start = offset - self._base
        self._material[start: start + length] = bytes(length)
        self._trim()

    # ---------------------------------------------------------- purge_all

    def purge_all(self, now: float = 0.0):
        """Zeroize everything and start a new generation"""
        self._material[:] = bytes(len(self._material))
        self.generation += 1
        self._reset(now)
        logger.info(f"[KeyPool] pool {self.pool_id}: purged, generation {self.generation}")

    def expired(self, now: float) -> bool:
        if self.max_age_s is not None and now - self.generation_started_at >= self.max_age_s:
            return True
        return self.max_grants is not None and self.grants_confirmed >= self.max_grants

    # --------------------------------------------------------- working set

    def working_set_due(self) -> bool:
        ws = self.working_set
        consumed = 0
        if ws.offset_bytes < self._base:
            consumed += min(self._base, ws.end) - ws.offset_bytes
        for seg in self._segments_between(ws.offset_bytes, ws.end):
            if seg.state is SegmentState.CONSUMED:
                consumed += min(seg.end, ws.end) - max(seg.offset_bytes, ws.offset_bytes)
        return consumed >= self.advance_fraction * ws.length_bytes

    def advance_working_set(self, start: Optional[int] = None) -> int:
        """
        Slide the working set to the first non-Consumed offset (or to `start`
        when replaying the peer's advance).
        """
        if start is None:
            start = self.material_end
            for seg in self._segments_between(self.working_set.offset_bytes, self.material_end):
                if seg.state is not SegmentState.CONSUMED:
                    start = max(seg.offset_bytes, self.working_set.offset_bytes)
                    break
        self.working_set = Window(start, self.working_set.length_bytes)
        logger.debug(f"[KeyPool] pool {self.pool_id}: working set now [{start},{self.working_set.end})")
        return start

    # -------------------------------------------------------------- digest

    def digest(self) -> PoolDigest:
        """SHA-256 over generation, canonical state runs and live material"""
        h = hashlib.new(config.POOL_DIGEST_ALGORITHM)
        h.update(struct.pack(">Q", self.generation))
        for offset, length, state, session in self._canonical_runs():
            h.update(struct.pack(">QQBQ", offset, length, state.value, session or 0))
            if state is not SegmentState.CONSUMED:
                h.update(self._material[offset - self._base: offset + length - self._base])
        return PoolDigest(self.generation, h.digest())

    def _canonical_runs(self) -> Iterator[Tuple[int, int, SegmentState, Optional[int]]]:
        runs: List[list] = []
        if self._base:
            runs.append([0, self._base, SegmentState.CONSUMED, None])
        for seg in self._segments:
            key = (seg.state, seg.session_id if seg.state is SegmentState.RESERVED else None)
            if runs and (runs[-1][2], runs[-1][3]) == key and runs[-1][0] + runs[-1][1] == seg.offset_bytes:
                runs[-1][1] += seg.length_bytes
            else:
                runs.append([seg.offset_bytes, seg.length_bytes, key[0], key[1]])
        for run in runs:
            yield tuple(run)

    # ----------------------------------------------------- segment helpers

    def _segments_between(self, start: int, stop: int) -> Iterator[Segment]:
        idx = bisect.bisect_right(self._segments, start, key=lambda s: s.offset_bytes) - 1
        idx = max(idx, 0)
        while idx < len(self._segments):
            seg = self._segments[idx]
            if seg.offset_bytes >= stop:
                break
            if seg.end > start:
                yield seg
            idx += 1

    def _split_at(self, pos: int):
        idx = bisect.bisect_right(self._segments, pos, key=lambda s: s.offset_bytes) - 1
        if idx < 0:
            return
        seg = self._segments[idx]
        if seg.offset_bytes < pos < seg.end:
            tail = Segment(pos, seg.end - pos, seg.state, seg.session_id)
            seg.length_bytes = pos - seg.offset_bytes
            self._segments.insert(idx + 1, tail)

    def _carve(self, offset: int, length: int, state: SegmentState, session_id: Optional[int],
               require_available: bool = True):
        if offset < self._base or offset + length > self.material_end:
            raise InsufficientMaterial(f"pool {self.pool_id}: [{offset},{offset + length}) outside material")
        self._split_at(offset)
        self._split_at(offset + length)
        lo = bisect.bisect_left(self._segments, offset, key=lambda s: s.offset_bytes)
        hi = bisect.bisect_left(self._segments, offset + length, key=lambda s: s.offset_bytes)
        covered = self._segments[lo:hi]
        if require_available and any(s.state is not SegmentState.AVAILABLE for s in covered):
            raise RaceConflict(f"pool {self.pool_id}: [{offset},{offset + length}) not Available")
        for seg in covered:
            if seg.state.value > state.value:
                raise RaceConflict(f"pool {self.pool_id}: lifecycle cannot go backward at {seg.offset_bytes}")
        self._segments[lo:hi] = [Segment(offset, length, state, session_id)]
        if state is SegmentState.CONSUMED:
            self._merge_consumed(lo)

    def _merge_consumed(self, idx: int):
        if idx + 1 < len(self._segments) and self._segments[idx + 1].state is SegmentState.CONSUMED:
            nxt = self._segments.pop(idx + 1)
            self._segments[idx].length_bytes += nxt.length_bytes
        if idx > 0 and self._segments[idx - 1].state is SegmentState.CONSUMED:
            cur = self._segments.pop(idx)
            self._segments[idx - 1].length_bytes += cur.length_bytes

    def _trim(self):
        # Drop a Consumed prefix; the reserved region's window keeps its offsets
        if self._segments and self._segments[0].state is SegmentState.CONSUMED:
            head = self._segments.pop(0)
            del self._material[: head.end - self._base]
            self._base = head.end

    def __repr__(self):
        return (
            f"QuantumKeyPool(id={self.pool_id}, gen={self.generation}, "
            f"held={self.held_bytes}/{self.capacity_bytes}, segments={len(self._segments)})"
        )
