# Discrete-event kernel, random streams and message transport

"""
Simulation Engine Module for QKeyMesh

A simpy environment with an ordered event trace, named seeded random streams
and the simulated conventional and data-plane channels between nodes.
"""

import hashlib
import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np
import simpy

from .. import config
from ..errors import UnknownChannel
from ..wire import WireMessage, decode_frame, encode_frame

logger = logging.getLogger(__name__)

CHANNELS = ("conventional", "data_plane")


@dataclass(frozen=True, order=True)
class Event:
    """One executed simulator step, ordered by (timestamp, tiebreak)"""
    timestamp_s: float
    sequence_tiebreak: int
    target: str = field(compare=False)
    kind: str = field(compare=False)
    payload: object = field(default=None, compare=False)

    def trace_line(self) -> str:
        return f"{self.timestamp_s:.6f} {self.sequence_tiebreak} {self.target} {self.kind}"


class Simulator:
    """
    simpy environment plus an event trace.

    Every callback goes through schedule(); its tiebreak is drawn when it is
    scheduled, matching simpy's own insertion order for equal timestamps.
    """

    def __init__(self, trace: bool = False):
        self.env = simpy.Environment()
        self._tiebreak = itertools.count()
        self.trace: Optional[List[Event]] = [] if trace else None
        self.executed = 0

    @property
    def now(self) -> float:
        return self.env.now

    def clock(self) -> float:
        return self.env.now

    def schedule(self, delay_s: float, target: str, kind: str, callback: Callable[[], None],
                 payload: object = None) -> Event:
        if delay_s < 0:
            raise ValueError(f"cannot schedule {kind} in the past ({delay_s})")
        event = Event(self.env.now + delay_s, next(self._tiebreak), target, kind, payload)
        timeout = self.env.timeout(delay_s)
        timeout.callbacks.append(lambda _: self._fire(event, callback))
        return event

    def _fire(self, event: Event, callback: Callable[[], None]):
        self.executed += 1
        if self.trace is not None:
            self.trace.append(event)
        callback()

    def every(self, interval_s: float, target: str, kind: str, callback: Callable[[], None],
              start_s: float = 0.0):
        """Run `callback` at start_s and then every interval_s"""
        if interval_s <= 0:
            raise ValueError("interval must be positive")

        def tick():
            callback()
            self.schedule(interval_s, target, kind, tick)

        self.schedule(start_s, target, kind, tick)

    def process(self, generator, target: str, kind: str):
        """Start a simpy process and trace its start"""
        self.note(target, kind)
        return self.env.process(generator)

    def note(self, target: str, kind: str, payload: object = None):
        """Trace a step executed inside a process"""
        event = Event(self.env.now, next(self._tiebreak), target, kind, payload)
        self.executed += 1
        if self.trace is not None:
            self.trace.append(event)

    def run(self, until_s: float):
        if until_s > 0:
            self.env.run(until=until_s)


class RandomStreams:
    """Independent numpy generators derived from one seed by stream name"""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: Dict[str, np.random.Generator] = {}

    @staticmethod
    def _spawn_key(name: str) -> Tuple[int, ...]:
        digest = hashlib.sha256(name.encode()).digest()
        return tuple(int.from_bytes(digest[i:i + 4], "big") for i in range(0, 16, 4))

    def get(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            sequence = np.random.SeedSequence(self.seed, spawn_key=self._spawn_key(name))
            self._streams[name] = np.random.default_rng(sequence)
        return self._streams[name]

    __call__ = get


@dataclass(frozen=True)
class ChannelModel:
    latency_s: float
    jitter_s: float = 0.0
    drop_probability: float = 0.0

    @classmethod
    def from_dict(cls, data: Mapping) -> "ChannelModel":
        return cls(
            latency_s=float(data.get("latency_s", config.CONVENTIONAL_LATENCY_S)),
            jitter_s=float(data.get("jitter_s", 0.0)),
            drop_probability=float(data.get("drop_probability", 0.0)),
        )


def default_channels() -> Dict[str, ChannelModel]:
    return {
        "conventional": ChannelModel(config.CONVENTIONAL_LATENCY_S),
        "data_plane": ChannelModel(config.DATA_PLANE_LATENCY_S),
    }


@dataclass
class TransportStats:
    sent: Dict[str, int] = field(default_factory=lambda: {c: 0 for c in CHANNELS})
    dropped: Dict[str, int] = field(default_factory=lambda: {c: 0 for c in CHANNELS})
    delivered: Dict[str, int] = field(default_factory=lambda: {c: 0 for c in CHANNELS})
    frame_bytes: Dict[str, int] = field(default_factory=lambda: {c: 0 for c in CHANNELS})


class Transport:
    """
    Simulated channels between nodes.

    Messages are framed and decoded again on delivery. Delivery order per
    (channel, src, dst) is FIFO even with jitter.
    """

    def __init__(
        self,
        sim: Simulator,
        streams: RandomStreams,
        channels: Optional[Mapping[str, ChannelModel]] = None,
        deliver: Callable[[str, str, str, WireMessage], None] = None,
    ):
        """
        Args:
            sim: Simulator the deliveries are scheduled on
            streams: Random streams (jitter and drops use "channel:<name>")
            channels: Channel name -> latency/jitter/drop model
            deliver: Called as deliver(channel, src, dst, message)
        """
        self.sim = sim
        self.streams = streams
        self.channels = dict(channels or default_channels())
        self._deliver = deliver or (lambda channel, src, dst, message: None)
        self._last_arrival: Dict[Tuple[str, str, str], float] = {}
        self._scripted_drops: Dict[Tuple[str, str, str], int] = {}
        self.stats = TransportStats()

    def set_deliver(self, deliver: Callable[[str, str, str, WireMessage], None]):
        self._deliver = deliver

    def drop_next(self, channel: str, src: str, dst: str, count: int = 1):
        """Drop the next `count` messages on one channel direction"""
        key = (channel, src, dst)
        self._scripted_drops[key] = self._scripted_drops.get(key, 0) + count

    def send(self, message: WireMessage, channel: str, src: str, dst: str):
        """
        Raises:
            UnknownChannel: channel not configured
        """
        model = self.channels.get(channel)
        if model is None:
            raise UnknownChannel(f"channel {channel!r} not configured")
        frame = encode_frame(message)
        self.stats.sent[channel] = self.stats.sent.get(channel, 0) + 1
        self.stats.frame_bytes[channel] = self.stats.frame_bytes.get(channel, 0) + len(frame)
        key = (channel, src, dst)
        rng = self.streams.get(f"channel:{channel}")
        if self._scripted_drops.get(key):
            self._scripted_drops[key] -= 1
            self._dropped(channel, src, dst, message)
            return
        if model.drop_probability > 0 and rng.random() < model.drop_probability:
            self._dropped(channel, src, dst, message)
            return
        latency = model.latency_s + (rng.uniform(0.0, model.jitter_s) if model.jitter_s > 0 else 0.0)
        arrival = max(self.sim.now + max(latency, config.MIN_LATENCY_S), self._last_arrival.get(key, 0.0))
        self._last_arrival[key] = arrival
        self.sim.schedule(arrival - self.sim.now, dst, message.type,
                          lambda: self._arrive(channel, src, dst, frame))

    def _dropped(self, channel: str, src: str, dst: str, message: WireMessage):
        self.stats.dropped[channel] = self.stats.dropped.get(channel, 0) + 1
        logger.debug(f"[Sim] dropped {message.type} {src}->{dst} on {channel}")

    def _arrive(self, channel: str, src: str, dst: str, frame: bytes):
        self.stats.delivered[channel] = self.stats.delivered.get(channel, 0) + 1
        self._deliver(channel, src, dst, decode_frame(frame))
