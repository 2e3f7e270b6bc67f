# Host traffic generation

"""
Workload Module for QKeyMesh
Pre-generates the session key requests hosts make during a run
"""

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .. import config
from ..kms.policy import SecurityClass


@dataclass
class HostWorkload:
    """Arrival process and request shape of one host"""
    host_id: str
    site: str
    rate_per_s: Optional[float] = None  # Poisson arrivals
    schedule: Optional[List[float]] = None  # fixed arrival times
    peers: Dict[str, float] = field(default_factory=dict)  # remote host -> weight
    class_mix: Dict[int, float] = field(default_factory=lambda: {int(SecurityClass.SESSION_REFRESH): 1.0})
    key_length_bytes: int = config.DEFAULT_MIN_KEY_LENGTH_BYTES
    lifetime_s: float = config.DEFAULT_MAX_LIFETIME_S
    session_duration_s: float = 30.0
    payload_bytes: int = 1024  # mean class-5 message size

    @classmethod
    def from_dict(cls, data: Mapping, host_id: str, site: str) -> "HostWorkload":
        peers = data.get("peers", {})
        if isinstance(peers, list):
            peers = {p: 1.0 for p in peers}
        return cls(
            host_id=host_id,
            site=site,
            rate_per_s=data.get("rate_per_s"),
            schedule=sorted(float(t) for t in data["schedule"]) if data.get("schedule") is not None else None,
            peers={p: float(w) for p, w in peers.items()},
            class_mix={int(c): float(w) for c, w in data.get("class_mix", {"4": 1.0}).items()},
            key_length_bytes=int(data.get("key_length_bytes", config.DEFAULT_MIN_KEY_LENGTH_BYTES)),
            lifetime_s=float(data.get("lifetime_s", config.DEFAULT_MAX_LIFETIME_S)),
            session_duration_s=float(data.get("session_duration_s", 30.0)),
            payload_bytes=int(data.get("payload_bytes", 1024)),
        )


@dataclass(frozen=True)
class KeyRequestEvent:
    """One session a host opens"""
    time_s: float
    host_id: str
    remote_host_id: str
    security_class: SecurityClass
    key_length_bytes: int
    lifetime_s: float
    session_duration_s: float
    payload_bytes: int = 0


def arrival_times(workload: HostWorkload, duration_s: float, rng: np.random.Generator) -> List[float]:
    if workload.schedule is not None:
        return [t for t in workload.schedule if 0 <= t < duration_s]
    if not workload.rate_per_s or workload.rate_per_s <= 0:
        return []
    times, now = [], 0.0
    while True:
        now += rng.exponential(1.0 / workload.rate_per_s)
        if now >= duration_s:
            return times
        times.append(now)


def generate_host_traffic(workload: HostWorkload, duration_s: float,
                          rng: np.random.Generator) -> List[KeyRequestEvent]:
    """
    Key requests of one host over a run.

    Args:
        workload: Arrival process, peers and class mix
        duration_s: Run length
        rng: The host's workload stream

    Returns:
        Requests in time order; empty without peers or arrivals
    """
    if not workload.peers:
        return []
    peers = sorted(workload.peers)
    peer_weights = np.array([workload.peers[p] for p in peers], dtype=float)
    classes = sorted(workload.class_mix)
    class_weights = np.array([workload.class_mix[c] for c in classes], dtype=float)

    events = []
    for t in arrival_times(workload, duration_s, rng):
        peer = peers[rng.choice(len(peers), p=peer_weights / peer_weights.sum())]
        security_class = SecurityClass(classes[rng.choice(len(classes), p=class_weights / class_weights.sum())])
        payload = 0
        if security_class is SecurityClass.ONE_TIME_PAD:
            payload = max(1, int(round(rng.exponential(workload.payload_bytes))))
        events.append(KeyRequestEvent(
            time_s=float(t),
            host_id=workload.host_id,
            remote_host_id=peer,
            security_class=security_class,
            key_length_bytes=workload.key_length_bytes,
            lifetime_s=workload.lifetime_s,
            session_duration_s=workload.session_duration_s,
            payload_bytes=payload,
        ))
    return events


def merge_traffic(streams: Sequence[List[KeyRequestEvent]]) -> List[KeyRequestEvent]:
    """All hosts' requests in (time, host) order"""
    return sorted((e for events in streams for e in events), key=lambda e: (e.time_s, e.host_id))
