# Simulated QKD link layer

"""
Link Layer Module for QKeyMesh
Rate-limited symmetric key sources standing in for QKD hardware. Each link
produces identical bytes for both endpoints from its own seeded stream, only
inside its availability windows, with a fractional-bit carry so the output
never drifts from the configured rate.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import LinkDown
from .qnl.routing import Link, link_key

logger = logging.getLogger(__name__)


@dataclass
class QuantumLinkConfig:
    """One quantum link as configured in a scenario"""
    endpoints: Tuple[str, str]
    max_rate_bits_per_s: float
    current_rate_bits_per_s: Optional[float] = None
    availability_windows: Optional[List[Tuple[float, float]]] = None
    failure_schedule: List[Tuple[float, Optional[float]]] = field(default_factory=list)

    def __post_init__(self):
        if self.max_rate_bits_per_s <= 0:
            raise ValueError(f"link {self.endpoints}: rate must be positive")
        self.endpoints = link_key(*self.endpoints)
        if self.current_rate_bits_per_s is None:
            self.current_rate_bits_per_s = self.max_rate_bits_per_s
        self.current_rate_bits_per_s = min(self.current_rate_bits_per_s, self.max_rate_bits_per_s)

    @classmethod
    def from_dict(cls, data: dict) -> "QuantumLinkConfig":
        return cls(
            endpoints=tuple(data["endpoints"]),
            max_rate_bits_per_s=float(data["rate_bits_per_s"]),
            current_rate_bits_per_s=data.get("current_rate_bits_per_s"),
            availability_windows=[tuple(w) for w in data["windows"]] if data.get("windows") else None,
            failure_schedule=[(f["at_s"], f.get("restore_at_s")) for f in data.get("failures", [])],
        )


@dataclass(frozen=True)
class LinkIndication:
    """Error indication or capacity report sent up to both endpoint QNLs"""
    link: Link
    kind: str  # down | up | capacity
    capacity_bits_per_s: float


class QuantumLink:
    """Simulated key source for one link"""

    def __init__(self, config: QuantumLinkConfig, rng: np.random.Generator):
        self.config = config
        self.rng = rng
        self.up = True
        self.clock = 0.0
        self.carry_bits = 0.0
        self.generated_bytes = 0

    @property
    def link(self) -> Link:
        return self.config.endpoints

    @property
    def capacity(self) -> float:
        """Rate reported upward (0 while down)"""
        return self.config.current_rate_bits_per_s if self.up else 0.0

    def active_seconds(self, start: float, end: float) -> float:
        """Length of [start, end) inside the availability windows"""
        windows = self.config.availability_windows
        if windows is None:
            return max(0.0, end - start)
        return sum(max(0.0, min(end, w_end) - max(start, w_start)) for w_start, w_end in windows)

    def tick(self, dt_s: float) -> bytes:
        """
        Generate key for the next dt_s seconds of link time.

        Raises:
            LinkDown: the link failed (no bytes, clock still advances)
        """
        start, self.clock = self.clock, self.clock + dt_s
        if not self.up:
            raise LinkDown(f"link {self.link[0]}-{self.link[1]} is down")
        bits = self.config.current_rate_bits_per_s * self.active_seconds(start, self.clock) + self.carry_bits
        count = int(math.floor(bits / 8))
        self.carry_bits = bits - 8 * count
        self.generated_bytes += count
        return self.rng.bytes(count) if count else b""

    def set_qos(self, requested_rate: float) -> float:
        achieved = max(0.0, min(float(requested_rate), self.config.max_rate_bits_per_s))
        self.config.current_rate_bits_per_s = achieved
        logger.debug(f"[QLL] {self.link[0]}-{self.link[1]}: rate set to {achieved} bits/s")
        return achieved

    def fail(self):
        self.up = False
        self.carry_bits = 0.0

    def restore(self):
        self.up = True


class LinkLayer:
    """All quantum links of a run"""

    def __init__(
        self,
        configs: Sequence[QuantumLinkConfig],
        stream_for: Callable[[str], np.random.Generator],
        deliver: Callable[[Link, bytes], None] = None,
        indicate: Callable[[str, LinkIndication], None] = None,
    ):
        """
        Args:
            configs: Link definitions
            stream_for: Named random stream factory ("link:a|b")
            deliver: Receives (link, bytes) once per tick; the bytes go to both endpoints
            indicate: Receives (endpoint node, indication)
        """
        self.links: Dict[Link, QuantumLink] = {}
        for cfg in sorted(configs, key=lambda c: c.endpoints):
            a, b = cfg.endpoints
            self.links[cfg.endpoints] = QuantumLink(cfg, stream_for(f"link:{a}|{b}"))
        self._deliver = deliver or (lambda link, data: None)
        self._indicate = indicate or (lambda node, indication: None)

    def get(self, a: str, b: str) -> QuantumLink:
        return self.links[link_key(a, b)]

    def tick(self, link: Link, dt_s: float) -> int:
        """Advance one link; returns the generated byte count (0 while down)"""
        try:
            data = self.links[link_key(*link)].tick(dt_s)
        except LinkDown:
            return 0
        if data:
            self._deliver(link_key(*link), data)
        return len(data)

    def set_qos(self, link: Link, requested_rate: float) -> float:
        quantum_link = self.links[link_key(*link)]
        achieved = quantum_link.set_qos(requested_rate)
        self._report(quantum_link, "capacity")
        return achieved

    def fail_link(self, link: Link):
        quantum_link = self.links[link_key(*link)]
        if not quantum_link.up:
            return
        quantum_link.fail()
        logger.info(f"[QLL] link {quantum_link.link[0]}-{quantum_link.link[1]} failed")
        self._report(quantum_link, "down")

    def restore_link(self, link: Link):
        quantum_link = self.links[link_key(*link)]
        if quantum_link.up:
            return
        quantum_link.restore()
        logger.info(f"[QLL] link {quantum_link.link[0]}-{quantum_link.link[1]} restored")
        self._report(quantum_link, "up")

    def _report(self, quantum_link: QuantumLink, kind: str):
        indication = LinkIndication(quantum_link.link, kind, quantum_link.capacity)
        for node in quantum_link.link:
            self._indicate(node, indication)

    def capacities(self) -> Dict[Link, float]:
        return {link: ql.capacity for link, ql in self.links.items()}
