# Security policy rules and enforcement

"""
Security Policy Module for QKeyMesh
Maps host pairs to a security class, key length, lifetime and relay tactics
"""

from dataclasses import dataclass, field
from enum import IntEnum
from fnmatch import fnmatchcase
from typing import List, Optional, Sequence, Union

from .. import config
from ..errors import PolicyDenied


class SecurityClass(IntEnum):
    """How quantum key material is used for a session"""
    CLASSICAL = 0  # classical key generation fallback
    HOST_KEY = 1  # one host-specific key for all sessions
    EXPANDABLE = 2  # session key, expanded when the pool runs dry
    SESSION = 3  # session key, no refresh
    SESSION_REFRESH = 4  # session key refreshed every lifetime (default)
    ONE_TIME_PAD = 5  # key bytes equal to payload bytes


@dataclass(frozen=True)
class DirectOnly:
    """Only a direct quantum link to the remote site may generate keys"""
    name: str = "direct"

    @property
    def max_hops(self) -> int:
        return 1

    @property
    def path_count(self) -> int:
        return 1


@dataclass(frozen=True)
class SinglePath:
    """Trusted-node relay along one path"""
    max_hops: Optional[int] = None
    name: str = "single"

    @property
    def path_count(self) -> int:
        return 1


@dataclass(frozen=True)
class MultiPath:
    """Key parts over several node-disjoint paths, combined by XOR"""
    path_count: int = 2
    max_hops: Optional[int] = None
    name: str = "multi"


RelayTactics = Union[DirectOnly, SinglePath, MultiPath]


def tactics_from_dict(data: Optional[dict]) -> RelayTactics:
    """Build relay tactics from a scenario policy entry"""
    if not data:
        return SinglePath()
    kind = data.get("kind", "single")
    if kind == "direct":
        return DirectOnly()
    if kind == "multi":
        return MultiPath(path_count=int(data.get("path_count", 2)), max_hops=data.get("max_hops"))
    return SinglePath(max_hops=data.get("max_hops"))


@dataclass(frozen=True)
class SecurityPolicy:
    """One policy rule; host and site fields are glob patterns"""
    security_class: SecurityClass = SecurityClass.SESSION_REFRESH
    min_key_length_bytes: int = config.DEFAULT_MIN_KEY_LENGTH_BYTES
    max_lifetime_s: float = config.DEFAULT_MAX_LIFETIME_S
    refresh_interval_s: Optional[float] = None
    relay_tactics: RelayTactics = field(default_factory=SinglePath)
    src_hosts: str = "*"
    dst_hosts: str = "*"
    src_sites: str = "*"
    dst_sites: str = "*"
    allow: bool = True

    def matches(self, src_host: str, dst_host: str, src_site: str = "", dst_site: str = "") -> bool:
        return (
            fnmatchcase(src_host, self.src_hosts)
            and fnmatchcase(dst_host, self.dst_hosts)
            and fnmatchcase(src_site, self.src_sites)
            and fnmatchcase(dst_site, self.dst_sites)
        )

    @classmethod
    def from_dict(cls, data: dict) -> "SecurityPolicy":
        return cls(
            security_class=SecurityClass(int(data.get("class", SecurityClass.SESSION_REFRESH))),
            min_key_length_bytes=int(data.get("min_key_length_bytes", config.DEFAULT_MIN_KEY_LENGTH_BYTES)),
            max_lifetime_s=float(data.get("max_lifetime_s", config.DEFAULT_MAX_LIFETIME_S)),
            refresh_interval_s=data.get("refresh_interval_s"),
            relay_tactics=tactics_from_dict(data.get("relay_tactics")),
            src_hosts=data.get("src_hosts", "*"),
            dst_hosts=data.get("dst_hosts", "*"),
            src_sites=data.get("src_sites", "*"),
            dst_sites=data.get("dst_sites", "*"),
            allow=bool(data.get("allow", True)),
        )


@dataclass(frozen=True)
class KeyRequestParams:
    """What a host asks for"""
    key_length_bytes: int = config.DEFAULT_MIN_KEY_LENGTH_BYTES
    lifetime_s: float = config.DEFAULT_MAX_LIFETIME_S
    security_class: Optional[SecurityClass] = None
    payload_bytes: int = 0
    session_duration_s: Optional[float] = None


@dataclass(frozen=True)
class EffectiveParams:
    """Request parameters after policy enforcement"""
    security_class: SecurityClass
    key_length_bytes: int
    lifetime_s: float
    refresh_interval_s: Optional[float]
    relay_tactics: RelayTactics
    payload_bytes: int = 0
    policy_defined: bool = True

    @property
    def pool_bytes(self) -> int:
        """Pool bytes one grant draws (class 5 draws the payload size)"""
        if self.security_class is SecurityClass.ONE_TIME_PAD:
            return self.payload_bytes
        return self.key_length_bytes


class PolicyDatabase:
    """Ordered policy rules; the first match wins"""

    def __init__(self, policies: Sequence[SecurityPolicy] = ()):
        self.policies: List[SecurityPolicy] = list(policies)

    def add(self, policy: SecurityPolicy):
        self.policies.append(policy)

    def lookup(self, src_host: str, dst_host: str, src_site: str = "", dst_site: str = "") -> Optional[SecurityPolicy]:
        for policy in self.policies:
            if policy.matches(src_host, dst_host, src_site, dst_site):
                return policy
        return None

    def tactics_for_sites(self, src_site: str, dst_site: str) -> RelayTactics:
        """Strictest relay tactics any rule imposes on a site pair"""
        chosen: RelayTactics = SinglePath()
        for policy in self.policies:
            if not policy.allow:
                continue
            if fnmatchcase(src_site, policy.src_sites) and fnmatchcase(dst_site, policy.dst_sites):
                if _strictness(policy.relay_tactics) > _strictness(chosen):
                    chosen = policy.relay_tactics
        return chosen

    @classmethod
    def from_list(cls, entries: Sequence[dict]) -> "PolicyDatabase":
        return cls([SecurityPolicy.from_dict(e) for e in entries])


def _strictness(tactics: RelayTactics) -> int:
    if isinstance(tactics, DirectOnly):
        return 3
    if isinstance(tactics, MultiPath):
        return 2
    return 1 if tactics.max_hops is not None else 0


def enforce_policy(
    policy_db: PolicyDatabase,
    src_host: str,
    dst_host: str,
    requested: KeyRequestParams,
    src_site: str = "",
    dst_site: str = "",
) -> EffectiveParams:
    """
    Apply the matching policy to a key request.

    Key length is raised to the policy minimum, lifetime capped at the policy
    maximum, and the class raised to the policy class. Without a policy the
    request runs under the default class.

    Raises:
        PolicyDenied: a matching rule forbids the host pair
    """
    policy = policy_db.lookup(src_host, dst_host, src_site, dst_site)
    if policy is not None and not policy.allow:
        raise PolicyDenied(f"policy forbids {src_host} -> {dst_host}")

    if policy is None:
        policy = SecurityPolicy(security_class=SecurityClass(config.DEFAULT_SECURITY_CLASS))
        defined = False
        security_class = requested.security_class if requested.security_class is not None else policy.security_class
    else:
        defined = True
        security_class = max(requested.security_class or 0, policy.security_class)
    security_class = SecurityClass(security_class)

    if security_class is SecurityClass.ONE_TIME_PAD and requested.payload_bytes <= 0:
        raise PolicyDenied("one-time-pad class needs the payload size")

    key_length = max(requested.key_length_bytes, policy.min_key_length_bytes)
    lifetime = min(requested.lifetime_s, policy.max_lifetime_s)
    refresh = None
    if security_class in (SecurityClass.SESSION_REFRESH, SecurityClass.CLASSICAL):
        refresh = policy.refresh_interval_s or lifetime

    return EffectiveParams(
        security_class=security_class,
        key_length_bytes=key_length,
        lifetime_s=lifetime,
        refresh_interval_s=refresh,
        relay_tactics=policy.relay_tactics,
        payload_bytes=requested.payload_bytes,
        policy_defined=defined,
    )


def check_relay_tactics(tactics: RelayTactics, topology, src_site: str, dst_site: str):
    """
    Verify the topology can generate keys for a site pair under the tactics.

    Raises:
        PolicyDenied: no direct link, no path within the hop limit, or too few
            node-disjoint paths
    """
    from ..qnl.routing import disjoint_paths, hop_limited_paths

    if isinstance(tactics, DirectOnly):
        if not topology.has_link(src_site, dst_site):
            raise PolicyDenied(f"{src_site}-{dst_site}: direct link required, none exists")
        return
    if isinstance(tactics, MultiPath):
        paths = disjoint_paths(topology, src_site, dst_site, tactics.path_count, tactics.max_hops)
        if len(paths) < tactics.path_count:
            raise PolicyDenied(
                f"{src_site}-{dst_site}: {tactics.path_count} disjoint paths required, {len(paths)} found"
            )
        return
    if not hop_limited_paths(topology, src_site, dst_site, tactics.max_hops, limit=1):
        raise PolicyDenied(f"{src_site}-{dst_site}: no path within {tactics.max_hops} hops")
