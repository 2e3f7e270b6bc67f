# One simulated site: KMS, QNL planes and the local hosts

"""
Site Node Module for QKeyMesh

Wires the KMS, the QNL control and data planes of one site to the simulated
transport and runs the session lifecycle of every local host as a simpy
process:

    request key -> wait for confirmation -> begin traffic
                -> refresh every refresh interval until the session ends

Hosts back off and retry while the pool is empty and retry at once after a
failed negotiation (direct-mode races).
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple

from .. import config
from ..errors import (
    InsufficientMaterial,
    InvariantViolation,
    KmsError,
    PolicyDenied,
    QKeyMeshError,
    RemoteUnconfirmed,
)
from ..kms.policy import KeyRequestParams
from ..kms.service import HostNotice, KeyManagementService
from ..qll import LinkIndication
from ..qnl.control import ControlPlane
from ..qnl.relay import DataPlane
from ..wire import (
    DigestMessage,
    ErrorMessage,
    HelloMessage,
    KeyConfirm,
    KeyNegotiation,
    KgmMessage,
    LsaMessage,
    PoolEvent,
    SealedFrame,
    TokenConfirm,
    WireMessage,
)
from .engine import RandomStreams, Simulator, Transport
from .workload import KeyRequestEvent

logger = logging.getLogger(__name__)

KMS_MESSAGES = (KeyNegotiation, KeyConfirm, TokenConfirm, PoolEvent, DigestMessage)
CONTROL_MESSAGES = (SealedFrame, KgmMessage, LsaMessage, HelloMessage)


@dataclass
class NodeStats:
    sessions_started: int = 0
    sessions_completed: int = 0
    sessions_abandoned: int = 0
    host_retries: int = 0
    session_refreshes: int = 0
    refresh_failures: int = 0
    keys_pushed: int = 0


class SiteNode:
    """Everything running at one site"""

    def __init__(
        self,
        site_id: str,
        sim: Simulator,
        transport: Transport,
        streams: RandomStreams,
        sites: Sequence[str],
        hosts: Mapping[str, str],
        neighbors: Mapping[str, float],
        policy_db=None,
        mode: str = None,
        pool_options: Optional[dict] = None,
        qnl_options: Optional[dict] = None,
        priorities: Optional[Mapping[str, float]] = None,
        demand_targets: Sequence[str] = (),
        ledger: Optional[Callable[..., None]] = None,
        audit: Optional[Callable[[str, str, str, bytes], None]] = None,
        peer_key: Optional[Callable[[str, int], Optional[bytes]]] = None,
    ):
        """
        Args:
            site_id: This site
            sim: Simulator the node's processes run on
            transport: Simulated channels
            streams: Named seeded random streams of the run
            sites: All sites of the network
            hosts: Host -> site, for every host of the network
            neighbors: Quantum neighbours -> link rate in bits/s
            ledger: Grant ledger the KMS reports consumed ranges to
            audit: Told of every key chunk the data plane hands to the KMS
            peer_key: Looks up (remote site, session id) -> key held remotely
        """
        self.site_id = site_id
        self.sim = sim
        self.transport = transport
        self.hosts = dict(hosts)
        qnl_options = dict(qnl_options or {})
        self._audit = audit
        self._peer_key = peer_key
        self._waiting: Dict[int, object] = {}
        self._notices: Dict[int, HostNotice] = {}
        self.stats = NodeStats()

        self.control = ControlPlane(
            site_id, neighbors, self._send, sim.clock, streams(f"control:{site_id}"),
            executor=self._execute, qnl_options=qnl_options,
            transit_backlog=lambda: self.data.transit_backlog(),
        )
        self.data = DataPlane(
            site_id, self._send, sim.clock, self._key_from_network,
            requeue=self.control.requeue, relay_timeout_s=qnl_options.get("relay_timeout_s"),
            transit_scheduled=qnl_options.get("transit_scheduling", config.TRANSIT_SCHEDULING),
        )
        self.kms = KeyManagementService(
            site_id, sites, self._send_kms, sim.clock,
            streams={name: streams(f"{name}:{site_id}") for name in ("session", "classical", "nonce")},
            policy_db=policy_db,
            mode=mode,
            pool_options=pool_options,
            network=self.control,
            notify=self._notify,
            priorities=priorities,
            demand_targets=demand_targets,
            ledger=ledger,
        )

    # --------------------------------------------------------- wiring

    def _send(self, channel: str, dst: str, message: WireMessage):
        self.transport.send(message, channel, self.site_id, dst)

    def _send_kms(self, message: WireMessage):
        self.transport.send(message, "conventional", self.site_id, message.dst_site)

    def _execute(self, ticket) -> int:
        return self.data.execute_ticket(ticket)

    def _key_from_network(self, remote_site: str, chunk_id: str, data: bytes):
        if self._audit is not None:
            self._audit(self.site_id, remote_site, chunk_id, data)
        self.kms.deliver_key_material(remote_site, chunk_id, data)

    def receive(self, channel: str, src: str, message: WireMessage):
        """Inbound frame from the transport"""
        if isinstance(message, KMS_MESSAGES):
            self.kms.on_message(message)
        elif isinstance(message, ErrorMessage):
            if message.relay_id:
                self.data.on_message(message)
            else:
                self.kms.on_message(message)
        elif isinstance(message, CONTROL_MESSAGES):
            self.control.on_message(message, src)
        else:
            self.data.on_message(message)

    def raw_key(self, neighbor: str, data: bytes):
        self.data.add_raw_key(neighbor, data)

    def link_indication(self, indication: LinkIndication):
        self.control.detect_link_change(indication)

    def hello(self):
        self.control.send_hellos()
        self.control.check_hellos()

    # ------------------------------------------------------- notices

    def _notify(self, notice: HostNotice):
        if notice.kind == "key_delivered":
            if notice.detail == "kms":
                self.stats.keys_pushed += 1
            return
        waiter = self._waiting.pop(notice.session_id, None)
        if waiter is not None and not waiter.triggered:
            waiter.succeed(notice)
        else:
            self._notices[notice.session_id] = notice

    def _await(self, session_id: int, timeout_s: float):
        """Process step: the next notice for a session, None on timeout"""
        notice = self._notices.pop(session_id, None)
        if notice is not None:
            return notice
        env = self.sim.env
        waiter = env.event()
        self._waiting[session_id] = waiter
        result = yield waiter | env.timeout(timeout_s)
        self._waiting.pop(session_id, None)
        return result[waiter] if waiter in result else None

    # ------------------------------------------------------ sessions

    def start_session(self, request: KeyRequestEvent):
        self.stats.sessions_started += 1
        self.sim.process(self._session(request), request.host_id, "session_start")

    def _params(self, request: KeyRequestEvent) -> KeyRequestParams:
        return KeyRequestParams(
            key_length_bytes=request.key_length_bytes,
            lifetime_s=request.lifetime_s,
            security_class=request.security_class,
            payload_bytes=request.payload_bytes,
            session_duration_s=request.session_duration_s,
        )

    def _obtain(self, request: KeyRequestEvent, refresh: bool = False):
        """
        Process step: negotiate one key until it is confirmed.

        Returns:
            (session id, refresh interval) or None when the host gives up
        """
        env = self.sim.env
        remote_site = self.hosts[request.remote_host_id]
        params = self._params(request)
        deadline = env.now + config.HOST_MAX_WAIT_S
        while env.now <= deadline:
            try:
                if self.kms.mode == "token":
                    token = self.kms.token_request(request.host_id, request.remote_host_id, remote_site,
                                                   params, refresh=refresh)
                    session_id = token.session_id
                else:
                    token = None
                    grant = self.kms.handle_key_request(request.host_id, request.remote_host_id,
                                                        remote_site, params, refresh=refresh)
                    session_id = grant.session_id
            except InsufficientMaterial:
                yield env.timeout(config.HOST_RETRY_BACKOFF_S)
                continue
            except PolicyDenied as e:
                logger.info(f"[Sim] {request.host_id} -> {request.remote_host_id}: {e}")
                return None

            wait_s = config.NEGOTIATION_TIMEOUT_S + config.TOKEN_TTL_S
            notice = yield from self._await(session_id, wait_s)
            while notice is not None and notice.kind == "token_ready":
                try:
                    grant = self.kms.token_redeem(token)
                    self._notices.pop(session_id, None)
                    return grant.session_id, grant.refresh_interval_s
                except RemoteUnconfirmed:
                    # the KMS is retrying behind the token; wait for the next notice
                    notice = yield from self._await(session_id, wait_s)
                except KmsError as e:
                    logger.info(f"[Sim] {request.host_id}: token {token.token_id} not redeemed: {e.code}")
                    notice = None
            if notice is not None and notice.kind == "confirmed":
                return session_id, grant.refresh_interval_s
            self.stats.host_retries += 1
            logger.debug(f"[Sim] {request.host_id}: session {session_id} "
                         f"{notice.detail if notice else 'timed out'}, retrying")
        return None

    def _begin(self, remote_site: str, session_id: int) -> bytes:
        key = self.kms.begin_traffic(session_id)
        if self._peer_key is not None:
            remote = self._peer_key(remote_site, session_id)
            if remote != key:
                raise InvariantViolation(
                    f"session {session_id}: {self.site_id} and {remote_site} hold different keys"
                )
        return key

    def _session(self, request: KeyRequestEvent):
        env = self.sim.env
        remote_site = self.hosts[request.remote_host_id]
        obtained = yield from self._obtain(request)
        if obtained is None:
            self.stats.sessions_abandoned += 1
            return
        session_id, refresh_interval = obtained
        self._begin(remote_site, session_id)
        started = env.now

        refreshes = refresh_count(request.session_duration_s, refresh_interval)
        for k in range(1, refreshes + 1):
            wait = started + k * refresh_interval - env.now
            if wait > 0:
                yield env.timeout(wait)
            renewed = yield from self._obtain(request, refresh=True)
            if renewed is None:
                self.stats.refresh_failures += 1
                continue
            self._begin(remote_site, renewed[0])
            self.stats.session_refreshes += 1
        remaining = started + request.session_duration_s - env.now
        if remaining > 0:
            yield env.timeout(remaining)
        self.stats.sessions_completed += 1

    # ------------------------------------------------------ metrics

    def pool_fill_bytes(self) -> int:
        return sum(pool.held_bytes for pool in self.kms.pools.values())

    def consumed_pad_bytes(self) -> Dict[Tuple[str, str], int]:
        """Pad bytes consumed per owned link stream"""
        return {
            (self.site_id, nbr): stream.consumed_bytes
            for nbr, stream in self.data.pools.streams.items() if stream.owner
        }


def refresh_count(session_duration_s: float, refresh_interval_s: Optional[float]) -> int:
    """Refreshes a session of duration T with refresh interval L needs: ceil(T/L) - 1"""
    if not refresh_interval_s or refresh_interval_s <= 0 or session_duration_s <= 0:
        return 0
    return max(0, math.ceil(session_duration_s / refresh_interval_s - 1e-9) - 1)


def route_frame(nodes: Mapping[str, SiteNode]) -> Callable[[str, str, str, WireMessage], None]:
    """Transport delivery callback dispatching to the destination node"""
    def deliver(channel: str, src: str, dst: str, message: WireMessage):
        node = nodes.get(dst)
        if node is None:
            logger.warning(f"[Sim] frame {message.type} for unknown node {dst}")
            return
        try:
            node.receive(channel, src, message)
        except InvariantViolation:
            raise
        except QKeyMeshError as e:
            logger.warning(f"[Sim] {dst}: {message.type} from {src} failed: {e}")
    return deliver
