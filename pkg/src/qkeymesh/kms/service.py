# Key management service: session key issuance and peer coordination

"""
Key Management Service for QKeyMesh

One instance per site. It grants session keys to local hosts from the quantum
key pools it shares with every other site, negotiates the same key with the
remote KMS, keeps the pool mirrors synchronized and tells the network layer
how much key material to generate.

Negotiation modes:
    direct      key released to the host at grant; races reach the host
    token       key released only after the remote KMS confirmed; races are
                retried KMS-to-KMS without the host noticing
    kms-to-kms  KMS sends the selection itself and pushes the key to the
                remote host; key released at grant
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from .. import config
from ..errors import (
    InsufficientMaterial,
    InvariantViolation,
    KmsError,
    MacInvalid,
    PolicyDenied,
    PoolFull,
    QKeyMeshError,
    RaceConflict,
    RemoteUnconfirmed,
    StaleGeneration,
    TokenExpired,
    TokenUnknown,
    UnknownAllocation,
)
from ..keypool import AllocationEnd, KeyAllocation, QuantumKeyPool
from ..wire import (
    DigestMessage,
    ErrorMessage,
    KeyConfirm,
    KeyNegotiation,
    PoolEvent,
    TokenConfirm,
    WireMessage,
)
from .demand import DemandEstimate, DemandEstimator, OneTime, RequestRecord, estimate_demand, size_pool
from .policy import (
    EffectiveParams,
    KeyRequestParams,
    PolicyDatabase,
    SecurityClass,
    check_relay_tactics,
    enforce_policy,
)
from .sealing import (
    NONCE_BYTES,
    SESSION_ID_BYTES,
    KeySelectionInfo,
    SealedSelectionPacket,
    derive_expanded_key,
    derive_static_key,
    open_bytes,
    open_selection,
    seal_bytes,
    seal_selection,
)
from .sync import PoolSynchronizer, SyncListener

logger = logging.getLogger(__name__)

NEGOTIATION_MODES = ("direct", "token", "kms-to-kms")

# Remote answers that a token-mode negotiation retries internally
RETRYABLE_CODES = {
    RaceConflict.code, StaleGeneration.code, InsufficientMaterial.code, MacInvalid.code,
    UnknownAllocation.code, "NEGOTIATION_TIMEOUT",
}


class GrantState(Enum):
    PENDING = "pending"
    CONFIRMED = "confirmed"
    FAILED = "failed"


@dataclass
class KeyGrant:
    """Session key grant handed to the requesting host"""
    session_id: int
    session_key: Optional[bytes]
    packet: SealedSelectionPacket
    expiry_timestamp: float
    refresh_interval_s: Optional[float]
    security_class: SecurityClass
    selection: KeySelectionInfo
    host_id: str = ""
    remote_host_id: str = ""
    remote_site: str = ""
    fallback: Optional[str] = None
    state: GrantState = GrantState.PENDING

    @property
    def confirmed(self) -> bool:
        return self.state is GrantState.CONFIRMED


@dataclass
class GrantToken:
    """Stands in for a key until the remote KMS confirmed the same bytes"""
    token_id: str
    session_id: int
    allocation: Optional[KeyAllocation]
    expiry: float
    remote_confirmed: bool = False


@dataclass(frozen=True)
class SessionKeyResponse:
    """Key retrieved by the remote KMS for its host"""
    session_id: int
    session_key: bytes
    host_id: str
    remote_host_id: str
    remote_site: str
    security_class: SecurityClass
    fallback: Optional[str] = None


@dataclass(frozen=True)
class HostNotice:
    """Asynchronous news for a local host"""
    kind: str  # confirmed | failed | token_ready | key_delivered
    host_id: str
    session_id: int
    detail: str = ""
    session_key: Optional[bytes] = None


@dataclass
class KmsStats:
    grants: int = 0
    confirmed: int = 0
    failed: int = 0
    race_conflicts: int = 0
    token_retries: int = 0
    blocked: int = 0
    mac_failures: int = 0
    timeouts: int = 0
    refreshes: int = 0
    pool_full: int = 0
    remote_grants: int = 0
    fallbacks: Dict[int, int] = field(default_factory=lambda: {0: 0, 1: 0, 2: 0})


@dataclass
class _Negotiation:
    grant: KeyGrant
    key: bytes
    allocation: Optional[KeyAllocation]
    params: EffectiveParams
    mode: str
    deadline: float
    token: Optional[GrantToken] = None
    host_key_ref: Optional[int] = None
    wrapped_key: Optional[str] = None
    retries: int = 0
    mirrored: bool = False
    host_session_id: int = 0  # id the host knows; retries get fresh wire ids
    waiting: bool = False  # retry blocked on material


def pool_ids_for(sites: Sequence[str]) -> Dict[frozenset, int]:
    """Stable 1-based pool id per unordered site pair"""
    return {frozenset(pair): i + 1 for i, pair in enumerate(combinations(sorted(sites), 2))}


class KeyManagementService:
    """KMS of one site"""

    def __init__(
        self,
        site_id: str,
        sites: Sequence[str],
        send: Callable[[WireMessage], None],
        clock: Callable[[], float],
        streams: Mapping[str, np.random.Generator],
        policy_db: Optional[PolicyDatabase] = None,
        psk_master: bytes = b"qkeymesh static psk",
        mode: str = None,
        pool_options: Optional[dict] = None,
        network=None,
        notify: Optional[Callable[[HostNotice], None]] = None,
        priorities: Optional[Mapping[str, float]] = None,
        demand_targets: Sequence[str] = (),
        ledger: Optional[Callable[..., None]] = None,
    ):
        """
        Args:
            site_id: Local site
            sites: Every site of the network (pools exist for all pairs)
            send: Transport for messages to other sites' KMSs
            clock: Simulation time source
            streams: Named random streams ("session", "classical", "nonce")
            policy_db: Security policies
            psk_master: Secret the static pre-shared site keys derive from
            mode: direct | token | kms-to-kms
            pool_options: Keyword arguments for every QuantumKeyPool
            network: Generation requests and topology (control plane adapter)
            notify: Delivery of HostNotice objects to local hosts
            priorities: Demand weight per remote site
            demand_targets: Remote sites local hosts talk to
            ledger: Told of every session consumption as
                (remote site, pool id, generation, offset, length, session id)
        """
        mode = mode or config.NEGOTIATION_MODE
        if mode not in NEGOTIATION_MODES:
            raise ValueError(f"unknown negotiation mode {mode!r}")
        self.site_id = site_id
        self.mode = mode
        self._send = send
        self._clock = clock
        self.streams = streams
        self.policy_db = policy_db or PolicyDatabase()
        self.network = network
        self._notify = notify or (lambda notice: None)
        self.priorities = dict(priorities or {})
        self.demand_targets = list(demand_targets)
        self._ledger = ledger or (lambda *entry: None)

        self.pools: Dict[str, QuantumKeyPool] = {}
        self.syncs: Dict[str, PoolSynchronizer] = {}
        self.intersite_keys: Dict[str, bytes] = {}
        self.static_keys: Dict[str, bytes] = {}
        self.suspended: Dict[str, bool] = {}
        self.achieved_rates: Dict[str, float] = {}

        options = dict(pool_options or {})
        capacity = options.pop("capacity_bytes", None) or size_pool(estimate_demand([]))
        ids = pool_ids_for(sites)
        for remote in sorted(s for s in sites if s != site_id):
            pair = tuple(sorted((site_id, remote)))
            pool = QuantumKeyPool(ids[frozenset(pair)], capacity, sites=pair, created_at=clock(), **options)
            self.pools[remote] = pool
            self.syncs[remote] = PoolSynchronizer(
                pool, site_id, remote, send, clock, self._listener_for(remote),
            )
            self.intersite_keys[remote] = derive_static_key(psk_master, f"intersite:{pair[0]}|{pair[1]}")
            self.static_keys[remote] = derive_static_key(psk_master, f"static:{pair[0]}|{pair[1]}")
            self.suspended[remote] = False

        self.negotiations: Dict[int, _Negotiation] = {}
        self.tokens: Dict[str, _Negotiation] = {}
        self.remote_sessions: Dict[int, SessionKeyResponse] = {}
        self.confirmed_keys: Dict[int, bytes] = {}
        self.host_keys: Dict[int, bytes] = {}
        self.host_key_refs: Dict[tuple, int] = {}
        self._deferred: Dict[str, List[tuple]] = {remote: [] for remote in self.pools}
        self._session_expiry: Dict[int, float] = {}  # session id -> when its state is dropped
        self._token_counter = 0
        self.demand = DemandEstimator()
        self.stats = KmsStats()

    def _listener_for(self, remote: str) -> SyncListener:
        return SyncListener(
            sessions_lost=lambda sessions: self._sessions_lost(remote, sessions),
            session_mirrored=self._session_mirrored,
            purged=lambda: self._pool_purged(remote),
            refreshed=lambda key: self._install_intersite_key(remote, key),
            refresh_requested=lambda: self.refresh_intersite_key(remote),
            material_added=lambda: self._retry_deferred(remote),
        )

    def pool(self, remote_site: str) -> QuantumKeyPool:
        return self.pools[remote_site]

    def _end_for(self, remote_site: str) -> AllocationEnd:
        return AllocationEnd.BEGIN if self.site_id < remote_site else AllocationEnd.END

    def _new_session_id(self) -> int:
        while True:
            session_id = int.from_bytes(self.streams["session"].bytes(SESSION_ID_BYTES), "big")
            if session_id and session_id not in self._session_expiry:
                self._session_expiry[session_id] = self._clock() + config.NEGOTIATION_TIMEOUT_S
                return session_id

    def _nonce(self) -> bytes:
        return self.streams["nonce"].bytes(NONCE_BYTES)

    # ------------------------------------------------------ key requests

    def handle_key_request(
        self,
        host_id: str,
        remote_host_id: str,
        remote_site: str,
        requested: Optional[KeyRequestParams] = None,
        refresh: bool = False,
    ) -> KeyGrant:
        """
        Grant a session key to a local host and start the remote negotiation.

        In direct and kms-to-kms mode the grant carries the key; in token mode
        it does not (see token_request / token_redeem). Traffic may start only
        once the grant is confirmed.

        Raises:
            PolicyDenied: policy forbids the pair or the remote site is unknown
            InsufficientMaterial: class 3 or higher and the pool is empty
        """
        return self._negotiate(host_id, remote_host_id, remote_site, requested, refresh, self.mode).grant

    def token_request(
        self,
        host_id: str,
        remote_host_id: str,
        remote_site: str,
        requested: Optional[KeyRequestParams] = None,
        refresh: bool = False,
    ) -> GrantToken:
        """Reserve key material and hand out a token instead of the key"""
        return self._negotiate(host_id, remote_host_id, remote_site, requested, refresh, "token").token

    def _negotiate(self, host_id, remote_host_id, remote_site, requested, refresh, mode) -> _Negotiation:
        if remote_site not in self.pools:
            raise PolicyDenied(f"{self.site_id}: no pool shared with site {remote_site!r}")
        requested = requested or KeyRequestParams()
        params = enforce_policy(self.policy_db, host_id, remote_host_id, requested, self.site_id, remote_site)
        now = self._clock()
        if not refresh:
            self.demand.record(remote_site, RequestRecord(
                timestamp_s=now,
                key_bytes=params.key_length_bytes,
                security_class=params.security_class,
                lifetime_s=params.lifetime_s,
                session_duration_s=requested.session_duration_s,
                payload_bytes=params.payload_bytes,
            ))

        session_id = self._new_session_id()
        key, allocation, fallback, host_key_ref, wrapped = self._acquire_key(
            params, host_id, remote_site, session_id,
        )
        grant = KeyGrant(
            session_id=session_id,
            session_key=None if mode == "token" else key,
            packet=None,
            expiry_timestamp=now + params.lifetime_s,
            refresh_interval_s=params.refresh_interval_s,
            security_class=params.security_class,
            selection=None,
            host_id=host_id,
            remote_host_id=remote_host_id,
            remote_site=remote_site,
            fallback=fallback,
        )
        negotiation = _Negotiation(
            grant=grant, key=key, allocation=allocation, params=params, mode=mode,
            deadline=now + config.NEGOTIATION_TIMEOUT_S, host_key_ref=host_key_ref, wrapped_key=wrapped,
            host_session_id=session_id,
        )
        if mode == "token":
            self._token_counter += 1
            token = GrantToken(
                token_id=f"{self.site_id}-t{self._token_counter}",
                session_id=session_id,
                allocation=allocation,
                expiry=now + config.TOKEN_TTL_S,
            )
            negotiation.token = token
            self.tokens[token.token_id] = negotiation
        self.negotiations[session_id] = negotiation
        self.stats.grants += 1
        if fallback is not None:
            self.stats.fallbacks[int(params.security_class)] += 1
        self._send_negotiation(negotiation)
        return negotiation

    def _acquire_key(self, params: EffectiveParams, host_id: str, remote_site: str, session_id: int):
        """Key bytes plus where they came from: (key, allocation, fallback, host_key_ref, wrapped)"""
        cls = params.security_class
        if cls is SecurityClass.CLASSICAL:
            key = self.streams["classical"].bytes(params.key_length_bytes)
            nonce = self._nonce()
            ciphertext, tag = seal_bytes(self.static_keys[remote_site], key, nonce, b"qkeymesh classical")
            return key, None, "classical", None, (nonce + ciphertext + tag).hex()

        if cls is SecurityClass.HOST_KEY:
            ref = self.host_key_refs.get((host_id, remote_site))
            if ref is not None:
                return self.host_keys[ref], None, "host_key", ref, None

        pool = self.pools[remote_site]
        try:
            allocation = pool.allocate(params.pool_bytes, self._end_for(remote_site), session_id)
        except InsufficientMaterial:
            if cls is SecurityClass.EXPANDABLE:
                seed = self.intersite_keys[remote_site] + session_id.to_bytes(SESSION_ID_BYTES, "big")
                return derive_expanded_key(seed, params.key_length_bytes), None, "expanded", None, None
            self.stats.blocked += 1
            if cls is SecurityClass.ONE_TIME_PAD:
                self.request_generation(
                    DemandEstimate(remote_site, 0.0, 0.0, OneTime(params.pool_bytes * 8)), remote_site,
                )
            raise
        return pool.key_bytes(allocation), allocation, None, None, None

    def _send_negotiation(self, negotiation: _Negotiation):
        grant = negotiation.grant
        allocation = negotiation.allocation
        pool = self.pools[grant.remote_site]
        if allocation is not None:
            selection = KeySelectionInfo(pool.pool_id, allocation.generation, allocation.offset_bytes,
                                         allocation.length_bytes, grant.session_id, self._clock())
        else:
            selection = KeySelectionInfo(pool.pool_id, pool.generation, 0, 0, grant.session_id, self._clock())
        packet = seal_selection(selection, self.intersite_keys[grant.remote_site], self._nonce())
        grant.selection = selection
        grant.packet = packet
        self._send(KeyNegotiation(
            src_site=self.site_id,
            dst_site=grant.remote_site,
            src_host=grant.host_id,
            dst_host=grant.remote_host_id,
            mode=negotiation.mode,
            via="kms" if negotiation.mode == "kms-to-kms" else "host",
            security_class=int(grant.security_class),
            session_id=grant.session_id,
            lifetime_s=negotiation.params.lifetime_s,
            key_length_bytes=len(negotiation.key),
            nonce=packet.nonce.hex(),
            ciphertext=packet.ciphertext.hex(),
            mac=packet.mac.hex(),
            token_id=negotiation.token.token_id if negotiation.token else None,
            host_key_ref=negotiation.host_key_ref,
            wrapped_key=negotiation.wrapped_key,
            fallback=grant.fallback,
        ))

    # ---------------------------------------------------- remote side

    def handle_remote_negotiation(self, message: KeyNegotiation) -> Optional[SessionKeyResponse]:
        """
        Retrieve the key a remote KMS selected, confirm it and answer.

        Returns:
            the response, or None while the referenced bytes are still in flight

        Raises:
            MacInvalid: packet does not verify under the inter-site key
            RaceConflict: bytes already belong to another session
            StaleGeneration: selection from a purged generation
        """
        remote = message.src_site
        if remote not in self.pools:
            raise PolicyDenied(f"{self.site_id}: unknown site {remote!r}")
        packet = SealedSelectionPacket(
            bytes.fromhex(message.nonce), bytes.fromhex(message.ciphertext), bytes.fromhex(message.mac),
        )
        try:
            selection = open_selection(packet, self.intersite_keys[remote])
        except MacInvalid:
            self.stats.mac_failures += 1
            logger.warning(f"[KMS] {self.site_id}: selection from {remote} failed authentication")
            raise
        if selection.session_id != message.session_id:
            self.stats.mac_failures += 1
            raise MacInvalid(f"{self.site_id}: session id outside the seal does not match")

        if selection.derived:
            key = self._derived_remote_key(message, selection)
        else:
            pool = self.pools[remote]
            if selection.generation > pool.generation:
                self._defer(message)
                return None
            try:
                allocation = pool.resolve(selection)
            except InsufficientMaterial:
                self._defer(message)
                return None
            key = pool.key_bytes(allocation)
            pool.confirm(allocation)
            sync = self.syncs[remote]
            sync.record_resolve(selection)
            sync.record_consume("confirm", allocation.offset_bytes, allocation.length_bytes, selection.session_id)
            self._ledger(remote, allocation.pool_id, allocation.generation, allocation.offset_bytes,
                         allocation.length_bytes, selection.session_id)
            if message.security_class == SecurityClass.HOST_KEY:
                self.host_keys[selection.session_id] = key

        response = SessionKeyResponse(
            session_id=selection.session_id,
            session_key=key,
            host_id=message.dst_host,
            remote_host_id=message.src_host,
            remote_site=remote,
            security_class=SecurityClass(message.security_class),
            fallback=message.fallback,
        )
        self.remote_sessions[selection.session_id] = response
        self._session_expiry[selection.session_id] = self._clock() + message.lifetime_s + config.NEGOTIATION_TIMEOUT_S
        self.stats.remote_grants += 1
        if message.mode == "token":
            self._send(TokenConfirm(src_site=self.site_id, dst_site=remote,
                                    session_id=selection.session_id, token_id=message.token_id or ""))
        else:
            self._send(KeyConfirm(src_site=self.site_id, dst_site=remote, session_id=selection.session_id,
                                  pool_id=selection.pool_id, generation=selection.generation))
        self._notify(HostNotice("key_delivered", message.dst_host, selection.session_id,
                                detail=message.via, session_key=key))
        return response

    def _derived_remote_key(self, message: KeyNegotiation, selection: KeySelectionInfo) -> bytes:
        remote = message.src_site
        if message.fallback == "classical":
            blob = bytes.fromhex(message.wrapped_key or "")
            nonce, body = blob[:NONCE_BYTES], blob[NONCE_BYTES:]
            tag_len = min(32, max(16, config.MAC_TAG_BYTES))
            return open_bytes(self.static_keys[remote], nonce, body[:-tag_len], body[-tag_len:],
                              b"qkeymesh classical")
        if message.fallback == "host_key":
            key = self.host_keys.get(message.host_key_ref)
            if key is None:
                raise UnknownAllocation(f"{self.site_id}: no host key {message.host_key_ref}")
            return key
        if message.fallback == "expanded":
            seed = self.intersite_keys[remote] + selection.session_id.to_bytes(SESSION_ID_BYTES, "big")
            return derive_expanded_key(seed, message.key_length_bytes)
        raise UnknownAllocation(f"{self.site_id}: empty selection without a key source")

    def _defer(self, message: KeyNegotiation):
        self._deferred[message.src_site].append((message, self._clock() + config.NEGOTIATION_TIMEOUT_S))

    def _retry_deferred(self, remote: str):
        waiting, self._deferred[remote] = self._deferred[remote], []
        for message, deadline in waiting:
            try:
                if self.handle_remote_negotiation(message) is None:
                    self._deferred[remote][-1] = (message, deadline)
            except QKeyMeshError as e:
                self._answer_error(message, e)

    def _answer_error(self, message: KeyNegotiation, error: QKeyMeshError):
        # the clear id still names the session when the seal no longer opens
        self._send(ErrorMessage(src_site=self.site_id, dst_site=message.src_site, code=error.code,
                                detail=str(error), session_id=message.session_id))

    # ------------------------------------------------ originator side

    def _handle_key_confirm(self, message: KeyConfirm):
        negotiation = self.negotiations.get(message.session_id)
        if negotiation is None or negotiation.grant.state is not GrantState.PENDING:
            return
        self._complete(negotiation)

    def _complete(self, negotiation: _Negotiation):
        grant = negotiation.grant
        allocation = negotiation.allocation
        if allocation is not None:
            pool = self.pools[grant.remote_site]
            try:
                pool.confirm(allocation)
                self.syncs[grant.remote_site].record_consume(
                    "confirm", allocation.offset_bytes, allocation.length_bytes, grant.session_id,
                )
                self._ledger(grant.remote_site, allocation.pool_id, allocation.generation,
                             allocation.offset_bytes, allocation.length_bytes, grant.session_id)
            except UnknownAllocation:
                if not negotiation.mirrored:
                    self._fail(negotiation, UnknownAllocation.code)
                    return
        grant.state = GrantState.CONFIRMED
        grant.session_key = negotiation.key
        self.stats.confirmed += 1
        self.confirmed_keys[grant.session_id] = negotiation.key
        self._session_expiry[grant.session_id] = grant.expiry_timestamp + config.NEGOTIATION_TIMEOUT_S
        if grant.security_class is SecurityClass.HOST_KEY and grant.fallback is None:
            self.host_keys[grant.session_id] = negotiation.key
            self.host_key_refs[(grant.host_id, grant.remote_site)] = grant.session_id
        if negotiation.token is not None:
            self.tokens.pop(negotiation.token.token_id, None)
        self.negotiations.pop(grant.session_id, None)
        self._notify(HostNotice("confirmed", grant.host_id, negotiation.host_session_id,
                                session_key=negotiation.key))

    def _handle_token_confirm(self, message: TokenConfirm):
        negotiation = self.negotiations.get(message.session_id)
        if negotiation is None or negotiation.token is None:
            return
        negotiation.token.remote_confirmed = True
        self._notify(HostNotice("token_ready", negotiation.grant.host_id, negotiation.host_session_id,
                                detail=negotiation.token.token_id))

    def token_redeem(self, token: GrantToken) -> KeyGrant:
        """
        Exchange a token for the key once the remote KMS confirmed.

        Raises:
            TokenUnknown: token never issued or already redeemed
            TokenExpired: token outlived its TTL (its reservation is aborted)
            RemoteUnconfirmed: remote KMS has not resolved the bytes yet
        """
        token_id = token.token_id if isinstance(token, GrantToken) else token
        negotiation = self.tokens.get(token_id)
        if negotiation is None:
            raise TokenUnknown(f"{self.site_id}: token {token_id} unknown")
        if self._clock() > negotiation.token.expiry:
            self._fail(negotiation, TokenExpired.code)
            raise TokenExpired(f"{self.site_id}: token {token_id} expired")
        if not negotiation.token.remote_confirmed:
            raise RemoteUnconfirmed(f"{self.site_id}: token {token_id} not confirmed by {negotiation.grant.remote_site}")
        self._complete(negotiation)
        if negotiation.grant.state is not GrantState.CONFIRMED:
            raise UnknownAllocation(f"{self.site_id}: reservation behind token {token_id} was lost")
        return negotiation.grant

    def _handle_session_error(self, message: ErrorMessage):
        negotiation = self.negotiations.get(message.session_id)
        if negotiation is None or negotiation.grant.state is not GrantState.PENDING:
            return
        if message.code == RaceConflict.code:
            self.stats.race_conflicts += 1
        logger.info(f"[KMS] {self.site_id}: session {message.session_id} rejected by "
                    f"{message.src_site}: {message.code}")
        self._fail(negotiation, message.code)

    def _fail(self, negotiation: _Negotiation, code: str):
        """Release the reservation; retry internally in token mode, else tell the host"""
        grant = negotiation.grant
        self._release(negotiation)
        if (
            negotiation.mode == "token"
            and code in RETRYABLE_CODES
            and negotiation.retries < config.MAX_NEGOTIATION_RETRIES
            and self._clock() <= negotiation.token.expiry
        ):
            negotiation.retries += 1
            self.stats.token_retries += 1
            # a fresh wire id makes late answers about the old attempt unmatchable
            self.negotiations.pop(grant.session_id, None)
            grant.session_id = self._new_session_id()
            self.negotiations[grant.session_id] = negotiation
            negotiation.token.remote_confirmed = False
            negotiation.mirrored = False
            negotiation.deadline = self._clock() + config.NEGOTIATION_TIMEOUT_S
            negotiation.waiting = not self._reacquire(negotiation)
            return
        grant.state = GrantState.FAILED
        grant.session_key = None
        self.stats.failed += 1
        self.negotiations.pop(grant.session_id, None)
        if negotiation.token is not None:
            self.tokens.pop(negotiation.token.token_id, None)
        self._notify(HostNotice("failed", grant.host_id, negotiation.host_session_id, detail=code))

    def _reacquire(self, negotiation: _Negotiation) -> bool:
        """Select new key bytes for a token negotiation and resend it; False while the pool is short"""
        grant = negotiation.grant
        try:
            key, allocation, fallback, ref, wrapped = self._acquire_key(
                negotiation.params, grant.host_id, grant.remote_site, grant.session_id,
            )
        except InsufficientMaterial:
            return False
        negotiation.key, negotiation.allocation = key, allocation
        negotiation.host_key_ref, negotiation.wrapped_key = ref, wrapped
        negotiation.token.allocation = allocation
        negotiation.waiting = False
        grant.fallback = fallback
        self._send_negotiation(negotiation)
        return True

    def _release(self, negotiation: _Negotiation):
        allocation = negotiation.allocation
        negotiation.allocation = None
        if allocation is None:
            return
        remote = negotiation.grant.remote_site
        pool = self.pools[remote]
        if allocation.generation != pool.generation:
            return
        try:
            pool.abort(allocation)
        except UnknownAllocation:
            pool.force_consume(allocation.offset_bytes, allocation.length_bytes)
        self.syncs[remote].record_consume("abort", allocation.offset_bytes, allocation.length_bytes,
                                          negotiation.grant.session_id)

    def begin_traffic(self, session_id: int) -> bytes:
        """
        Key for encrypting host traffic.

        Raises:
            InvariantViolation: session not confirmed by both KMSs
        """
        response = self.remote_sessions.get(session_id)
        if response is not None:
            return response.session_key
        if session_id in self.confirmed_keys:
            return self.confirmed_keys[session_id]
        raise InvariantViolation(f"{self.site_id}: traffic on unconfirmed session {session_id}")

    # ------------------------------------------------- sync callbacks

    def _sessions_lost(self, remote: str, sessions: List[int]):
        for session_id in sessions:
            negotiation = self.negotiations.get(session_id)
            if negotiation is None or negotiation.grant.state is not GrantState.PENDING:
                continue
            self.stats.race_conflicts += 1
            self._fail(negotiation, RaceConflict.code)

    def _session_mirrored(self, session_id: int):
        negotiation = self.negotiations.get(session_id)
        if negotiation is not None:
            negotiation.mirrored = True

    def _pool_purged(self, remote: str):
        for negotiation in list(self.negotiations.values()):
            if negotiation.grant.remote_site == remote and negotiation.allocation is not None:
                negotiation.allocation = None
                self._fail(negotiation, StaleGeneration.code)
        waiting, self._deferred[remote] = self._deferred[remote], []
        for message, _ in waiting:
            self._answer_error(message, StaleGeneration("pool purged"))

    def _install_intersite_key(self, remote: str, key: bytes):
        self.intersite_keys[remote] = key
        self.stats.refreshes += 1
        logger.info(f"[KMS] {self.site_id}: inter-site key with {remote} refreshed")

    def refresh_intersite_key(self, remote_site: str) -> Optional[bytes]:
        """
        Replace the inter-site key with reserved-region bytes on both sites.

        Raises:
            InsufficientMaterial: reserved region drained (old key kept)
        """
        return self.syncs[remote_site].refresh()

    # ------------------------------------------------- key material in

    def deliver_key_material(self, remote_site: str, chunk_id: str, data: bytes):
        """Key bytes from the network layer for the pool shared with `remote_site`"""
        try:
            self.syncs[remote_site].deliver_chunk(chunk_id, data)
        except PoolFull as e:
            self.stats.pool_full += 1
            logger.info(f"[KMS] {self.site_id}: {e}; suspending generation towards {remote_site}")
            if not self.suspended[remote_site]:
                self.suspended[remote_site] = True
                self._request_stop(remote_site)

    # --------------------------------------------- demand and generation

    def request_generation(self, estimate: DemandEstimate, remote_site: str) -> float:
        """
        Tell the network layer how much key to generate towards a site.

        Returns:
            achieved rate in bits/s (one-time requests: the accepted amount)

        Raises:
            PolicyDenied: relay tactics cannot be met by the topology
        """
        tactics = self.policy_db.tactics_for_sites(self.site_id, remote_site)
        topology = self.network.topology() if self.network is not None else None
        if topology is not None and topology.has_node(self.site_id) and topology.has_node(remote_site):
            check_relay_tactics(tactics, topology, self.site_id, remote_site)
        if self.network is None:
            achieved = getattr(estimate.mode, "rate_bits_per_s", None)
            if achieved is None:
                achieved = getattr(estimate.mode, "amount_bits", estimate.rate_bits_per_s)
        else:
            achieved = self.network.request_generation(
                self.site_id, remote_site, estimate.mode, tactics, self.priorities.get(remote_site, 1.0),
            )
        self.achieved_rates[remote_site] = achieved
        return achieved

    def _request_stop(self, remote_site: str):
        if self.network is not None:
            self.network.request_generation(self.site_id, remote_site, None, None, 1.0)

    def update_demand(self):
        """Periodic: re-estimate demand, size pools, resume or stop generation"""
        now = self._clock()
        for remote in self.demand_targets:
            estimate = self.demand.estimate(remote, now)
            pool = self.pools[remote]
            sync = self.syncs[remote]
            needed = size_pool(estimate)
            if sync.leader and needed > pool.capacity_bytes and not pool.continuous_overwrite:
                sync.grow(needed - pool.capacity_bytes)
            if self.suspended[remote]:
                if pool.fill_level >= config.POOL_LOW_WATERMARK:
                    continue
                self.suspended[remote] = False
                logger.info(f"[KMS] {self.site_id}: resuming generation towards {remote}")
            elif pool.held_bytes >= pool.capacity_bytes and not pool.continuous_overwrite:
                self.suspended[remote] = True
                self._request_stop(remote)
                continue
            try:
                self.request_generation(estimate, remote)
            except PolicyDenied as e:
                logger.warning(f"[KMS] {self.site_id}: {e}")

    def tick(self):
        """Periodic: negotiation and token timeouts, deferred retrievals, sync housekeeping, session expiry"""
        now = self._clock()
        for negotiation in list(self.negotiations.values()):
            if negotiation.grant.state is not GrantState.PENDING:
                continue
            token = negotiation.token
            if negotiation.waiting and self._reacquire(negotiation):
                continue
            if token is not None and token.remote_confirmed:
                if now > token.expiry:
                    self._fail(negotiation, TokenExpired.code)
                continue
            if now > negotiation.deadline:
                self.stats.timeouts += 1
                self._fail(negotiation, "NEGOTIATION_TIMEOUT")
        for remote, waiting in self._deferred.items():
            keep = []
            for message, deadline in waiting:
                if now > deadline:
                    self._answer_error(message, InsufficientMaterial("selected bytes never arrived"))
                else:
                    keep.append((message, deadline))
            self._deferred[remote] = keep
        for sync in self.syncs.values():
            try:
                sync.tick()
            except KmsError as e:
                logger.warning(f"[Sync] {self.site_id}: {e}")
        self._expire_sessions(now)

    def _expire_sessions(self, now: float):
        """Forget sessions whose key lifetime has run out"""
        expired = [s for s, until in self._session_expiry.items() if until < now and s not in self.negotiations]
        if not expired:
            return
        for session_id in expired:
            del self._session_expiry[session_id]
            self.confirmed_keys.pop(session_id, None)
            self.remote_sessions.pop(session_id, None)
            self.host_keys.pop(session_id, None)
        gone = set(expired)
        self.host_key_refs = {pair: ref for pair, ref in self.host_key_refs.items() if ref not in gone}
        logger.debug(f"[KMS] {self.site_id}: {len(expired)} expired sessions dropped")

    # ------------------------------------------------------- dispatch

    def on_message(self, message: WireMessage):
        """Entry point for frames addressed to this KMS"""
        if isinstance(message, KeyNegotiation):
            try:
                self.handle_remote_negotiation(message)
            except QKeyMeshError as e:
                logger.warning(f"[KMS] {self.site_id}: negotiation from {message.src_site} rejected: {e.code}")
                self._answer_error(message, e)
        elif isinstance(message, KeyConfirm):
            self._handle_key_confirm(message)
        elif isinstance(message, TokenConfirm):
            self._handle_token_confirm(message)
        elif isinstance(message, PoolEvent):
            try:
                self.syncs[message.src_site].apply_peer_event(message)
            except KmsError as e:
                logger.warning(f"[Sync] {self.site_id}: {e}")
        elif isinstance(message, DigestMessage):
            try:
                self.syncs[message.src_site].handle_digest(message)
            except KmsError as e:
                logger.warning(f"[Sync] {self.site_id}: {e}")
        elif isinstance(message, ErrorMessage):
            if message.pool_id is not None and message.session_id is None:
                self.syncs[message.src_site].handle_error(message)
            else:
                self._handle_session_error(message)
