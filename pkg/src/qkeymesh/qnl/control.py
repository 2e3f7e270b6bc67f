# QNL control plane of one node

"""
Control Plane Module for QKeyMesh

Ties the network-layer control functions of one node together:

    KGM flooding        demand announcements -> identical demand matrices
    LSA flooding        link state -> identical topologies and routing tables
    hello               neighbour liveness, dead after a few missed intervals
    flow optimisation   MCFP over the global demand, re-solved lazily, after
                        capacity is set aside for high-priority commodities
    scheduling          DWRR for continuous flows, FIFO for one-time requests,
                        turned into work tickets for the local data plane;
                        relays passing through share each outgoing link

Control frames travel sealed under the static key of the neighbour pair.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from .. import config
from ..errors import ControlPlaneError, EmptyDemand, MacInvalid, Unreachable, UnreachableCommodity
from ..kms.demand import Hybrid, OneTime
from ..kms.policy import DirectOnly, MultiPath, RelayTactics
from ..kms.sealing import NONCE_BYTES, derive_static_key, open_bytes, seal_bytes
from ..qll import LinkIndication
from ..wire import (
    MESSAGE_ADAPTER,
    HelloMessage,
    KgmMessage,
    LsaMessage,
    SealedFrame,
    WireMessage,
    canonical_json,
)
from .flooding import FloodState, flood_targets
from .mcfp import Column, Commodity, FlowAssignment, RouteSpec, check_reachable, solve_mcfp
from .routing import (
    TopologyGraph,
    build_topology,
    disjoint_paths,
    hop_limited_paths,
    link_key,
    routing_table,
    shortest_path,
    subtract_priority_reservations,
)
from .scheduling import LinkScheduler, WorkTicket

logger = logging.getLogger(__name__)

CONTROL_CONTEXT = b"qkeymesh control"

# Accrued DWRR backlog is capped at this many scheduling intervals of rate
BACKLOG_INTERVALS = 4

# Continuous KGMs are re-flooded only when the rate moves by more than this
RATE_CHANGE_THRESHOLD = 0.1

# Links whose capacity drops to this after reservations leave the solve
RESERVATION_FLOOR_BITS_PER_S = 1e-6


def neighbor_key(psk_master: bytes, a: str, b: str) -> bytes:
    """Static key of a neighbour pair"""
    low, high = sorted((a, b))
    return derive_static_key(psk_master, f"link:{low}|{high}")


@lru_cache(maxsize=128)
def _solve_frozen(links, nodes, demands, priorities, routes, epsilon, objective, solver) -> FlowAssignment:
    topology = TopologyGraph(links, nodes)
    return solve_mcfp(topology, dict(demands), epsilon, dict(priorities), dict(routes), objective, solver)


def solve_shared(
    topology: TopologyGraph,
    demands: Mapping[Commodity, float],
    priorities: Mapping[Commodity, float],
    routes: Mapping[Commodity, RouteSpec],
    epsilon: float = None,
    objective: str = None,
    solver: str = None,
) -> FlowAssignment:
    """
    solve_mcfp memoised on its inputs.

    Nodes holding identical demand matrices and topologies get the same
    (shared, read-only) assignment.
    """
    return _solve_frozen(
        tuple(topology.links()), tuple(topology.nodes),
        tuple(sorted(demands.items())), tuple(sorted(priorities.items())),
        tuple(sorted(routes.items())),
        config.MCFP_EPSILON if epsilon is None else epsilon,
        objective or config.MCFP_OBJECTIVE,
        solver or config.MCFP_SOLVER,
    )


def reserve_priority_paths(
    topology: TopologyGraph,
    demands: Mapping[Commodity, float],
    priorities: Mapping[Commodity, float],
    routes: Mapping[Commodity, RouteSpec],
    threshold: float,
) -> Tuple[TopologyGraph, Dict[Commodity, Dict[Column, float]]]:
    """
    Set capacity aside for every commodity whose priority reaches `threshold`,
    highest priority first, along its pinned bundle or its shortest allowed
    path. A reservation is the demand clipped to the path's bottleneck.

    Returns:
        residual topology (exhausted links removed), reserved flow per commodity
    """
    residual = topology.copy()
    reserved: Dict[Commodity, Dict[Column, float]] = {}
    ranked = sorted((c for c in demands if priorities.get(c, 1.0) >= threshold),
                    key=lambda c: (-priorities.get(c, 1.0), c))
    for commodity in ranked:
        route = routes.get(commodity, RouteSpec())
        if route.pinned:
            column = tuple(tuple(path) for path in route.bundle)
        else:
            paths = hop_limited_paths(residual, *commodity, route.max_hops, limit=1)
            if not paths:
                continue
            column = (tuple(paths[0]),)
        links = sorted({link_key(a, b) for path in column for a, b in zip(path, path[1:])})
        if not all(residual.has_link(*link) for link in links):
            continue
        amount = min([demands[commodity]] + [residual.capacity(*link) for link in links])
        if amount <= 0:
            continue
        residual = subtract_priority_reservations(residual, {link: amount for link in links})
        for link in links:
            if residual.capacity(*link) <= RESERVATION_FLOOR_BITS_PER_S:
                residual.remove_link(*link)
        reserved[commodity] = {column: amount}
    return residual, reserved


@dataclass
class NeighborState:
    """What one node knows about an adjacent node"""
    capacity_bits_per_s: float
    link_up: bool = True
    alive: bool = True
    last_hello: float = 0.0

    @property
    def advertised(self) -> bool:
        return self.link_up and self.alive and self.capacity_bits_per_s > 0


@dataclass
class ControlStats:
    kgm_sent: int = 0
    kgm_received: int = 0
    lsa_sent: int = 0
    lsa_received: int = 0
    solves: int = 0
    mac_failures: int = 0
    tickets: int = 0
    served_bits: int = 0
    dropped_commodities: int = 0


class ControlPlane:
    """QNL control plane of one node"""

    def __init__(
        self,
        node_id: str,
        neighbors: Mapping[str, float],
        send: Callable[[str, str, WireMessage], None],
        clock: Callable[[], float],
        nonce_rng: np.random.Generator,
        psk_master: bytes = b"qkeymesh static psk",
        executor: Callable[[WorkTicket], int] = None,
        qnl_options: Optional[Mapping] = None,
        transit_backlog: Callable[[], Mapping] = None,
    ):
        """
        Args:
            node_id: Local node
            neighbors: Adjacent node -> quantum link capacity in bits/s
            send: Transport, called as send(channel, destination node, message)
            clock: Simulation time source
            nonce_rng: Random stream for frame nonces
            psk_master: Secret the static neighbour keys derive from
            executor: Data-plane ticket execution; returns bits served
            qnl_options: Overrides of epsilon, objective, solver, quantum_bits,
                on_demand_first, hello_interval_s, hello_dead_misses,
                scheduling_interval_s, priority_reservation_threshold
            transit_backlog: Data-plane relay bits queued per
                (outgoing link, commodity)
        """
        options = dict(qnl_options or {})
        self.node_id = node_id
        self._send = send
        self._clock = clock
        self._nonce_rng = nonce_rng
        self._executor = executor or (lambda ticket: 0)
        self._transit_backlog = transit_backlog or (lambda: {})
        self.epsilon = options.get("epsilon", config.MCFP_EPSILON)
        self.objective = options.get("objective", config.MCFP_OBJECTIVE)
        self.solver = options.get("solver", config.MCFP_SOLVER)
        self.quantum_bits = int(options.get("quantum_bits", config.DWRR_QUANTUM_BITS))
        self.on_demand_first = options.get("on_demand_first", config.ON_DEMAND_FIRST)
        self.hello_interval_s = float(options.get("hello_interval_s", config.HELLO_INTERVAL_S))
        self.hello_dead_misses = int(options.get("hello_dead_misses", config.HELLO_DEAD_MISSES))
        self.scheduling_interval_s = float(options.get("scheduling_interval_s", config.SCHEDULING_INTERVAL_S))
        self.reservation_threshold = float(options.get("priority_reservation_threshold",
                                                       config.PRIORITY_RESERVATION_THRESHOLD))

        now = clock()
        self.neighbors: Dict[str, NeighborState] = {
            nbr: NeighborState(float(cap), last_hello=now) for nbr, cap in sorted(neighbors.items())
        }
        self._keys = {nbr: neighbor_key(psk_master, node_id, nbr) for nbr in self.neighbors}
        self.flood = FloodState(node_id)
        self.schedulers: Dict[Tuple[str, str], LinkScheduler] = {
            (node_id, nbr): LinkScheduler((node_id, nbr), self.quantum_bits, self.on_demand_first)
            for nbr in self.neighbors
        }
        self._hello_seq = 0
        self._topology: Optional[TopologyGraph] = None
        self._assignment: Optional[FlowAssignment] = None
        self._flows_dirty = True
        self._announced: Dict[Commodity, KgmMessage] = {}
        self.stats = ControlStats()

    # ------------------------------------------------------- framing

    def _send_sealed(self, neighbor: str, message: WireMessage):
        nonce = self._nonce_rng.bytes(NONCE_BYTES)
        ciphertext, mac = seal_bytes(self._keys[neighbor], canonical_json(message), nonce, CONTROL_CONTEXT)
        self._send("conventional", neighbor, SealedFrame(
            src=self.node_id, dst=neighbor, nonce=nonce.hex(), ciphertext=ciphertext.hex(), mac=mac.hex(),
        ))

    def _open(self, frame: SealedFrame) -> Optional[WireMessage]:
        key = self._keys.get(frame.src)
        if key is None or frame.dst != self.node_id:
            logger.warning(f"[Control] {self.node_id}: sealed frame from non-neighbour {frame.src}")
            return None
        try:
            plaintext = open_bytes(key, bytes.fromhex(frame.nonce), bytes.fromhex(frame.ciphertext),
                                   bytes.fromhex(frame.mac), CONTROL_CONTEXT)
            return MESSAGE_ADAPTER.validate_json(plaintext)
        except (MacInvalid, ValueError, ValidationError) as e:
            self.stats.mac_failures += 1
            logger.warning(f"[Control] {self.node_id}: frame from {frame.src} rejected: {e}")
            return None

    def _flood(self, message: WireMessage, received_from: Optional[str]):
        alive = [n for n, state in self.neighbors.items() if state.alive]
        for neighbor in flood_targets(alive, received_from):
            self._send_sealed(neighbor, message)

    # ------------------------------------------------------------ KGM

    def broadcast_kgm(self, kgm: KgmMessage):
        """Apply a locally originated KGM and flood it"""
        self.flood.accept_kgm(kgm)
        self._flows_dirty = True
        self.stats.kgm_sent += 1
        self._flood(kgm, None)

    def handle_kgm(self, kgm: KgmMessage, received_from: Optional[str] = None):
        """Fold in a flooded KGM once and pass it on"""
        if not self.flood.accept_kgm(kgm):
            return
        self.stats.kgm_received += 1
        self._flows_dirty = True
        self._flood(kgm, received_from)

    def _kgm(self, src: str, dst: str, mode: str, tactics: Optional[RelayTactics] = None,
             priority: float = 1.0, rate: float = 0.0, amount: int = 0) -> KgmMessage:
        fields = dict(
            origin=self.node_id, msg_seq=self.flood.next_kgm_seq(), src_site=src, dst_site=dst,
            mode=mode, rate_bits_per_s=float(rate), amount_bits=int(amount), priority=float(priority),
        )
        if tactics is not None:
            fields.update(tactic=tactics.name, max_hops=tactics.max_hops, path_count=tactics.path_count)
        return KgmMessage(**fields)

    # ------------------------------------------------------------ LSA

    def originate_lsa(self) -> LsaMessage:
        """Advertise the current adjacency and flood it"""
        lsa = self.flood.originate_lsa(
            (nbr, state.capacity_bits_per_s) for nbr, state in self.neighbors.items() if state.advertised
        )
        self._topology = None
        self._flows_dirty = True
        self.stats.lsa_sent += 1
        self._flood(lsa, None)
        return lsa

    def flood_lsa(self, lsa: LsaMessage, received_from: Optional[str] = None) -> bool:
        """Store a newer LSA and pass it on; stale ones are ignored"""
        if lsa.origin_node == self.node_id or not self.flood.accept_lsa(lsa):
            return False
        self.stats.lsa_received += 1
        self._topology = None
        self._flows_dirty = True
        self._flood(lsa, received_from)
        return True

    def topology(self) -> TopologyGraph:
        if self._topology is None:
            self._topology = build_topology(self.flood.lsa_db)
        return self._topology

    def routing_table(self) -> Dict[str, str]:
        return routing_table(self.topology(), self.node_id)

    # ---------------------------------------------------------- hello

    def send_hellos(self):
        self._hello_seq += 1
        for neighbor in self.neighbors:
            self._send_sealed(neighbor, HelloMessage(node_id=self.node_id, seq=self._hello_seq))

    def _handle_hello(self, hello: HelloMessage):
        state = self.neighbors.get(hello.node_id)
        if state is None:
            return
        state.last_hello = self._clock()
        if not state.alive:
            self.detect_link_change(("hello", hello.node_id, True))

    def check_hellos(self) -> List[LsaMessage]:
        """Declare neighbours dead after the configured number of missed hellos"""
        deadline = self.hello_interval_s * self.hello_dead_misses
        now = self._clock()
        out = []
        for neighbor, state in self.neighbors.items():
            if state.alive and now - state.last_hello > deadline:
                lsa = self.detect_link_change(("hello", neighbor, False))
                if lsa is not None:
                    out.append(lsa)
        return out

    def detect_link_change(self, event) -> Optional[LsaMessage]:
        """
        React to a link-layer indication or a hello verdict.

        Args:
            event: LinkIndication, or ("hello", neighbour, alive)

        Returns:
            The LSA flooded for the change, None when nothing changed
        """
        if isinstance(event, LinkIndication):
            neighbor = event.link[1] if event.link[0] == self.node_id else event.link[0]
            state = self.neighbors.get(neighbor)
            if state is None:
                return None
            before = (state.advertised, state.capacity_bits_per_s)
            if event.kind == "down":
                state.link_up = False
            elif event.kind == "up":
                state.link_up = True
                state.capacity_bits_per_s = event.capacity_bits_per_s
            else:
                state.capacity_bits_per_s = event.capacity_bits_per_s
            if (state.advertised, state.capacity_bits_per_s) == before:
                return None
            logger.info(f"[Control] {self.node_id}: link to {neighbor} {event.kind} "
                        f"({event.capacity_bits_per_s:.0f} bits/s)")
        else:
            _, neighbor, alive = event
            state = self.neighbors[neighbor]
            if state.alive == alive:
                return None
            state.alive = alive
            if alive:
                state.last_hello = self._clock()
            logger.info(f"[Control] {self.node_id}: neighbour {neighbor} {'alive' if alive else 'dead'}")
        return self.originate_lsa()

    # ------------------------------------------------ flow optimisation

    def _routes(self, topology: TopologyGraph) -> Tuple[Dict[Commodity, float], Dict[Commodity, RouteSpec]]:
        demands, routes = {}, {}
        for commodity, rate in self.flood.demand.rates().items():
            entry = self.flood.demand.continuous[commodity]
            src, dst = commodity
            if entry.tactic == "direct":
                route = RouteSpec(max_hops=1)
            elif entry.tactic == "multi":
                paths = disjoint_paths(topology, src, dst, entry.path_count, entry.max_hops) \
                    if topology.has_node(src) and topology.has_node(dst) else []
                if len(paths) < entry.path_count:
                    self.stats.dropped_commodities += 1
                    continue
                route = RouteSpec(bundle=tuple(tuple(p) for p in paths))
            else:
                route = RouteSpec(max_hops=entry.max_hops)
            try:
                check_reachable(topology, commodity, route)
            except UnreachableCommodity as e:
                self.stats.dropped_commodities += 1
                logger.debug(f"[Control] {self.node_id}: {e}")
                continue
            demands[commodity] = rate
            routes[commodity] = route
        return demands, routes

    def assignment(self) -> Optional[FlowAssignment]:
        """Current flow assignment, re-solved when demand or topology changed"""
        if not self._flows_dirty:
            return self._assignment
        self._flows_dirty = False
        topology = self.topology()
        demands, routes = self._routes(topology)
        priorities = {c: p for c, p in self.flood.demand.priorities().items() if c in demands}
        residual, reserved = reserve_priority_paths(topology, demands, priorities, routes,
                                                    self.reservation_threshold)
        try:
            if reserved:
                self._assignment = self._solve_reserved(residual, demands, priorities, routes, reserved)
            else:
                self._assignment = solve_shared(topology, demands, priorities, routes,
                                                self.epsilon, self.objective, self.solver)
        except EmptyDemand:
            self._assignment = None
        self.stats.solves += 1
        return self._assignment

    def _solve_reserved(self, residual: TopologyGraph, demands, priorities, routes,
                        reserved: Dict[Commodity, Dict[Column, float]]) -> FlowAssignment:
        """Shared solve of the unreserved demand on the residual capacity, merged with the reservations"""
        rest: Dict[Commodity, float] = {}
        for commodity, demand in demands.items():
            left = demand - sum(reserved.get(commodity, {}).values())
            if left <= demand * 1e-9:
                continue
            try:
                check_reachable(residual, commodity, routes[commodity])
            except UnreachableCommodity as e:
                logger.debug(f"[Control] {self.node_id}: after reservations {e}")
                continue
            rest[commodity] = left
        columns = {c: dict(flows) for c, flows in reserved.items()}
        solved = None
        if rest:
            solved = solve_shared(residual, rest, {c: priorities.get(c, 1.0) for c in rest},
                                  {c: routes[c] for c in rest}, self.epsilon, self.objective, self.solver)
            for commodity, flows in solved.column_flows.items():
                merged = columns.setdefault(commodity, {})
                for column, rate in flows.items():
                    merged[column] = merged.get(column, 0.0) + rate
        lam = solved.lam if solved is not None else 1.0
        for commodity, demand in demands.items():
            if commodity not in rest:
                lam = min(lam, sum(columns.get(commodity, {}).values()) / demand)
        logger.debug(f"[Control] {self.node_id}: {len(reserved)} commodities reserved, {len(rest)} solved")
        return FlowAssignment(
            lam=lam, demands=dict(demands), priorities=dict(priorities), column_flows=columns,
            objective=self.objective, solver=self.solver,
            dual_bound=solved.dual_bound if solved is not None else None,
            phases=solved.phases if solved is not None else 0,
        )

    @property
    def lam(self) -> float:
        assignment = self.assignment()
        return assignment.lam if assignment is not None else 0.0

    def satisfied_ratio(self) -> float:
        assignment = self.assignment()
        return assignment.satisfied_ratio() if assignment is not None else 1.0

    def achieved_rate(self, commodity: Commodity) -> float:
        assignment = self.assignment()
        if assignment is None or commodity not in assignment.demands:
            return 0.0
        return assignment.capped().delivered(commodity)

    # -------------------------------------------------- generation API

    def request_generation(self, src: str, dst: str, mode, tactics: Optional[RelayTactics],
                           priority: float = 1.0) -> float:
        """
        KMS entry point: announce demand of a local site towards `dst`.

        Args:
            mode: Continuous, OneTime or Hybrid; None stops generation

        Returns:
            achieved bits/s for continuous demand, accepted bits for one-time
        """
        commodity = (src, dst)
        if mode is None:
            if commodity in self._announced or self.flood.demand.one_time.get(commodity):
                self.broadcast_kgm(self._kgm(src, dst, "stop"))
                self._announced.pop(commodity, None)
            for scheduler in self.schedulers.values():
                scheduler.fifo.cancel(commodity)
            return 0.0
        if isinstance(mode, Hybrid):
            self._announce_rate(commodity, mode.base_rate_bits_per_s, tactics, priority)
            self._one_time(commodity, mode.reserve_bits, tactics, priority)
            return self.achieved_rate(commodity)
        if isinstance(mode, OneTime):
            return float(self._one_time(commodity, mode.amount_bits, tactics, priority))
        self._announce_rate(commodity, mode.rate_bits_per_s, tactics, priority)
        return self.achieved_rate(commodity)

    def _announce_rate(self, commodity: Commodity, rate: float, tactics, priority: float):
        previous = self._announced.get(commodity)
        if previous is not None and previous.priority == priority \
                and (tactics is None or previous.tactic == tactics.name) \
                and abs(previous.rate_bits_per_s - rate) <= RATE_CHANGE_THRESHOLD * previous.rate_bits_per_s:
            return
        kgm = self._kgm(*commodity, "continuous", tactics, priority, rate=rate)
        self._announced[commodity] = kgm
        self.broadcast_kgm(kgm)

    def _one_time(self, commodity: Commodity, amount_bits: int, tactics, priority: float) -> int:
        if amount_bits <= 0:
            return 0
        column = self._one_time_column(commodity, tactics)
        if column is None:
            return 0
        self.broadcast_kgm(self._kgm(*commodity, "one_time", tactics, priority, amount=amount_bits))
        link = (self.node_id, column[0][1])
        self.schedulers[link].fifo.push(commodity, amount_bits, column=column)
        return amount_bits

    def _one_time_column(self, commodity: Commodity, tactics) -> Optional[Column]:
        src, dst = commodity
        topology = self.topology()
        try:
            if isinstance(tactics, MultiPath):
                paths = disjoint_paths(topology, src, dst, tactics.path_count, tactics.max_hops)
                return tuple(tuple(p) for p in paths) if len(paths) == tactics.path_count else None
            path = shortest_path(topology, src, dst)
        except Unreachable:
            return None
        if isinstance(tactics, DirectOnly) and len(path) != 2:
            return None
        return (tuple(path),)

    # ------------------------------------------------------- scheduling

    def _link_entries(self, assignment: FlowAssignment) -> Dict[Tuple[str, str], Dict[tuple, float]]:
        """
        Capped rates per outgoing link: commodities sourced here on their
        first hop, keyed by column, and commodities relayed through here,
        keyed by commodity alone.
        """
        entries: Dict[Tuple[str, str], Dict[tuple, float]] = {link: {} for link in self.schedulers}
        for commodity, columns in assignment.capped().column_flows.items():
            for column, rate in columns.items():
                if rate <= 0:
                    continue
                if commodity[0] == self.node_id:
                    link = (self.node_id, column[0][1])
                    if link in entries:
                        entries[link][(commodity, column)] = rate
                    continue
                for path in column:
                    for here, nxt in zip(path[1:-1], path[2:]):
                        link = (here, nxt)
                        if here == self.node_id and link in entries:
                            key = (commodity, None)
                            entries[link][key] = entries[link].get(key, 0.0) + rate
        return entries

    def schedule(self, interval_s: float = None) -> int:
        """
        One scheduling round: accrue backlog, issue tickets, execute them.

        Local commodities accrue backlog at their assigned rate; relayed
        commodities take the data plane's queue as backlog. Queued relays
        without an assigned rate get the link's smallest weight.

        Returns:
            bits served by the data plane
        """
        interval_s = interval_s or self.scheduling_interval_s
        assignment = self.assignment()
        entries = self._link_entries(assignment) if assignment is not None else {}
        queued = self._transit_backlog()
        served = 0
        for link, scheduler in sorted(self.schedulers.items()):
            rates = dict(entries.get(link, {}))
            floor = min(rates.values(), default=1.0)
            for (out, commodity), bits in sorted(queued.items()):
                if out == link and bits > 0:
                    rates.setdefault((tuple(commodity), None), floor)
            scheduler.dwrr.set_weights(rates)
            for key, rate in rates.items():
                commodity = key[0]
                if commodity[0] != self.node_id:
                    scheduler.dwrr.set_backlog(key, queued.get((link, commodity), 0))
                    continue
                cap = rate * interval_s * BACKLOG_INTERVALS
                backlog = scheduler.dwrr.backlog(key) or 0.0
                scheduler.dwrr.accrue(key, min(rate * interval_s, max(0.0, cap - backlog)))
            state = self.neighbors[link[1]]
            if not state.advertised:
                continue
            for ticket in scheduler.tickets(state.capacity_bits_per_s * interval_s):
                self.stats.tickets += 1
                try:
                    done = self._executor(ticket)
                except ControlPlaneError as e:
                    logger.warning(f"[Control] {self.node_id}: ticket failed: {e}")
                    done = 0
                served += done
                if done < ticket.amount_bits:
                    scheduler.requeue(ticket, ticket.amount_bits - done)
        self.stats.served_bits += served
        return served

    def requeue(self, ticket: WorkTicket, unserved_bits: int):
        """Bits of a relay that failed after its ticket was counted as served"""
        scheduler = self.schedulers.get(ticket.link)
        if scheduler is not None:
            scheduler.requeue(ticket, unserved_bits)

    # ------------------------------------------------------- dispatch

    def on_message(self, frame: WireMessage, received_from: Optional[str] = None):
        """Entry point for control frames"""
        if isinstance(frame, SealedFrame):
            received_from = frame.src
            frame = self._open(frame)
            if frame is None:
                return
        if isinstance(frame, KgmMessage):
            self.handle_kgm(frame, received_from)
        elif isinstance(frame, LsaMessage):
            self.flood_lsa(frame, received_from)
        elif isinstance(frame, HelloMessage):
            self._handle_hello(frame)

    def demand_snapshot(self) -> tuple:
        return self.flood.demand.snapshot()

