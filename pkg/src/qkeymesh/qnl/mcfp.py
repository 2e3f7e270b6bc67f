# Key-generation flow optimisation

"""
Multi-Commodity Flow Module for QKeyMesh

Finds how much of every site pair's key demand the network can generate
concurrently. A commodity is a (src, dst) site pair; its route is either any
path (optionally hop-limited) or a pinned bundle of node-disjoint paths, where
every unit of commodity flow occupies one unit on each path of the bundle.
Link capacity is undirected: flows in both directions share it.

Solvers:
    mwu    multiplicative-weights approximation with a duality-gap stop
    exact  linear program over enumerated paths (OR-Tools GLOP)
"""

import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import networkx as nx
from ortools.linear_solver import pywraplp

from .. import config
from ..errors import EmptyDemand, UnreachableCommodity
from .routing import Link, Path, TopologyGraph, hop_limited_paths, link_key, path_links

logger = logging.getLogger(__name__)

Commodity = Tuple[str, str]
Column = Tuple[Path, ...]

MAX_PHASES = 500
FEASIBILITY_TOLERANCE = 1e-6


@dataclass(frozen=True)
class RouteSpec:
    """Where a commodity may flow"""
    max_hops: Optional[int] = None
    bundle: Optional[Column] = None  # pinned node-disjoint paths

    @property
    def pinned(self) -> bool:
        return self.bundle is not None


@dataclass
class FlowAssignment:
    """
    Solver result.

    `lam` is the common satisfied fraction of the (priority-weighted) demands
    and is reported uncapped; `capped()` scales flows down so no commodity
    gets more than it asked for.
    """
    lam: float
    demands: Dict[Commodity, float]
    priorities: Dict[Commodity, float] = field(default_factory=dict)
    column_flows: Dict[Commodity, Dict[Column, float]] = field(default_factory=dict)
    objective: str = "concurrent"
    solver: str = "mwu"
    dual_bound: Optional[float] = None
    phases: int = 0

    def weighted_demand(self, commodity: Commodity) -> float:
        return self.demands[commodity] * self.priorities.get(commodity, 1.0)

    def delivered(self, commodity: Commodity) -> float:
        return sum(self.column_flows.get(commodity, {}).values())

    def path_flows(self, commodity: Commodity) -> Dict[Path, float]:
        flows: Dict[Path, float] = defaultdict(float)
        for column, rate in self.column_flows.get(commodity, {}).items():
            for path in column:
                flows[path] += rate
        return dict(flows)

    def link_flows(self) -> Dict[Tuple[Link, Commodity], float]:
        """(link, commodity) -> rate"""
        flows: Dict[Tuple[Link, Commodity], float] = defaultdict(float)
        for commodity, columns in self.column_flows.items():
            for column, rate in columns.items():
                for path in column:
                    for link in path_links(path):
                        flows[(link, commodity)] += rate
        return dict(flows)

    def link_loads(self) -> Dict[Link, float]:
        loads: Dict[Link, float] = defaultdict(float)
        for (link, _), rate in self.link_flows().items():
            loads[link] += rate
        return dict(loads)

    def arc_flows(self, commodity: Commodity) -> Dict[Tuple[str, str], float]:
        """Directed per-commodity flows (for conservation checks)"""
        flows: Dict[Tuple[str, str], float] = defaultdict(float)
        for path, rate in self.path_flows(commodity).items():
            for a, b in zip(path, path[1:]):
                flows[(a, b)] += rate
        return dict(flows)

    def satisfied_ratio(self) -> float:
        return min(self.lam, 1.0)

    def capped(self) -> "FlowAssignment":
        """Flows scaled so each commodity receives at most its demand"""
        columns = {}
        for commodity, flows in self.column_flows.items():
            delivered = sum(flows.values())
            demand = self.demands[commodity]
            factor = min(1.0, demand / delivered) if delivered > 0 else 0.0
            columns[commodity] = {c: r * factor for c, r in flows.items()}
        return FlowAssignment(
            lam=self.lam, demands=dict(self.demands), priorities=dict(self.priorities),
            column_flows=columns, objective=self.objective, solver=self.solver,
            dual_bound=self.dual_bound, phases=self.phases,
        )

    def violations(self, topology: TopologyGraph, tolerance: float = FEASIBILITY_TOLERANCE) -> List[str]:
        """Capacity and conservation breaches; empty when feasible"""
        problems = []
        for link, load in sorted(self.link_loads().items()):
            capacity = topology.capacity(*link)
            if load > capacity * (1 + tolerance) + tolerance:
                problems.append(f"link {link[0]}-{link[1]} carries {load:.3f} > {capacity:.3f}")
        for commodity in sorted(self.column_flows):
            src, dst = commodity
            balance: Dict[str, float] = defaultdict(float)
            for (a, b), rate in self.arc_flows(commodity).items():
                balance[a] -= rate
                balance[b] += rate
            for node, net in balance.items():
                if node not in (src, dst) and abs(net) > tolerance * max(1.0, self.delivered(commodity)):
                    problems.append(f"commodity {src}->{dst} not conserved at {node}")
        return problems


def _column_usage(column: Column) -> Counter:
    usage: Counter = Counter()
    for path in column:
        usage.update(path_links(path))
    return usage


def _normalize(demands, priorities, routes):
    active = {c: float(r) for c, r in sorted(demands.items()) if r and r > 0}
    if not active:
        raise EmptyDemand("no commodity with a positive demand")
    priorities = {c: float((priorities or {}).get(c, 1.0)) for c in active}
    routes = {c: (routes or {}).get(c) or RouteSpec() for c in active}
    return active, priorities, routes


def check_reachable(topology: TopologyGraph, commodity: Commodity, route: RouteSpec):
    src, dst = commodity
    if route.pinned:
        for path in route.bundle:
            for a, b in zip(path, path[1:]):
                if not topology.has_link(a, b):
                    raise UnreachableCommodity(f"{src}->{dst}: pinned path {'-'.join(path)} broken")
        return
    if not hop_limited_paths(topology, src, dst, route.max_hops, limit=1):
        raise UnreachableCommodity(f"{src}->{dst}: no path within {route.max_hops} hops")


def solve_mcfp(
    topology: TopologyGraph,
    demands: Mapping[Commodity, float],
    epsilon: float = None,
    priorities: Optional[Mapping[Commodity, float]] = None,
    routes: Optional[Mapping[Commodity, RouteSpec]] = None,
    objective: str = None,
    solver: str = None,
) -> FlowAssignment:
    """
    Maximise the common fraction of all demands routable within capacity.

    Args:
        topology: Links and capacities (bits/s)
        demands: (src, dst) -> rate in bits/s
        epsilon: Approximation tolerance of the mwu solver
        priorities: Demand weights; the solver works on demand x weight
        routes: Hop limits or pinned bundles per commodity
        objective: concurrent | max_total
        solver: mwu | exact

    Returns:
        FlowAssignment with lam >= (1 - epsilon) x optimum

    Raises:
        EmptyDemand: no positive demand
        UnreachableCommodity: a commodity has no admissible route
    """
    epsilon = config.MCFP_EPSILON if epsilon is None else epsilon
    objective = objective or config.MCFP_OBJECTIVE
    solver = solver or config.MCFP_SOLVER
    active, weights, route_specs = _normalize(demands, priorities, routes)
    for commodity, route in route_specs.items():
        check_reachable(topology, commodity, route)

    if objective == "max_total":
        return _solve_exact(topology, active, weights, route_specs, objective)
    if solver == "exact":
        return _solve_exact(topology, active, weights, route_specs, objective)
    result = _MultiplicativeWeights(topology, active, weights, route_specs, epsilon).run()
    if result is None:
        logger.info("[Control] multiplicative weights did not certify; solving the path LP")
        return _solve_exact(topology, active, weights, route_specs, objective)
    return result


class _MultiplicativeWeights:
    """Garg-Koenemann style concurrent-flow approximation"""

    def __init__(self, topology, demands, weights, routes, epsilon):
        self.topology = topology
        self.demands = demands
        self.weights = weights
        self.routes = routes
        self.epsilon = epsilon
        self.inner = epsilon
        self.capacity = {(a, b): c for a, b, c in topology.links() if c > 0}
        self.graph = nx.Graph()
        self.graph.add_nodes_from(topology.nodes)
        self.graph.add_edges_from(sorted(self.capacity))

    def _lengths_init(self) -> Dict[Link, float]:
        total = max(1, len(self.capacity))
        return {link: 1.0 / (cap * total) for link, cap in self.capacity.items()}

    def _best_column(self, commodity: Commodity, lengths: Dict[Link, float]) -> Tuple[Optional[Column], float]:
        route = self.routes[commodity]
        if route.pinned:
            usage = _column_usage(route.bundle)
            if any(link not in self.capacity for link in usage):
                return None, math.inf
            return route.bundle, sum(lengths[link] * n for link, n in usage.items())
        src, dst = commodity
        if route.max_hops is None:
            try:
                path = nx.dijkstra_path(self.graph, src, dst, weight=lambda a, b, _: lengths[link_key(a, b)])
            except nx.NetworkXNoPath:
                return None, math.inf
            return (tuple(path),), sum(lengths[link] for link in path_links(path))
        return self._hop_limited(src, dst, route.max_hops, lengths)

    def _hop_limited(self, src, dst, max_hops, lengths):
        """Cheapest path of at most max_hops links (Bellman-Ford by hop count)"""
        best = {src: (0.0, (src,))}
        answer = (None, math.inf)
        frontier = dict(best)
        for _ in range(max_hops):
            nxt: Dict[str, Tuple[float, Path]] = {}
            for node in sorted(frontier):
                cost, path = frontier[node]
                for nbr in sorted(self.graph.neighbors(node)):
                    candidate = cost + lengths[link_key(node, nbr)]
                    if nbr not in nxt or candidate < nxt[nbr][0]:
                        nxt[nbr] = (candidate, path + (nbr,))
            if dst in nxt and nxt[dst][0] < answer[1]:
                answer = ((nxt[dst][1],), nxt[dst][0])
            frontier = {n: v for n, v in nxt.items() if n != dst}
            if not frontier:
                break
        return answer

    def _scale(self) -> float:
        """Demand multiplier putting the optimum between 1 and the commodity count"""
        bounds = []
        directed = self.graph.to_directed()
        for commodity, demand in self.demands.items():
            route = self.routes[commodity]
            if route.pinned:
                usage = _column_usage(route.bundle)
                bound = min(self.capacity[link] / n for link, n in usage.items())
            else:
                bound = self._max_flow(directed, commodity)
            bounds.append(bound / (demand * self.weights[commodity]))
        upper = min(bounds)
        if upper <= 0:
            return 0.0
        return upper / len(self.demands)

    def _max_flow(self, directed, commodity) -> float:
        for a, b in directed.edges:
            directed[a][b]["capacity"] = self.capacity[link_key(a, b)]
        return nx.maximum_flow_value(directed, commodity[0], commodity[1], capacity="capacity")

    def run(self) -> Optional[FlowAssignment]:
        scale = self._scale()
        if scale <= 0:
            return FlowAssignment(0.0, dict(self.demands), dict(self.weights),
                                  {c: {} for c in self.demands}, solver="mwu", dual_bound=0.0)
        demand = {c: d * self.weights[c] * scale for c, d in self.demands.items()}
        lengths = self._lengths_init()
        flows: Dict[Commodity, Dict[Column, float]] = {c: defaultdict(float) for c in demand}
        load: Dict[Link, float] = defaultdict(float)
        best_primal, best_dual = 0.0, math.inf
        best_flows, best_kappa = None, 1.0

        for phase in range(1, MAX_PHASES + 1):
            for commodity in demand:
                remaining = demand[commodity]
                while remaining > 1e-12 * demand[commodity]:
                    column, _ = self._best_column(commodity, lengths)
                    if column is None:
                        return None
                    usage = _column_usage(column)
                    amount = min(remaining, min(self.capacity[l] / n for l, n in usage.items()))
                    flows[commodity][column] += amount
                    remaining -= amount
                    for link, n in usage.items():
                        load[link] += amount * n
                        lengths[link] *= 1 + self.inner * amount * n / self.capacity[link]

            kappa = max(load[l] / self.capacity[l] for l in load)
            primal = phase / kappa
            total = sum(self.capacity[l] * lengths[l] for l in self.capacity)
            alpha = sum(demand[c] * self._best_column(c, lengths)[1] for c in demand)
            dual = total / alpha if alpha > 0 else math.inf
            if primal > best_primal:
                best_primal, best_kappa = primal, kappa
                best_flows = {c: dict(f) for c, f in flows.items()}
            best_dual = min(best_dual, dual)
            if best_primal >= (1 - self.epsilon) * best_dual:
                logger.debug(f"[Control] mwu certified after {phase} phases: "
                             f"{best_primal * scale:.4f} vs bound {best_dual * scale:.4f}")
                columns = {
                    c: {col: rate / best_kappa for col, rate in f.items()}
                    for c, f in best_flows.items()
                }
                return FlowAssignment(
                    lam=best_primal * scale,
                    demands=dict(self.demands),
                    priorities=dict(self.weights),
                    column_flows=columns,
                    solver="mwu",
                    dual_bound=best_dual * scale,
                    phases=phase,
                )
            for link in lengths:
                lengths[link] /= total
        return None


def _candidate_columns(topology: TopologyGraph, commodity: Commodity, route: RouteSpec) -> List[Column]:
    if route.pinned:
        return [route.bundle]
    usable = TopologyGraph([(a, b, c) for a, b, c in topology.links() if c > 0], topology.nodes)
    return [(tuple(p),) for p in hop_limited_paths(usable, commodity[0], commodity[1], route.max_hops)]


def _solve_exact(topology, demands, weights, routes, objective) -> FlowAssignment:
    """Path-based LP; objective concurrent maximises lam, max_total the total flow"""
    lp = pywraplp.Solver.CreateSolver("GLOP")
    lam = lp.NumVar(0, lp.infinity(), "lambda")
    variables: Dict[Commodity, Dict[Column, object]] = {}
    per_link: Dict[Link, list] = defaultdict(list)
    for commodity in demands:
        variables[commodity] = {}
        for i, column in enumerate(_candidate_columns(topology, commodity, routes[commodity])):
            var = lp.NumVar(0, lp.infinity(), f"x_{commodity[0]}_{commodity[1]}_{i}")
            variables[commodity][column] = var
            for link, n in _column_usage(column).items():
                per_link[link].append((var, n))
    for link, terms in per_link.items():
        lp.Add(sum(n * var for var, n in terms) <= topology.capacity(*link))

    weighted = {c: d * weights[c] for c, d in demands.items()}
    for commodity, columns in variables.items():
        routed = sum(columns.values()) if columns else 0
        if objective == "max_total":
            lp.Add(routed <= weighted[commodity])
        else:
            lp.Add(routed == lam * weighted[commodity])
    if objective == "max_total":
        lp.Maximize(sum(var for cols in variables.values() for var in cols.values()))
    else:
        lp.Maximize(lam)
    status = lp.Solve()
    if status != pywraplp.Solver.OPTIMAL:
        raise UnreachableCommodity(f"path LP not solved (status {status})")

    columns = {
        c: {col: var.solution_value() for col, var in cols.items() if var.solution_value() > 0}
        for c, cols in variables.items()
    }
    if objective == "max_total":
        value = min(sum(columns[c].values()) / weighted[c] for c in weighted)
    else:
        value = lam.solution_value()
    return FlowAssignment(
        lam=value, demands=dict(demands), priorities=dict(weights), column_flows=columns,
        objective=objective, solver="exact", dual_bound=value,
    )
