# Topology reconstruction and path computation

"""
Routing Module for QKeyMesh
Topology graphs built from link-state databases, deterministic shortest paths,
hop-limited and node-disjoint path sets, and priority reservations
"""

import logging
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import networkx as nx

from ..errors import OverReserved, Unreachable

logger = logging.getLogger(__name__)

Link = Tuple[str, str]
Path = Tuple[str, ...]


def link_key(a: str, b: str) -> Link:
    """Undirected link identifier with endpoints in lexicographic order"""
    return (a, b) if a <= b else (b, a)


class TopologyGraph:
    """Undirected quantum-link topology with key-generation capacities in bits/s"""

    def __init__(self, links: Iterable[Tuple[str, str, float]] = (), nodes: Iterable[str] = ()):
        self.graph = nx.Graph()
        for node in sorted(nodes):
            self.graph.add_node(node)
        for a, b, capacity in sorted((*link_key(a, b), c) for a, b, c in links):
            self.add_link(a, b, capacity)

    @property
    def nodes(self) -> List[str]:
        return sorted(self.graph.nodes)

    def links(self) -> List[Tuple[str, str, float]]:
        return sorted((*link_key(a, b), float(d["capacity"])) for a, b, d in self.graph.edges(data=True))

    def link_keys(self) -> List[Link]:
        return [(a, b) for a, b, _ in self.links()]

    def add_link(self, a: str, b: str, capacity: float):
        if a == b:
            raise ValueError(f"self-loop on {a}")
        self.graph.add_edge(a, b, capacity=float(capacity))

    def remove_link(self, a: str, b: str):
        if self.graph.has_edge(a, b):
            self.graph.remove_edge(a, b)

    def set_capacity(self, a: str, b: str, capacity: float):
        self.graph[a][b]["capacity"] = float(capacity)

    def capacity(self, a: str, b: str) -> float:
        if not self.graph.has_edge(a, b):
            return 0.0
        return float(self.graph[a][b]["capacity"])

    def has_link(self, a: str, b: str) -> bool:
        return self.graph.has_edge(a, b)

    def has_node(self, node: str) -> bool:
        return node in self.graph

    def neighbors(self, node: str) -> List[str]:
        if node not in self.graph:
            return []
        return sorted(self.graph.neighbors(node))

    def copy(self) -> "TopologyGraph":
        return TopologyGraph(self.links(), self.nodes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TopologyGraph):
            return NotImplemented
        return self.nodes == other.nodes and self.links() == other.links()

    def __repr__(self):
        return f"TopologyGraph(nodes={len(self.graph)}, links={self.graph.number_of_edges()})"


def build_topology(lsa_db: Mapping[str, object]) -> TopologyGraph:
    """
    Reconstruct the network from a complete set of link-state advertisements.

    A link exists only when both endpoints advertise it; its capacity is the
    smaller of the two advertised values.

    Args:
        lsa_db: origin node -> latest LSA (anything with `neighbors` as
            (node_id, capacity) pairs)
    """
    advertised: Dict[str, Dict[str, float]] = {
        origin: {nbr: float(cap) for nbr, cap in lsa.neighbors}
        for origin, lsa in lsa_db.items()
    }
    links = []
    for origin, neighbors in advertised.items():
        for nbr, capacity in neighbors.items():
            if origin < nbr and origin in advertised.get(nbr, {}):
                links.append((origin, nbr, min(capacity, advertised[nbr][origin])))
    return TopologyGraph(links, advertised.keys())


def _hop_distances(topology: TopologyGraph, dst: str) -> Dict[str, int]:
    return nx.single_source_shortest_path_length(topology.graph, dst)


def shortest_path(topology: TopologyGraph, src: str, dst: str) -> List[str]:
    """
    Minimum-hop path; ties go to the lexicographically smallest node sequence.

    Raises:
        Unreachable: an endpoint is missing or the graph is partitioned
    """
    if not topology.has_node(src) or not topology.has_node(dst):
        raise Unreachable(f"{src} -> {dst}: endpoint not in topology")
    distance = _hop_distances(topology, dst)
    if src not in distance:
        raise Unreachable(f"{src} -> {dst}: no path")
    path = [src]
    node = src
    while node != dst:
        node = min(n for n in topology.neighbors(node) if distance.get(n) == distance[node] - 1)
        path.append(node)
    return path


def routing_table(topology: TopologyGraph, node: str) -> Dict[str, str]:
    """Destination -> next hop for every reachable destination"""
    table = {}
    if not topology.has_node(node):
        return table
    for dst in topology.nodes:
        if dst == node:
            continue
        try:
            table[dst] = shortest_path(topology, node, dst)[1]
        except Unreachable:
            continue
    return table


def hop_limited_paths(
    topology: TopologyGraph,
    src: str,
    dst: str,
    max_hops: Optional[int] = None,
    limit: Optional[int] = None,
) -> List[List[str]]:
    """Simple paths of at most `max_hops` links, shortest first then lexicographic"""
    if not topology.has_node(src) or not topology.has_node(dst) or src == dst:
        return []
    if limit == 1:
        try:
            path = shortest_path(topology, src, dst)
        except Unreachable:
            return []
        return [path] if max_hops is None or len(path) - 1 <= max_hops else []
    cutoff = max_hops if max_hops is not None else len(topology.graph) - 1
    paths = sorted(nx.all_simple_paths(topology.graph, src, dst, cutoff=cutoff), key=lambda p: (len(p), p))
    return paths[:limit] if limit is not None else paths


def disjoint_paths(
    topology: TopologyGraph,
    src: str,
    dst: str,
    k: int,
    max_hops: Optional[int] = None,
) -> List[List[str]]:
    """
    Up to k node-disjoint paths, found greedily.

    Each round takes the shortest path in the graph left after removing the
    intermediate nodes (and a direct link) used by earlier rounds.
    """
    remaining = topology.copy()
    paths: List[List[str]] = []
    while len(paths) < k:
        try:
            path = shortest_path(remaining, src, dst)
        except Unreachable:
            break
        if max_hops is not None and len(path) - 1 > max_hops:
            break
        paths.append(path)
        if len(path) == 2:
            remaining.remove_link(src, dst)
        for node in path[1:-1]:
            remaining.graph.remove_node(node)
    return paths


def subtract_priority_reservations(
    topology: TopologyGraph,
    reservations: Mapping[Link, float],
) -> TopologyGraph:
    """
    Capacity left after high-priority reservations.

    Raises:
        OverReserved: a reservation exceeds its link's capacity
    """
    reduced = topology.copy()
    for (a, b), reserved in sorted(reservations.items()):
        capacity = topology.capacity(a, b)
        if reserved > capacity:
            raise OverReserved(f"{a}-{b}: reserving {reserved} of {capacity} bits/s")
        if reserved:
            reduced.set_capacity(a, b, capacity - reserved)
    return reduced


def path_links(path: Sequence[str]) -> List[Link]:
    return [link_key(a, b) for a, b in zip(path, path[1:])]
