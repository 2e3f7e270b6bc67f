# Whole-network simulation runs

"""
Simulation Runner Module for QKeyMesh

Builds one SiteNode per site, the quantum link layer and the host workload
from a scenario, drives everything on one simulator clock and samples the
metrics time series. A run is a pure function of (scenario, seed).
"""

import copy
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .. import config
from ..qll import LinkIndication, LinkLayer
from ..qnl.routing import Link
from .engine import RandomStreams, Simulator, Transport
from .invariants import GrantLedger, RelayAudit, check_flow_feasibility, check_stream_audit
from .metrics import MetricsRecord, empty_summary, mean_or_nan
from .node import SiteNode, route_frame
from .scenario import Scenario
from .workload import generate_host_traffic, merge_traffic

logger = logging.getLogger(__name__)

# Demand is first announced once the initial LSAs have flooded
FLOOD_SETTLE_S = 0.1


@dataclass
class RunResult:
    record: MetricsRecord
    events: List[str] = field(default_factory=list)
    nodes: Dict[str, SiteNode] = field(default_factory=dict)


class Simulation:
    """One run of a scenario"""

    def __init__(self, scenario: Scenario, seed: Optional[int] = None, trace: bool = False,
                 checks: Optional[bool] = None):
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else int(seed)
        self.checks = config.CHECKS_ENABLED if checks is None else checks
        self.sim = Simulator(trace)
        self.streams = RandomStreams(self.seed)
        self.nodes: Dict[str, SiteNode] = {}
        self.transport = Transport(self.sim, self.streams, scenario.channels, route_frame(self.nodes))
        self.ledger = GrantLedger()
        self.audit = RelayAudit()

        for site in scenario.sites:
            self.nodes[site] = SiteNode(
                site, self.sim, self.transport, self.streams,
                sites=scenario.sites,
                hosts=scenario.hosts,
                neighbors=scenario.neighbors(site),
                policy_db=scenario.policies,
                mode=scenario.negotiation_mode,
                pool_options=scenario.pool,
                qnl_options=scenario.qnl,
                priorities=scenario.priorities.get(site),
                demand_targets=self._demand_targets(site),
                ledger=self.ledger if self.checks else None,
                audit=self.audit.record if self.checks else None,
                peer_key=self._peer_key if self.checks else None,
            )
        self.links = LinkLayer(copy.deepcopy(scenario.links), self.streams.get,
                               self._raw_key, self._link_indication)
        self.record = MetricsRecord()
        self._previous = {"grants": 0, "relays": 0}
        self._latency_marks: Dict[str, int] = {}
        self._last_sample_s = 0.0
        self._previous_pad: Dict[Tuple[str, str], int] = {}
        self._lambdas: List[float] = []
        self.invariant_checks = 0

    def _demand_targets(self, site: str) -> List[str]:
        targets = set()
        for workload in self.scenario.workloads:
            if workload.site == site:
                targets.update(self.scenario.hosts[peer] for peer in workload.peers)
        return sorted(targets - {site})

    # --------------------------------------------------------- wiring

    def _raw_key(self, link: Link, data: bytes):
        a, b = link
        self.nodes[a].raw_key(b, data)
        self.nodes[b].raw_key(a, data)

    def _link_indication(self, node: str, indication: LinkIndication):
        self.nodes[node].link_indication(indication)

    def _peer_key(self, remote_site: str, session_id: int) -> Optional[bytes]:
        response = self.nodes[remote_site].kms.remote_sessions.get(session_id)
        return response.session_key if response is not None else None

    # ------------------------------------------------------- schedule

    def _install(self, duration_s: float):
        sim = self.sim
        for site, node in self.nodes.items():
            sim.schedule(0.0, site, "lsa", node.control.originate_lsa)
            sim.every(node.control.hello_interval_s, site, "hello", node.hello)
            sim.every(node.control.scheduling_interval_s, site, "schedule", node.control.schedule,
                      start_s=FLOOD_SETTLE_S)
            sim.every(node.control.scheduling_interval_s, site, "relay_tick", node.data.tick,
                      start_s=FLOOD_SETTLE_S)
            sim.every(config.KMS_TICK_INTERVAL_S, site, "kms_tick", node.kms.tick)
            sim.every(config.DEMAND_UPDATE_INTERVAL_S, site, "demand", node.kms.update_demand,
                      start_s=FLOOD_SETTLE_S)

        sim.every(config.QLL_TICK_INTERVAL_S, "qll", "qll_tick", self._tick_links,
                  start_s=config.QLL_TICK_INTERVAL_S)
        for cfg in self.scenario.links:
            for at_s, restore_at_s in cfg.failure_schedule:
                sim.schedule(at_s, f"{cfg.endpoints[0]}|{cfg.endpoints[1]}", "link_fail",
                             lambda link=cfg.endpoints: self.links.fail_link(link))
                if restore_at_s is not None:
                    sim.schedule(restore_at_s, f"{cfg.endpoints[0]}|{cfg.endpoints[1]}", "link_restore",
                                 lambda link=cfg.endpoints: self.links.restore_link(link))

        traffic = merge_traffic([
            generate_host_traffic(w, duration_s, self.streams.get(f"workload:{w.host_id}"))
            for w in self.scenario.workloads
        ])
        for request in traffic:
            node = self.nodes[self.scenario.hosts[request.host_id]]
            sim.schedule(request.time_s, request.host_id, "key_request",
                         lambda node=node, request=request: node.start_session(request))
        logger.info(f"[Sim] {len(traffic)} key requests scheduled over {duration_s}s")

        interval = self.scenario.sample_interval_s
        sim.every(interval, "metrics", "sample", self._sample, start_s=interval)

    def _tick_links(self):
        for link in self.links.links:
            self.links.tick(link, config.QLL_TICK_INTERVAL_S)

    # -------------------------------------------------------- metrics

    def _check(self):
        check_stream_audit(node.data for node in self.nodes.values())
        for node in self.nodes.values():
            assignment = node.control.assignment()
            if assignment is not None:
                check_flow_feasibility(assignment, node.control.topology())
        self.invariant_checks += 1

    def _sample(self):
        if self.checks:
            self._check()
        interval = max(self.sim.now - self._last_sample_s, config.MIN_LATENCY_S)
        self._last_sample_s = self.sim.now
        nodes = list(self.nodes.values())
        kms = [node.kms.stats for node in nodes]
        data = [node.data.stats for node in nodes]

        grants = sum(s.grants for s in kms)
        relays = sum(s.relays_completed for s in data)
        fresh_latencies = [
            x for n in nodes for x in n.data.stats.latencies[self._latency_marks.get(n.site_id, 0):]
        ]
        self._latency_marks = {n.site_id: len(n.data.stats.latencies) for n in nodes}

        utilizations = []
        capacities = self.links.capacities()
        for node in nodes:
            for link, consumed in node.consumed_pad_bytes().items():
                rate = self.links.get(*link).config.max_rate_bits_per_s
                delta = consumed - self._previous_pad.get(link, 0)
                self._previous_pad[link] = consumed
                if capacities.get(tuple(sorted(link)), 0.0) > 0:
                    utilizations.append(8 * delta / (rate * interval))
                else:
                    utilizations.append(0.0)

        lam = mean_or_nan([node.control.lam for node in nodes])
        self._lambdas.append(lam)
        fallbacks = {c: sum(s.fallbacks.get(c, 0) for s in kms) for c in (0, 1, 2)}
        self.record.add_row({
            "time_s": self.sim.now,
            "pool_fill_bytes_total": sum(node.pool_fill_bytes() for node in nodes),
            "grants_per_s": (grants - self._previous["grants"]) / interval,
            "race_conflicts": sum(s.race_conflicts for s in kms),
            "fallbacks_c0": fallbacks[0],
            "fallbacks_c1": fallbacks[1],
            "fallbacks_c2": fallbacks[2],
            "blocked_requests": sum(s.blocked for s in kms),
            "demand_satisfied_ratio": mean_or_nan([node.control.satisfied_ratio() for node in nodes]),
            "lambda": lam,
            "link_utilization_mean": mean_or_nan(utilizations),
            "link_utilization_max": max(utilizations) if utilizations else float("nan"),
            "relay_latency_mean_s": mean_or_nan(fresh_latencies),
            "relay_count": relays - self._previous["relays"],
        })
        self._previous.update(grants=grants, relays=relays)

    def summarize(self, duration_s: float) -> Dict[str, object]:
        nodes = list(self.nodes.values())
        kms = [node.kms.stats for node in nodes]
        data = [node.data.stats for node in nodes]
        summary = empty_summary(self.scenario.name, self.seed, duration_s)
        delivered = defaultdict(int)
        for s in data:
            for (node, remote), bits in s.delivered_bits.items():
                delivered[f"{node}>{remote}"] += bits
        summary.update(
            {"lambda": mean_or_nan([node.control.lam for node in nodes])},
            lambda_mean=mean_or_nan(self._lambdas),
            demand_satisfied_ratio=mean_or_nan([node.control.satisfied_ratio() for node in nodes]),
            grants=sum(s.grants for s in kms),
            confirmed=sum(s.confirmed for s in kms),
            failed=sum(s.failed for s in kms),
            race_conflicts=sum(s.race_conflicts for s in kms),
            token_retries=sum(s.token_retries for s in kms),
            fallbacks={f"c{c}": sum(s.fallbacks.get(c, 0) for s in kms) for c in (0, 1, 2)},
            blocked_requests=sum(s.blocked for s in kms),
            refreshes=sum(node.stats.session_refreshes for node in nodes),
            sessions_started=sum(node.stats.sessions_started for node in nodes),
            sessions_completed=sum(node.stats.sessions_completed for node in nodes),
            sessions_abandoned=sum(node.stats.sessions_abandoned for node in nodes),
            relays_completed=sum(s.relays_completed for s in data),
            relay_latency_mean_s=mean_or_nan([x for s in data for x in s.latencies]),
            delivered_key_bits=dict(sorted(delivered.items())),
            mac_failures=sum(s.mac_failures for s in kms) + sum(n.control.stats.mac_failures for n in nodes),
            pool_purges=sum(sync.stats.purges for n in nodes for sync in n.kms.syncs.values()),
            pool_fill_bytes_by_site={n.site_id: n.pool_fill_bytes() for n in nodes},
            invariant_checks=self.invariant_checks,
            events_executed=self.sim.executed,
        )
        return summary

    # ------------------------------------------------------------ run

    def run(self, duration_s: Optional[float] = None) -> RunResult:
        """
        Raises:
            InvariantViolation: a run-time check failed (the run is aborted)
        """
        duration_s = self.scenario.duration_s if duration_s is None else float(duration_s)
        logger.info(f"[Sim] run {self.scenario.name} seed={self.seed} for {duration_s}s")
        if duration_s > 0:
            self._install(duration_s)
            self.sim.run(duration_s)
            self._sample()
        self.record.summary = self.summarize(duration_s)
        events = [e.trace_line() for e in self.sim.trace] if self.sim.trace is not None else []
        logger.info(f"[Sim] run finished: {self.sim.executed} events, "
                    f"{self.record.summary['confirmed']} sessions confirmed")
        return RunResult(self.record, events, self.nodes)


def run(scenario: Scenario, seed: Optional[int] = None, duration_s: Optional[float] = None,
        out_dir: Optional[str] = None, events: bool = False, checks: Optional[bool] = None) -> RunResult:
    """
    Run a scenario and optionally write its outputs.

    Args:
        scenario: Validated scenario
        seed: Overrides the scenario seed
        duration_s: Overrides the scenario duration
        out_dir: Where metrics.csv, summary.json (and events.log) go
        events: Keep the event trace and write events.log

    Returns:
        RunResult with the metrics record, trace lines and final node states
    """
    simulation = Simulation(scenario, seed, trace=events, checks=checks)
    result = simulation.run(duration_s)
    if out_dir is not None:
        result.record.write(out_dir, result.events if events else None)
    return result
