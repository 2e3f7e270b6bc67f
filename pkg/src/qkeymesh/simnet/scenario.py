# Scenario files: validation and loading

"""
Scenario Module for QKeyMesh

A scenario is a JSON document validated in two passes: the shipped JSON schema
(Draft 2020-12) and reference checks the schema cannot express. Every error is
reported with the JSON pointer of the offending value.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Union

from jsonschema import Draft202012Validator

from .. import config
from ..errors import ScenarioInvalid
from ..kms.policy import PolicyDatabase
from ..qll import QuantumLinkConfig
from ..qnl.routing import link_key
from .engine import ChannelModel, default_channels
from .workload import HostWorkload

logger = logging.getLogger(__name__)

SCHEMA_FILE = "scenario.schema.json"


def load_schema(name: str = SCHEMA_FILE) -> dict:
    with open(Path(config.SCHEMA_DIR) / name) as f:
        return json.load(f)


def _pointer(path) -> str:
    parts = [str(p).replace("~", "~0").replace("/", "~1") for p in path]
    return "/" + "/".join(parts) if parts else ""


def schema_errors(data: object) -> List[str]:
    validator = Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(data), key=lambda e: [str(p) for p in e.absolute_path])
    return [f"{_pointer(e.absolute_path) or '/'}: {e.message}" for e in errors]


def reference_errors(data: Mapping) -> List[str]:
    """Cross-references: ids exist and are unique, links and schedules make sense"""
    errors = []
    site_ids = [s["id"] for s in data.get("sites", [])]
    sites = set(site_ids)
    for i, site in enumerate(data.get("sites", [])):
        if site_ids.count(site["id"]) > 1:
            errors.append(f"/sites/{i}/id: duplicate site {site['id']!r}")
        for other in site.get("priorities", {}):
            if other not in sites:
                errors.append(f"/sites/{i}/priorities/{other}: unknown site {other!r}")

    host_ids = [h["id"] for h in data.get("hosts", [])]
    hosts = {}
    for i, host in enumerate(data.get("hosts", [])):
        if host_ids.count(host["id"]) > 1:
            errors.append(f"/hosts/{i}/id: duplicate host {host['id']!r}")
        if host["site"] not in sites:
            errors.append(f"/hosts/{i}/site: unknown site {host['site']!r}")
        hosts[host["id"]] = host["site"]

    seen_links = set()
    for i, link in enumerate(data.get("quantum_links", [])):
        a, b = link["endpoints"]
        for j, end in enumerate((a, b)):
            if end not in sites:
                errors.append(f"/quantum_links/{i}/endpoints/{j}: unknown site {end!r}")
        if a == b:
            errors.append(f"/quantum_links/{i}/endpoints: link from {a!r} to itself")
        elif link_key(a, b) in seen_links:
            errors.append(f"/quantum_links/{i}/endpoints: duplicate link {a}-{b}")
        seen_links.add(link_key(a, b))
        current = link.get("current_rate_bits_per_s")
        if current is not None and current > link["rate_bits_per_s"]:
            errors.append(f"/quantum_links/{i}/current_rate_bits_per_s: exceeds rate_bits_per_s")
        for j, (start, end) in enumerate(link.get("windows", [])):
            if end <= start:
                errors.append(f"/quantum_links/{i}/windows/{j}: window ends before it starts")
        for j, failure in enumerate(link.get("failures", [])):
            restore = failure.get("restore_at_s")
            if restore is not None and restore <= failure["at_s"]:
                errors.append(f"/quantum_links/{i}/failures/{j}/restore_at_s: restore before failure")

    for i, workload in enumerate(data.get("workloads", [])):
        members = _workload_hosts(workload)
        if not members:
            errors.append(f"/workloads/{i}: names no host")
        for j, host in enumerate(members):
            where = f"/workloads/{i}/host" if "host" in workload else f"/workloads/{i}/hosts/{j}"
            if host not in hosts:
                errors.append(f"{where}: unknown host {host!r}")
        peers = workload.get("peers", [])
        for peer in peers:
            where = f"/workloads/{i}/peers/{peers.index(peer) if isinstance(peers, list) else peer}"
            if peer not in hosts:
                errors.append(f"{where}: unknown host {peer!r}")
            elif any(hosts.get(h) == hosts[peer] for h in members):
                errors.append(f"{where}: peer {peer!r} is on the requesting host's site")
        mix = workload.get("class_mix")
        if mix is not None and sum(mix.values()) <= 0:
            errors.append(f"/workloads/{i}/class_mix: weights sum to zero")
    return errors


def _workload_hosts(workload: Mapping) -> List[str]:
    if "host" in workload:
        return [workload["host"]]
    return list(workload.get("hosts", []))


def validate_scenario(data: object) -> List[str]:
    """
    All problems of a scenario document.

    Returns:
        Error strings "<json pointer>: <message>"; empty when valid
    """
    errors = schema_errors(data)
    if errors:
        return errors
    return reference_errors(data)


@dataclass
class Scenario:
    """A validated scenario"""
    name: str
    seed: int
    duration_s: float
    negotiation_mode: str
    sites: List[str]
    hosts: Dict[str, str]  # host -> site
    links: List[QuantumLinkConfig]
    channels: Dict[str, ChannelModel]
    policies: PolicyDatabase
    workloads: List[HostWorkload]
    priorities: Dict[str, Dict[str, float]] = field(default_factory=dict)
    qnl: Dict[str, object] = field(default_factory=dict)
    pool: Dict[str, object] = field(default_factory=dict)
    sample_interval_s: float = config.SAMPLE_INTERVAL_S
    raw: Dict[str, object] = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, data: Mapping) -> "Scenario":
        """
        Raises:
            ScenarioInvalid: schema or reference errors
        """
        errors = validate_scenario(data)
        if errors:
            raise ScenarioInvalid(errors)
        hosts = {h["id"]: h["site"] for h in data.get("hosts", [])}
        channels = default_channels()
        for name, model in data.get("conventional_channels", {}).items():
            channels[name] = ChannelModel.from_dict({"latency_s": channels[name].latency_s, **model})
        workloads = []
        for entry in data.get("workloads", []):
            for host in _workload_hosts(entry):
                workloads.append(HostWorkload.from_dict(entry, host, hosts[host]))
        return cls(
            name=data.get("name", "scenario"),
            seed=int(data.get("seed", config.DEFAULT_SEED)),
            duration_s=float(data.get("duration_s", 60.0)),
            negotiation_mode=data.get("negotiation_mode", config.NEGOTIATION_MODE),
            sites=sorted(s["id"] for s in data["sites"]),
            hosts=hosts,
            links=[QuantumLinkConfig.from_dict(link) for link in data["quantum_links"]],
            channels=channels,
            policies=PolicyDatabase.from_list(data.get("policies", [])),
            workloads=workloads,
            priorities={s["id"]: dict(s.get("priorities", {})) for s in data["sites"]},
            qnl=dict(data.get("qnl", {})),
            pool=dict(data.get("pool", {})),
            sample_interval_s=float(data.get("sample_interval_s", config.SAMPLE_INTERVAL_S)),
            raw=dict(data),
        )

    def neighbors(self, site: str) -> Dict[str, float]:
        """Quantum neighbours of a site with their configured link rates"""
        out = {}
        for link in self.links:
            a, b = link.endpoints
            if site in (a, b):
                out[b if a == site else a] = link.current_rate_bits_per_s
        return out

    def hosts_at(self, site: str) -> List[str]:
        return sorted(h for h, s in self.hosts.items() if s == site)

    def scaled(self, factor: float) -> "Scenario":
        """Same scenario with every quantum link rate multiplied by `factor`"""
        data = json.loads(json.dumps(self.raw))
        for link in data["quantum_links"]:
            link["rate_bits_per_s"] *= factor
            if link.get("current_rate_bits_per_s") is not None:
                link["current_rate_bits_per_s"] *= factor
        return Scenario.from_dict(data)


def load_scenario(source: Union[str, Path, Mapping], overrides: Optional[Mapping] = None) -> Scenario:
    """
    Read and validate a scenario.

    Args:
        source: Path of a JSON file, or an already parsed document
        overrides: Top-level keys replacing the file's values (seed, duration_s)

    Raises:
        ScenarioInvalid: unreadable, schema-invalid or dangling references
    """
    if isinstance(source, Mapping):
        data = dict(source)
    else:
        try:
            with open(source) as f:
                data = json.load(f)
        except OSError as e:
            raise ScenarioInvalid([f"/: cannot read {source}: {e.strerror}"])
        except json.JSONDecodeError as e:
            raise ScenarioInvalid([f"/: not JSON (line {e.lineno}, column {e.colno}): {e.msg}"])
    if not isinstance(data, dict):
        raise ScenarioInvalid(["/: scenario must be a JSON object"])
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    scenario = Scenario.from_dict(data)
    logger.info(f"[Sim] scenario {scenario.name}: {len(scenario.sites)} sites, "
                f"{len(scenario.hosts)} hosts, {len(scenario.links)} links")
    return scenario

