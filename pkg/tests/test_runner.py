import json

import pytest

from qkeymesh import config
from qkeymesh.simnet.node import refresh_count
from qkeymesh.simnet.runner import Simulation, run
from qkeymesh.simnet.scenario import Scenario, load_scenario

CHAIN = {
    "name": "chain",
    "seed": 5,
    "duration_s": 20,
    "sites": [{"id": "A"}, {"id": "B"}, {"id": "C"}],
    "hosts": [{"id": "a1", "site": "A"}, {"id": "a2", "site": "A"}, {"id": "c1", "site": "C"}],
    "quantum_links": [
        {"endpoints": ["A", "B"], "rate_bits_per_s": 64000},
        {"endpoints": ["B", "C"], "rate_bits_per_s": 64000},
    ],
    "workloads": [{"hosts": ["a1", "a2"], "rate_per_s": 0.5, "peers": ["c1"],
                   "session_duration_s": 5, "lifetime_s": 2}],
}


def as_text(result):
    return json.dumps(result.record.summary, sort_keys=True, default=str)


def test_refresh_count():
    assert refresh_count(30, 10) == 2
    assert refresh_count(25, 10) == 2
    assert refresh_count(5, 10) == 0
    assert refresh_count(30, None) == 0


def test_chain_run_relays_keys_end_to_end():
    result = run(Scenario.from_dict(CHAIN), checks=True)
    summary = result.record.summary
    assert summary["sessions_started"] > 0
    assert summary["confirmed"] > 0
    assert summary["relays_completed"] > 0
    assert summary["invariant_checks"] == len(result.record.rows)
    assert result.record.rows[-1]["time_s"] == 20.0
    assert summary["pool_fill_bytes_by_site"].keys() == {"A", "B", "C"}
    assert set(result.nodes) == {"A", "B", "C"}


def test_same_seed_same_run():
    first = run(Scenario.from_dict(CHAIN), events=True)
    second = run(Scenario.from_dict(CHAIN), events=True)
    assert first.events and first.events == second.events
    assert first.record.frame().equals(second.record.frame())
    assert as_text(first) == as_text(second)
    other = run(Scenario.from_dict(CHAIN), seed=6, events=True)
    assert other.events != first.events


def test_zero_duration_writes_empty_outputs(tmp_path):
    result = run(Scenario.from_dict(CHAIN), duration_s=0, out_dir=str(tmp_path))
    assert result.record.rows == []
    assert result.record.summary["events_executed"] == 0
    assert (tmp_path / "metrics.csv").exists()
    assert json.loads((tmp_path / "summary.json").read_text())["scenario"] == "chain"


def test_run_writes_event_log(tmp_path):
    run(Scenario.from_dict(CHAIN), duration_s=2, out_dir=str(tmp_path), events=True)
    lines = (tmp_path / "events.log").read_text().splitlines()
    assert lines
    stamps = [float(line.split()[0]) for line in lines]
    assert stamps == sorted(stamps)
    assert any(line.endswith(" lsa") for line in lines)


@pytest.mark.slow
def test_demo_is_deterministic():
    scenario = load_scenario(config.DEMO_SCENARIO)
    first = Simulation(scenario, trace=True).run(20.0)
    second = Simulation(scenario, trace=True).run(20.0)
    assert first.events == second.events
    assert as_text(first) == as_text(second)


@pytest.mark.slow
def test_satisfied_ratio_grows_with_link_capacity():
    scenario = load_scenario(config.DEMO_SCENARIO)
    ratios = []
    for factor in (0.25, 1.0, 4.0):
        summary = run(scenario.scaled(factor)).record.summary
        assert summary["confirmed"] > 0
        ratios.append(summary["demand_satisfied_ratio"])
    for low, high in zip(ratios, ratios[1:]):
        assert high >= low - 0.05


def test_refreshing_session_renews_its_key():
    data = {
        "name": "refresh",
        "duration_s": 40,
        "sites": [{"id": "A"}, {"id": "B"}],
        "hosts": [{"id": "a1", "site": "A"}, {"id": "b1", "site": "B"}],
        "quantum_links": [{"endpoints": ["A", "B"], "rate_bits_per_s": 64000}],
        "policies": [{"class": 4, "refresh_interval_s": 10}],
        "workloads": [{"host": "a1", "schedule": [1.0], "peers": ["b1"], "session_duration_s": 25}],
    }
    result = run(Scenario.from_dict(data), checks=True)
    stats = result.nodes["A"].stats
    assert (stats.sessions_started, stats.sessions_completed) == (1, 1)
    assert stats.session_refreshes == refresh_count(25, 10) == 2
    assert result.record.summary["confirmed"] == 3


def test_checks_follow_the_configuration():
    enabled = config.get_config("CHECKS_ENABLED")
    try:
        config.update_config("CHECKS_ENABLED", False)
        assert not Simulation(Scenario.from_dict(CHAIN)).checks
        config.update_config("CHECKS_ENABLED", True)
        assert Simulation(Scenario.from_dict(CHAIN)).checks
    finally:
        config.update_config("CHECKS_ENABLED", enabled)
