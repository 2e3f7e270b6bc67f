import math
from collections import Counter

import numpy as np

from qkeymesh.kms.policy import SecurityClass
from qkeymesh.simnet.workload import (
    HostWorkload,
    arrival_times,
    generate_host_traffic,
    merge_traffic,
)


def test_poisson_arrival_count():
    workload = HostWorkload("h1", "A", rate_per_s=10.0, peers={"h2": 1.0})
    count = len(arrival_times(workload, 100.0, np.random.default_rng(11)))
    assert abs(count - 1000) <= 3 * math.sqrt(1000)


def test_fixed_schedule_is_clipped_to_the_run():
    workload = HostWorkload.from_dict({"schedule": [5, 1, 30], "peers": ["h2"]}, "h1", "A")
    assert arrival_times(workload, 10.0, np.random.default_rng(0)) == [1.0, 5.0]
    assert HostWorkload("h1", "A").rate_per_s is None
    assert arrival_times(HostWorkload("h1", "A"), 10.0, np.random.default_rng(0)) == []


def test_traffic_follows_peers_and_class_mix():
    workload = HostWorkload("h1", "A", rate_per_s=50.0, peers={"h2": 3.0, "h3": 1.0},
                            class_mix={4: 0.5, 5: 0.5}, payload_bytes=100)
    events = generate_host_traffic(workload, 40.0, np.random.default_rng(2))
    peers = Counter(e.remote_host_id for e in events)
    classes = Counter(e.security_class for e in events)
    assert 0.65 < peers["h2"] / len(events) < 0.85
    assert set(classes) == {SecurityClass.SESSION_REFRESH, SecurityClass.ONE_TIME_PAD}
    for event in events:
        if event.security_class is SecurityClass.ONE_TIME_PAD:
            assert event.payload_bytes >= 1
        else:
            assert event.payload_bytes == 0
    assert [e.time_s for e in events] == sorted(e.time_s for e in events)


def test_same_stream_same_traffic():
    workload = HostWorkload("h1", "A", rate_per_s=5.0, peers={"h2": 1.0})
    first = generate_host_traffic(workload, 20.0, np.random.default_rng(9))
    assert first == generate_host_traffic(workload, 20.0, np.random.default_rng(9))
    assert generate_host_traffic(HostWorkload("h1", "A", rate_per_s=5.0), 20.0, np.random.default_rng(9)) == []


def test_from_dict_defaults():
    workload = HostWorkload.from_dict({"rate_per_s": 1, "peers": {"h2": 2}}, "h1", "A")
    assert workload.class_mix == {4: 1.0}
    assert workload.peers == {"h2": 2.0}
    assert workload.key_length_bytes == 32


def test_merged_traffic_is_time_ordered():
    a = generate_host_traffic(HostWorkload("a", "A", rate_per_s=3.0, peers={"b": 1.0}), 10.0,
                              np.random.default_rng(1))
    b = generate_host_traffic(HostWorkload("b", "B", schedule=[0.0, 5.0], peers={"a": 1.0}), 10.0,
                              np.random.default_rng(2))
    merged = merge_traffic([a, b])
    assert len(merged) == len(a) + len(b)
    assert [(e.time_s, e.host_id) for e in merged] == sorted((e.time_s, e.host_id) for e in merged)
    assert merged[0].host_id == "b"
