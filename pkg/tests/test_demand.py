import pytest

from qkeymesh import config
from qkeymesh.kms.demand import (
    Continuous,
    DemandEstimator,
    Hybrid,
    RequestRecord,
    estimate_demand,
    size_pool,
)
from qkeymesh.kms.policy import SecurityClass


def steady(sessions_per_s=10, seconds=10, **fields):
    return [
        RequestRecord(t + k / sessions_per_s, 32, **fields)
        for t in range(seconds) for k in range(sessions_per_s)
    ]


def test_steady_sessions_without_refresh():
    estimate = estimate_demand(steady(), remote_site="B")
    assert estimate.rate_bits_per_s == pytest.approx(2560.0)
    assert estimate.peak_rate_bits_per_s == pytest.approx(2560.0)
    assert isinstance(estimate.mode, Continuous)
    assert estimate.remote_site == "B"


def test_refresh_factor_multiplies_session_bits():
    history = steady(lifetime_s=10.0, session_duration_s=35.0)
    assert estimate_demand(history).rate_bits_per_s == pytest.approx(2560.0 * 4)


def test_one_time_pad_counts_payload_bytes():
    history = [RequestRecord(float(t), 1000, SecurityClass.ONE_TIME_PAD, payload_bytes=1000) for t in range(10)]
    assert estimate_demand(history).rate_bits_per_s == pytest.approx(8000.0)


def test_classical_sessions_need_no_key_material():
    history = steady(security_class=SecurityClass.CLASSICAL)
    estimate = estimate_demand(history)
    assert estimate.rate_bits_per_s == 0.0
    assert isinstance(estimate.mode, Continuous)


def test_empty_history_uses_prior():
    estimate = estimate_demand([], remote_site="C")
    assert estimate.rate_bits_per_s == config.DEMAND_PRIOR_BITS_PER_S
    assert estimate.mode == Continuous(config.DEMAND_PRIOR_BITS_PER_S)


def test_bursts_switch_to_hybrid():
    history = [RequestRecord(float(t), 32) for t in range(9)]
    history += [RequestRecord(9 + k / 20, 32) for k in range(20)]
    estimate = estimate_demand(history)
    assert estimate.peak_rate_bits_per_s == pytest.approx(20 * 256)
    assert isinstance(estimate.mode, Hybrid)
    assert estimate.mode.reserve_bits > 0


def test_only_bins_before_now_count():
    history = steady(seconds=5)
    assert estimate_demand(history, now=3.0).rate_bits_per_s == pytest.approx(2560.0)
    assert estimate_demand(history, now=0.5).mode == Continuous(config.DEMAND_PRIOR_BITS_PER_S)


def test_pool_sizing_rounds_up():
    estimate = estimate_demand(steady())
    assert size_pool(estimate) == 40960
    assert size_pool(estimate_demand([])) == 122880
    assert size_pool(estimate, horizon_s=0.001) == config.POOL_SIZE_ROUNDING_BYTES


def test_estimator_keeps_history_per_site():
    estimator = DemandEstimator()
    for record in steady():
        estimator.record("B", record)
    assert estimator.estimate("B", now=10.0).rate_bits_per_s == pytest.approx(2560.0)
    assert estimator.estimate("C", now=10.0).rate_bits_per_s == config.DEMAND_PRIOR_BITS_PER_S


def mixed_history(spacing=0.25, until=220.0, gap=(100.0, 160.0)):
    classes = [
        dict(security_class=SecurityClass.SESSION_REFRESH, lifetime_s=10.0, session_duration_s=25.0),
        dict(security_class=SecurityClass.ONE_TIME_PAD, payload_bytes=500),
        dict(security_class=SecurityClass.CLASSICAL),
        dict(security_class=SecurityClass.HOST_KEY),
    ]
    history = []
    for step in range(int(until / spacing)):
        t = step * spacing
        if gap[0] <= t < gap[1]:
            continue
        history.append(RequestRecord(t, 16 + 16 * (step % 3), **classes[step % len(classes)]))
    return history


def test_estimator_forgets_old_records_without_changing_the_estimate():
    history = mixed_history()
    estimator = DemandEstimator()
    for count, record in enumerate(history, start=1):
        estimator.record("B", record)
        if count % 5:
            continue
        now = record.timestamp_s
        expected = estimate_demand(history[:count], now=now, remote_site="B")
        got = estimator.estimate("B", now=now)
        assert got.rate_bits_per_s == pytest.approx(expected.rate_bits_per_s)
        assert got.peak_rate_bits_per_s == pytest.approx(expected.peak_rate_bits_per_s)
        assert type(got.mode) is type(expected.mode)
        assert len(estimator.history["B"]) <= (config.PEAK_WINDOW_S + 2) / 0.25
    assert len(estimator.history["B"]) < len(history) / 2
