# Demand estimation and pool sizing

"""
Demand Estimation Module for QKeyMesh
Turns the history of host key requests into key-generation demand
"""

import math
from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

from .. import config
from .policy import SecurityClass


@dataclass(frozen=True)
class Continuous:
    """Generate at a steady rate"""
    rate_bits_per_s: float


@dataclass(frozen=True)
class OneTime:
    """Generate a fixed amount once"""
    amount_bits: int


@dataclass(frozen=True)
class Hybrid:
    """Steady base rate plus a one-time reserve for bursts"""
    base_rate_bits_per_s: float
    reserve_bits: int


DemandMode = Union[Continuous, OneTime, Hybrid]


@dataclass(frozen=True)
class RequestRecord:
    """One new-session arrival as seen by the local KMS"""
    timestamp_s: float
    key_bytes: int
    security_class: SecurityClass = SecurityClass.SESSION_REFRESH
    lifetime_s: Optional[float] = None
    session_duration_s: Optional[float] = None
    payload_bytes: int = 0


@dataclass(frozen=True)
class DemandEstimate:
    remote_site: str
    rate_bits_per_s: float
    peak_rate_bits_per_s: float
    mode: DemandMode


# Weight of each class in the session-key term; class 5 is counted by payload
DEFAULT_POLICY_MIX = {
    SecurityClass.CLASSICAL: 0.0,
    SecurityClass.HOST_KEY: 1.0,
    SecurityClass.EXPANDABLE: 1.0,
    SecurityClass.SESSION: 1.0,
    SecurityClass.SESSION_REFRESH: 1.0,
    SecurityClass.ONE_TIME_PAD: 0.0,
}


def _refresh_factor(record: RequestRecord) -> float:
    if (
        record.security_class is SecurityClass.SESSION_REFRESH
        and record.lifetime_s
        and record.session_duration_s
    ):
        return float(math.ceil(record.session_duration_s / record.lifetime_s))
    return 1.0


@dataclass
class _Folded:
    """Running state of the bins before `next_bin`"""
    next_bin: int
    sessions: Optional[float] = None  # EWMA of session weight per bin
    payload: Optional[float] = None  # EWMA of one-time-pad bytes per bin
    key_bytes: float = 0.0
    keys: int = 0
    refresh: float = 0.0


def _ewma(values: Sequence[float], alpha: float, smoothed: Optional[float] = None) -> Optional[float]:
    for value in values:
        smoothed = value if smoothed is None else alpha * value + (1 - alpha) * smoothed
    return smoothed


def _bin_series(
    records: Sequence[RequestRecord],
    first_bin: int,
    last_bin: int,
    mix: Mapping[SecurityClass, float],
    totals: _Folded,
) -> Tuple[List[float], List[float]]:
    """Session weight and payload bytes per bin of [first_bin, last_bin); key sizes go to `totals`"""
    bins = last_bin - first_bin
    sessions = [0.0] * bins
    payload = [0.0] * bins
    for record in records:
        index = math.floor(record.timestamp_s) - first_bin
        if index < 0 or index >= bins:
            continue
        weight = mix.get(record.security_class, 1.0)
        if record.security_class is SecurityClass.ONE_TIME_PAD:
            payload[index] += record.payload_bytes
        if weight > 0:
            sessions[index] += weight
            totals.key_bytes += record.key_bytes
            totals.keys += 1
            totals.refresh += _refresh_factor(record)
    return sessions, payload


def _demand(
    remote_site: str,
    sessions: Sequence[float],
    payload: Sequence[float],
    totals: _Folded,
    alpha: float,
    peak_window_s: float,
) -> DemandEstimate:
    mean_key = totals.key_bytes / totals.keys if totals.keys else 0.0
    mean_refresh = totals.refresh / totals.keys if totals.keys else 1.0
    per_session_bits = mean_key * 8 * mean_refresh

    rate = _ewma(sessions, alpha, totals.sessions) * per_session_bits + 8 * _ewma(payload, alpha, totals.payload)
    window = max(1, int(peak_window_s))
    per_bin = [s * per_session_bits + 8 * p for s, p in zip(sessions[-window:], payload[-window:])]
    peak = max(per_bin + [rate])

    if rate > 0 and peak > config.HYBRID_PEAK_RATIO * rate:
        reserve = int(math.ceil((peak - rate) * config.DEMAND_UPDATE_INTERVAL_S))
        mode: DemandMode = Hybrid(rate, reserve)
    else:
        mode = Continuous(rate)
    return DemandEstimate(remote_site, rate, peak, mode)


def _mix(policy_mix: Optional[Mapping[SecurityClass, float]]) -> Dict[SecurityClass, float]:
    mix = dict(DEFAULT_POLICY_MIX)
    if policy_mix:
        mix.update(policy_mix)
    return mix


def estimate_demand(
    request_history: Sequence[RequestRecord],
    policy_mix: Optional[Mapping[SecurityClass, float]] = None,
    now: Optional[float] = None,
    remote_site: str = "",
    alpha: float = None,
    peak_window_s: float = None,
    prior_bits_per_s: float = None,
) -> DemandEstimate:
    """
    Estimate key-generation demand towards one remote site.

    rate = EWMA(session arrivals per 1 s bin) x mean key bytes x 8 x refresh
    factor, plus 8 x EWMA(one-time-pad payload bytes per bin). The peak is
    the largest per-bin rate within the sliding window. Only complete bins
    before `now` are used.

    Args:
        request_history: New-session arrivals in time order
        policy_mix: Per-class weight of the session-key term
        now: Current time (defaults to just after the last arrival's bin)
        remote_site: Site the estimate is for

    Returns:
        DemandEstimate; an empty history yields the configured prior
    """
    alpha = config.EWMA_ALPHA if alpha is None else alpha
    peak_window_s = peak_window_s or config.PEAK_WINDOW_S
    prior = config.DEMAND_PRIOR_BITS_PER_S if prior_bits_per_s is None else prior_bits_per_s

    if request_history:
        first_bin = math.floor(request_history[0].timestamp_s)
        last_bin = math.floor(now) if now is not None else math.floor(request_history[-1].timestamp_s) + 1
    if not request_history or last_bin <= first_bin:
        return DemandEstimate(remote_site, prior, prior, Continuous(prior))

    totals = _Folded(first_bin)
    sessions, payload = _bin_series(request_history, first_bin, last_bin, _mix(policy_mix), totals)
    return _demand(remote_site, sessions, payload, totals, alpha, peak_window_s)


def size_pool(estimate: DemandEstimate, horizon_s: float = None, rounding_bytes: int = None) -> int:
    """Pool capacity covering the peak rate over the sizing horizon"""
    horizon_s = horizon_s or config.POOL_SIZING_HORIZON_S
    rounding_bytes = rounding_bytes or config.POOL_SIZE_ROUNDING_BYTES
    needed = estimate.peak_rate_bits_per_s * horizon_s / 8
    return max(rounding_bytes, int(math.ceil(needed / rounding_bytes)) * rounding_bytes)



class DemandEstimator:
    """
    Per-remote-site request history kept by one KMS.

    Bins that have left the peak window are folded into running EWMA and
    mean state and their records dropped; the history holds the peak window
    plus the bin in progress. `now` only moves forward.
    """

    def __init__(self, policy_mix: Optional[Mapping[SecurityClass, float]] = None,
                 alpha: float = None, peak_window_s: float = None):
        self.policy_mix = policy_mix
        self.alpha = config.EWMA_ALPHA if alpha is None else alpha
        self.peak_window_s = peak_window_s or config.PEAK_WINDOW_S
        self.history: Dict[str, List[RequestRecord]] = defaultdict(list)
        self._folded: Dict[str, _Folded] = {}

    def record(self, remote_site: str, record: RequestRecord):
        self.history[remote_site].append(record)

    def estimate(self, remote_site: str, now: float) -> DemandEstimate:
        records = self.history.get(remote_site, [])
        folded = self._folded.get(remote_site)
        if folded is None:
            if not records:
                return estimate_demand([], remote_site=remote_site)
            folded = _Folded(math.floor(records[0].timestamp_s))
        last_bin = math.floor(now)
        if folded.sessions is None and last_bin <= folded.next_bin:
            return estimate_demand([], remote_site=remote_site)
        last_bin = max(last_bin, folded.next_bin + 1)
        cutoff = last_bin - max(1, int(self.peak_window_s))
        if cutoff > folded.next_bin:
            self._fold(remote_site, folded, cutoff)
        totals = replace(folded)
        sessions, payload = _bin_series(self.history[remote_site], folded.next_bin, last_bin,
                                        _mix(self.policy_mix), totals)
        return _demand(remote_site, sessions, payload, totals, self.alpha, self.peak_window_s)

    def _fold(self, remote_site: str, folded: _Folded, cutoff: int):
        records = self.history[remote_site]
        split = next((i for i, r in enumerate(records) if math.floor(r.timestamp_s) >= cutoff), len(records))
        sessions, payload = _bin_series(records[:split], folded.next_bin, cutoff, _mix(self.policy_mix), folded)
        folded.sessions = _ewma(sessions, self.alpha, folded.sessions)
        folded.payload = _ewma(payload, self.alpha, folded.payload)
        folded.next_bin = cutoff
        self.history[remote_site] = records[split:]
        self._folded[remote_site] = folded
