# Run metrics: time series and summary

"""
Metrics Module for QKeyMesh

metrics.csv has one row per sample interval with the columns below, in this
order. summary.json holds final aggregates. Both carry METRICS_SCHEMA_VERSION;
adding or reordering columns or keys bumps it.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd

from .. import config

logger = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "time_s",
    "pool_fill_bytes_total",
    "grants_per_s",
    "race_conflicts",
    "fallbacks_c0",
    "fallbacks_c1",
    "fallbacks_c2",
    "blocked_requests",
    "demand_satisfied_ratio",
    "lambda",
    "link_utilization_mean",
    "link_utilization_max",
    "relay_latency_mean_s",
    "relay_count",
]

SUMMARY_KEYS = [
    "schema_version",
    "scenario",
    "seed",
    "duration_s",
    "lambda",
    "lambda_mean",
    "demand_satisfied_ratio",
    "grants",
    "confirmed",
    "failed",
    "race_conflicts",
    "token_retries",
    "fallbacks",
    "blocked_requests",
    "refreshes",
    "sessions_started",
    "sessions_completed",
    "sessions_abandoned",
    "relays_completed",
    "relay_latency_mean_s",
    "delivered_key_bits",
    "mac_failures",
    "pool_purges",
    "pool_fill_bytes_by_site",
    "invariant_checks",
    "events_executed",
]


@dataclass
class MetricsRecord:
    """Time series plus final aggregates of one run"""
    rows: List[Dict[str, float]] = field(default_factory=list)
    summary: Dict[str, object] = field(default_factory=dict)

    def add_row(self, row: Dict[str, float]):
        missing = [c for c in METRIC_COLUMNS if c not in row]
        if missing:
            raise ValueError(f"metrics row lacks {missing}")
        self.rows.append({c: row[c] for c in METRIC_COLUMNS})

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=METRIC_COLUMNS)

    def write(self, out_dir: str, events: Optional[List[str]] = None) -> List[Path]:
        """
        Write metrics.csv, summary.json and, when given, events.log.

        Returns:
            Paths written
        """
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = [out / "metrics.csv", out / "summary.json"]
        self.frame().to_csv(written[0], index=False, float_format="%.6f")
        with open(written[1], "w") as f:
            json.dump(_jsonable(self.summary), f, indent=2, sort_keys=False)
            f.write("\n")
        if events is not None:
            path = out / "events.log"
            path.write_text("".join(line + "\n" for line in events))
            written.append(path)
        logger.info(f"[Sim] wrote {', '.join(p.name for p in written)} to {out}")
        return written


def _jsonable(value):
    if isinstance(value, float):
        return None if math.isnan(value) or math.isinf(value) else round(value, 9)
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def mean_or_nan(values: List[float]) -> float:
    return sum(values) / len(values) if values else float("nan")


def empty_summary(scenario: str, seed: int, duration_s: float) -> Dict[str, object]:
    summary = {key: 0 for key in SUMMARY_KEYS}
    summary.update(
        schema_version=config.METRICS_SCHEMA_VERSION,
        scenario=scenario,
        seed=seed,
        duration_s=duration_s,
        fallbacks={"c0": 0, "c1": 0, "c2": 0},
        pool_fill_bytes_by_site={},
        lambda_mean=float("nan"),
        relay_latency_mean_s=float("nan"),
    )
    return summary
