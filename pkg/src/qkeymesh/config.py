#!/usr/bin/env python3
"""
Configuration file for QKeyMesh
Centralized settings and parameters for the key management stack and simulator
"""

import os
from pathlib import Path

# Try to load from .env file
try:
    from dotenv import load_dotenv
    load_dotenv()
    ENV_LOADED = True
except ImportError:
    ENV_LOADED = False

# ============================================================
# APPLICATION SETTINGS
# ============================================================

APP_NAME = "QKeyMesh"
APP_VERSION = "0.1.0"
APP_DESCRIPTION = "Multi-site QKD key management, trusted-node relay and key-generation routing simulator"

# ============================================================
# KEY POOL SETTINGS
# ============================================================

# Window both sites allocate from (opposite ends)
WORKING_SET_BYTES = 4096

# Advance the working set once this fraction of it is Consumed
WORKING_SET_ADVANCE_FRACTION = 0.75

# Bytes at the start of every generation kept for inter-site key refresh
RESERVED_REGION_BYTES = 128

# Overwrite oldest Available bytes when full (continuous generation only)
CONTINUOUS_OVERWRITE = False

# Digest algorithm is a deployment constant
POOL_DIGEST_ALGORITHM = "sha256"

# ============================================================
# KMS SETTINGS
# ============================================================

# direct | token | kms-to-kms
NEGOTIATION_MODE = "direct"

# Security class used when no policy matches a host pair
DEFAULT_SECURITY_CLASS = 4
DEFAULT_MIN_KEY_LENGTH_BYTES = 32
DEFAULT_MAX_LIFETIME_S = 60.0

INTERSITE_KEY_BYTES = 32
MAC_TAG_BYTES = 32  # HMAC-SHA256, never below 16

TOKEN_TTL_S = 10.0
NEGOTIATION_TIMEOUT_S = 5.0
MAX_NEGOTIATION_RETRIES = 5

# Demand estimation
EWMA_ALPHA = 0.2
PEAK_WINDOW_S = 60.0
DEMAND_PRIOR_BITS_PER_S = 8192.0
HYBRID_PEAK_RATIO = 2.0
DEMAND_UPDATE_INTERVAL_S = 5.0

# Pool sizing
POOL_SIZING_HORIZON_S = 120.0
POOL_SIZE_ROUNDING_BYTES = 4096

# Generation resumes below this fill fraction after a Stop
POOL_LOW_WATERMARK = 0.5

# Peer synchronisation
DIGEST_EVERY_EVENTS = 16
SYNC_CHUNK_TIMEOUT_S = 10.0
SYNC_RESEND_AFTER_S = 1.0

# Negotiation timeouts and sync housekeeping run on this period
KMS_TICK_INTERVAL_S = 0.5

# ============================================================
# QNL SETTINGS
# ============================================================

# concurrent | max_total
MCFP_OBJECTIVE = "concurrent"

# mwu | exact
MCFP_SOLVER = "mwu"
MCFP_EPSILON = 0.05

DWRR_QUANTUM_BITS = 8192
ON_DEMAND_FIRST = True
SCHEDULING_INTERVAL_S = 0.5

HELLO_INTERVAL_S = 1.0
HELLO_DEAD_MISSES = 3

LEASE_CHUNK_BYTES = 2048
RELAY_TIMEOUT_S = 10.0

# Relays passing through a node wait for a work ticket on the outgoing link
TRANSIT_SCHEDULING = True

# Commodities at or above this priority get capacity set aside before the
# shared solve
PRIORITY_RESERVATION_THRESHOLD = 2.0

# Per-origin KGM sequence numbers remembered for duplicate suppression
KGM_SEEN_WINDOW = 1024

# ============================================================
# QLL SETTINGS
# ============================================================

QLL_TICK_INTERVAL_S = 0.25

# ============================================================
# SIMULATION SETTINGS
# ============================================================

DEFAULT_SEED = int(os.getenv('QKEYMESH_SEED', '1'))
SAMPLE_INTERVAL_S = 1.0
CONVENTIONAL_LATENCY_S = 0.005
DATA_PLANE_LATENCY_S = 0.002
MIN_LATENCY_S = 1e-6
HOST_RETRY_BACKOFF_S = 0.5
HOST_MAX_WAIT_S = 10.0

# Run-time invariant assertions
CHECKS_ENABLED = os.getenv('QKEYMESH_CHECKS', '1') not in ('0', 'false', 'False', '')

# ============================================================
# OUTPUT SETTINGS
# ============================================================

OUTPUT_DIR = os.getenv('QKEYMESH_OUTPUT_DIR', 'out')
SCHEMA_DIR = os.getenv('QKEYMESH_SCHEMA_DIR', str(Path(__file__).resolve().parents[2] / "schemas"))
SCENARIO_DIR = str(Path(__file__).resolve().parents[2] / "scenarios")
METRICS_SCHEMA_VERSION = 1

# ============================================================
# LOGGING
# ============================================================

LOG_LEVEL = os.getenv('QKEYMESH_LOG_LEVEL', 'WARNING')
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# ============================================================
# TESTING SETTINGS
# ============================================================

# Bundled desk-scale scenario (5 sites, 100 hosts)
DEMO_SCENARIO = str(Path(SCENARIO_DIR) / "demo.json")

# ============================================================
# HELPER FUNCTIONS
# ============================================================

def get_config(key, default=None):
    """
    Get configuration value by key

    Args:
        key: Configuration key (e.g., 'WORKING_SET_BYTES')
        default: Default value if key not found

    Returns:
        Configuration value or default
    """
    return globals().get(key, default)


def update_config(key, value):
    """
    Update configuration value

    Args:
        key: Configuration key
        value: New value
    """
    globals()[key] = value


def print_config():
    """Print all configuration settings"""
    print("=" * 60)
    print(f"{APP_NAME} Configuration (v{APP_VERSION})")
    print("=" * 60)

    sections = [
        ("APPLICATION SETTINGS", ["APP_NAME", "APP_VERSION", "APP_DESCRIPTION"]),
        ("KEY POOL SETTINGS", ["WORKING_SET_BYTES", "WORKING_SET_ADVANCE_FRACTION",
                               "RESERVED_REGION_BYTES", "CONTINUOUS_OVERWRITE"]),
        ("KMS SETTINGS", ["NEGOTIATION_MODE", "DEFAULT_SECURITY_CLASS", "EWMA_ALPHA",
                          "PEAK_WINDOW_S", "DIGEST_EVERY_EVENTS"]),
        ("QNL SETTINGS", ["MCFP_OBJECTIVE", "MCFP_SOLVER", "MCFP_EPSILON",
                          "DWRR_QUANTUM_BITS", "HELLO_INTERVAL_S", "HELLO_DEAD_MISSES",
                          "TRANSIT_SCHEDULING", "PRIORITY_RESERVATION_THRESHOLD",
                          "KGM_SEEN_WINDOW"]),
        ("SIMULATION SETTINGS", ["DEFAULT_SEED", "SAMPLE_INTERVAL_S", "CHECKS_ENABLED"]),
        ("OUTPUT SETTINGS", ["OUTPUT_DIR", "SCHEMA_DIR", "LOG_LEVEL"]),
        ("TESTING SETTINGS", ["DEMO_SCENARIO"]),
    ]

    for section_name, keys in sections:
        print(f"\n{section_name}:")
        for key in keys:
            value = get_config(key)
            print(f"  {key}: {value}")

    print("\n" + "=" * 60)


if __name__ == "__main__":
    print_config()
