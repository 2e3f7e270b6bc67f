# Exception hierarchy

"""
Errors raised across QKeyMesh.

Every protocol error named by an operation is its own class so handlers can
answer with a precise ERROR frame code (`code` attribute).
"""


class QKeyMeshError(Exception):
    """Base class for all QKeyMesh errors"""
    code = "ERROR"


# ---------------------------------------------------------------- key pool

class PoolError(QKeyMeshError):
    """Quantum key pool errors"""
    pass


class PoolFull(PoolError):
    """Capacity exhausted and continuous overwrite disabled"""
    code = "POOL_FULL"


class InsufficientMaterial(PoolError):
    """Not enough Available bytes for the requested allocation"""
    code = "INSUFFICIENT_MATERIAL"


class RaceConflict(PoolError):
    """Referenced bytes already belong to a different session"""
    code = "RACE_CONFLICT"


class StaleGeneration(PoolError):
    """Selection refers to a purged pool generation"""
    code = "STALE_GENERATION"


class UnknownAllocation(PoolError):
    """Allocation is not (or no longer) Reserved in this pool"""
    code = "UNKNOWN_ALLOCATION"


# --------------------------------------------------------------------- KMS

class KmsError(QKeyMeshError):
    """Key management service errors"""
    pass


class MacInvalid(KmsError):
    """Selection packet or frame failed authentication"""
    code = "MAC_INVALID"


class PolicyDenied(KmsError):
    """Security policy forbids the request"""
    code = "POLICY_DENIED"


class TokenExpired(KmsError):
    code = "TOKEN_EXPIRED"


class TokenUnknown(KmsError):
    code = "TOKEN_UNKNOWN"


class RemoteUnconfirmed(KmsError):
    """Token redeemed before the remote KMS confirmed resolution"""
    code = "REMOTE_UNCONFIRMED"


class EmptySeed(KmsError):
    code = "EMPTY_SEED"


class LengthMismatch(QKeyMeshError):
    """Byte strings to combine differ in length"""
    code = "LENGTH_MISMATCH"


class MalformedHint(KmsError):
    code = "MALFORMED_HINT"


class DigestMismatch(KmsError):
    """Mirrored pools diverged"""
    code = "DIGEST_MISMATCH"


class SequenceGap(KmsError):
    """Peer event stream skipped a sequence number"""
    code = "SEQUENCE_GAP"

    def __init__(self, expected: int, received: int):
        super().__init__(f"expected event {expected}, received {received}")
        self.expected = expected
        self.received = received


# ----------------------------------------------------------- control plane

class ControlPlaneError(QKeyMeshError):
    """QNL control plane errors"""
    pass


class Unreachable(ControlPlaneError):
    code = "UNREACHABLE"


class EmptyDemand(ControlPlaneError):
    code = "EMPTY_DEMAND"


class UnreachableCommodity(ControlPlaneError):
    code = "UNREACHABLE_COMMODITY"


class OverReserved(ControlPlaneError):
    """Priority reservation exceeds link capacity"""
    code = "OVER_RESERVED"


class NoActiveCommodities(ControlPlaneError):
    code = "NO_ACTIVE_COMMODITIES"


# -------------------------------------------------------------- data plane

class DataPlaneError(QKeyMeshError):
    """QNL data plane errors"""
    pass


class InsufficientPairwiseKey(DataPlaneError):
    code = "INSUFFICIENT_PAIRWISE_KEY"


class WrongNode(DataPlaneError):
    code = "WRONG_NODE"


class StreamUnderflow(DataPlaneError):
    code = "STREAM_UNDERFLOW"


class MissingPart(DataPlaneError):
    code = "MISSING_PART"


# -------------------------------------------------------- link layer / sim

class LinkDown(QKeyMeshError):
    code = "LINK_DOWN"


class SimulationError(QKeyMeshError):
    """Simulator and scenario errors"""
    pass


class UnknownChannel(SimulationError):
    code = "UNKNOWN_CHANNEL"


class ScenarioInvalid(SimulationError):
    """Scenario failed schema or reference validation"""
    code = "SCENARIO_INVALID"

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors) if self.errors else "invalid scenario")


class InvariantViolation(SimulationError):
    """A run-time invariant assertion failed"""
    code = "INVARIANT_VIOLATION"


ERRORS_BY_CODE = {
    cls.code: cls
    for cls in (
        PoolFull, InsufficientMaterial, RaceConflict, StaleGeneration, UnknownAllocation,
        MacInvalid, PolicyDenied, TokenExpired, TokenUnknown, RemoteUnconfirmed, EmptySeed,
        LengthMismatch, MalformedHint, DigestMismatch, Unreachable, EmptyDemand,
        UnreachableCommodity, OverReserved, NoActiveCommodities, InsufficientPairwiseKey,
        WrongNode, StreamUnderflow, MissingPart, LinkDown, UnknownChannel,
    )
}
