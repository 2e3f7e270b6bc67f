"""
Wire messages for QKeyMesh

Every inter-site message is a typed model with a `type` tag. A frame is a
4-byte big-endian length prefix followed by the canonical JSON of the model
(sorted keys, no whitespace). Byte fields travel as hex strings.
"""

import json
import struct
from typing import Annotated, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, ValidationError

from .errors import QKeyMeshError

FRAME_HEADER = struct.Struct(">I")


class FrameError(QKeyMeshError):
    """Frame could not be decoded"""
    code = "MALFORMED_FRAME"


class WireMessage(BaseModel):
    """Base for all wire messages"""
    model_config = ConfigDict(extra="forbid", frozen=True)


# ------------------------------------------------------------------ KMS

class KeyNegotiation(WireMessage):
    """Sealed key selection sent to the remote KMS"""
    type: Literal["KEY_NEG"] = "KEY_NEG"
    src_site: str
    dst_site: str
    src_host: str
    dst_host: str
    mode: Literal["direct", "token", "kms-to-kms"]
    via: Literal["host", "kms"]
    security_class: int
    session_id: int  # clear copy of the sealed id; must match it
    lifetime_s: float
    key_length_bytes: int
    nonce: str
    ciphertext: str
    mac: str
    token_id: Optional[str] = None
    host_key_ref: Optional[int] = None
    wrapped_key: Optional[str] = None
    fallback: Optional[str] = None


class KeyConfirm(WireMessage):
    """Remote KMS resolved and consumed the selection"""
    type: Literal["KEY_CONFIRM"] = "KEY_CONFIRM"
    src_site: str
    dst_site: str
    session_id: int
    pool_id: int
    generation: int


class TokenConfirm(WireMessage):
    """Remote KMS resolved the bytes behind a token"""
    type: Literal["TOKEN_CONFIRM"] = "TOKEN_CONFIRM"
    src_site: str
    dst_site: str
    session_id: int
    token_id: str


class PoolEvent(WireMessage):
    """Sequence-numbered pool mutation mirrored to the peer KMS"""
    type: Literal["POOL_EVENT"] = "POOL_EVENT"
    src_site: str
    dst_site: str
    pool_id: int
    generation: int
    seq: int
    op: Literal["inject", "resolve", "confirm", "abort", "purge_all", "advance_ws", "grow", "refresh"]
    chunk_id: Optional[str] = None
    offset_bytes: int = 0
    length_bytes: int = 0
    session_id: Optional[int] = None
    victims: List[Tuple[int, int]] = Field(default_factory=list)  # (offset, length) overwritten by an inject


class DigestMessage(WireMessage):
    """Pool digest checkpoint with the sender's event counters"""
    type: Literal["DIGEST"] = "DIGEST"
    src_site: str
    dst_site: str
    pool_id: int
    generation: int
    seq_out: int
    seq_in: int
    quiescent: bool
    digest: str


class ErrorMessage(WireMessage):
    """Protocol error answer"""
    type: Literal["ERROR"] = "ERROR"
    src_site: str
    dst_site: str
    code: str
    detail: str = ""
    session_id: Optional[int] = None
    pool_id: Optional[int] = None
    generation: Optional[int] = None
    resend_from: Optional[int] = None
    relay_id: Optional[str] = None


# -------------------------------------------------------- control plane

class KgmMessage(WireMessage):
    """Flooded key generation message"""
    type: Literal["KGM"] = "KGM"
    origin: str
    msg_seq: int
    src_site: str
    dst_site: str
    mode: Literal["continuous", "one_time", "stop"]
    rate_bits_per_s: float = 0.0
    amount_bits: int = 0
    priority: float = 1.0
    tactic: Literal["direct", "single", "multi"] = "single"
    max_hops: Optional[int] = None
    path_count: int = 1


class LsaMessage(WireMessage):
    """Link-state advertisement"""
    type: Literal["LSA"] = "LSA"
    origin_node: str
    seq_no: int
    neighbors: List[Tuple[str, float]]


class HelloMessage(WireMessage):
    type: Literal["HELLO"] = "HELLO"
    node_id: str
    seq: int


class SealedFrame(WireMessage):
    """Control frame sealed under the static neighbour key"""
    type: Literal["SEALED"] = "SEALED"
    src: str
    dst: str
    nonce: str
    ciphertext: str
    mac: str


# ----------------------------------------------------------- data plane

class RelayRequest(WireMessage):
    """Source endpoint asks the first hop to originate a relay part"""
    type: Literal["RELAY_REQUEST"] = "RELAY_REQUEST"
    relay_id: str
    path_set_id: str
    part_index: int
    part_count: int
    src: str
    dst: str
    path: List[str]
    length_bytes: int


class KeySelected(WireMessage):
    """First hop tells the source which shared stream bytes form the key"""
    type: Literal["KEY_SELECTED"] = "KEY_SELECTED"
    relay_id: str
    path_set_id: str
    part_index: int
    stream_offset: int
    length_bytes: int


class RelayFrame(WireMessage):
    """One-time-pad encrypted relay envelope"""
    type: Literal["RELAY"] = "RELAY"
    relay_id: str
    path_set_id: str
    part_index: int
    part_count: int
    src: str
    dst: str
    path: List[str]
    hop_index: int
    stream_offset: int
    length_bytes: int
    ciphertext: str


class RelayAck(WireMessage):
    """Destination holds a complete path set"""
    type: Literal["RELAY_ACK"] = "RELAY_ACK"
    path_set_id: str
    src: str
    dst: str
    length_bytes: int


class RelayCommit(WireMessage):
    """Source tells the destination to pass a staged path set up, or to drop it"""
    type: Literal["RELAY_COMMIT"] = "RELAY_COMMIT"
    path_set_id: str
    src: str
    dst: str
    commit: bool


class DirectKey(WireMessage):
    """Direct-link commodity: stream bytes promoted to the pool"""
    type: Literal["DIRECT_KEY"] = "DIRECT_KEY"
    chunk_id: str
    src: str
    dst: str
    stream_offset: int
    length_bytes: int


class LeaseRequest(WireMessage):
    type: Literal["LEASE_REQUEST"] = "LEASE_REQUEST"
    requester: str
    owner: str
    length_bytes: int


class LeaseGrant(WireMessage):
    type: Literal["LEASE_GRANT"] = "LEASE_GRANT"
    owner: str
    requester: str
    offset: int
    length_bytes: int


Message = Annotated[
    Union[
        KeyNegotiation, KeyConfirm, TokenConfirm, PoolEvent, DigestMessage, ErrorMessage,
        KgmMessage, LsaMessage, HelloMessage, SealedFrame,
        RelayRequest, KeySelected, RelayFrame, RelayAck, RelayCommit, DirectKey, LeaseRequest, LeaseGrant,
    ],
    Field(discriminator="type"),
]

MESSAGE_ADAPTER = TypeAdapter(Message)

MESSAGE_TYPES = {
    cls.model_fields["type"].default: cls
    for cls in (
        KeyNegotiation, KeyConfirm, TokenConfirm, PoolEvent, DigestMessage, ErrorMessage,
        KgmMessage, LsaMessage, HelloMessage, SealedFrame,
        RelayRequest, KeySelected, RelayFrame, RelayAck, RelayCommit, DirectKey, LeaseRequest, LeaseGrant,
    )
}


def canonical_json(message: WireMessage) -> bytes:
    """Canonical serialization: sorted keys, compact separators"""
    return json.dumps(message.model_dump(mode="json"), sort_keys=True, separators=(",", ":")).encode()


def encode_frame(message: WireMessage) -> bytes:
    body = canonical_json(message)
    return FRAME_HEADER.pack(len(body)) + body


def decode_frame(frame: bytes) -> WireMessage:
    """
    Decode one length-prefixed frame.

    Raises:
        FrameError: short frame, length mismatch, bad JSON or unknown type
    """
    if len(frame) < FRAME_HEADER.size:
        raise FrameError("frame shorter than its header")
    (length,) = FRAME_HEADER.unpack_from(frame)
    body = frame[FRAME_HEADER.size:]
    if len(body) != length:
        raise FrameError(f"frame declares {length} bytes, carries {len(body)}")
    try:
        return MESSAGE_ADAPTER.validate_python(json.loads(body))
    except (ValueError, ValidationError) as e:
        raise FrameError(f"undecodable frame: {e}") from e
