"""
Key selection sealing and key derivation helpers.

Selection packets are encrypt-then-MAC: AES-256-CTR under an encryption subkey,
then HMAC-SHA256 over nonce || ciphertext under a MAC subkey. Both subkeys are
derived from the inter-site key with HKDF.
"""

import re
import struct
from dataclasses import dataclass

import numpy as np
from cryptography.hazmat.primitives import constant_time, hashes, hmac
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .. import config
from ..errors import EmptySeed, LengthMismatch, MacInvalid, MalformedHint

NONCE_BYTES = 16
SESSION_ID_BYTES = 16
SELECTION_LAYOUT = struct.Struct(f">HIQI{SESSION_ID_BYTES}sd")

# pool_id, generation, offset, length, session_id
HINT_WIDTHS = (4, 6, 10, 8, 39)
HINT_LENGTH = sum(HINT_WIDTHS)
_HINT_PATTERN = re.compile(rf"[0-9]{{{HINT_LENGTH}}}")


@dataclass(frozen=True)
class KeySelectionInfo:
    """Reference to pool bytes; never carries key material"""
    pool_id: int
    generation: int
    offset_bytes: int
    length_bytes: int
    session_id: int
    issue_timestamp: float = 0.0

    @property
    def derived(self) -> bool:
        """Zero length marks a key not taken from the pool"""
        return self.length_bytes == 0

    def pack(self) -> bytes:
        return SELECTION_LAYOUT.pack(
            self.pool_id, self.generation, self.offset_bytes, self.length_bytes,
            self.session_id.to_bytes(SESSION_ID_BYTES, "big"), self.issue_timestamp,
        )

    @classmethod
    def unpack(cls, data: bytes) -> "KeySelectionInfo":
        pool_id, generation, offset, length, session, issued = SELECTION_LAYOUT.unpack(data)
        return cls(pool_id, generation, offset, length, int.from_bytes(session, "big"), issued)


@dataclass(frozen=True)
class SealedSelectionPacket:
    nonce: bytes
    ciphertext: bytes
    mac: bytes

    def flip_bit(self, index: int) -> "SealedSelectionPacket":
        """Copy with one bit of ciphertext || mac inverted"""
        body = bytearray(self.ciphertext + self.mac)
        body[index // 8] ^= 1 << (index % 8)
        cut = len(self.ciphertext)
        return SealedSelectionPacket(self.nonce, bytes(body[:cut]), bytes(body[cut:]))


def _subkeys(key: bytes, context: bytes):
    material = HKDF(algorithm=hashes.SHA256(), length=64, salt=None, info=context).derive(key)
    return material[:32], material[32:]


def _ctr(key: bytes, nonce: bytes, data: bytes) -> bytes:
    encryptor = Cipher(algorithms.AES(key), modes.CTR(nonce)).encryptor()
    return encryptor.update(data) + encryptor.finalize()


def _tag(mac_key: bytes, nonce: bytes, ciphertext: bytes) -> bytes:
    h = hmac.HMAC(mac_key, hashes.SHA256())
    h.update(nonce + ciphertext)
    return h.finalize()[: max(16, config.MAC_TAG_BYTES)]


def seal_bytes(key: bytes, plaintext: bytes, nonce: bytes, context: bytes = b"qkeymesh frame"):
    """Encrypt-then-MAC arbitrary bytes; returns (ciphertext, tag)"""
    if len(nonce) != NONCE_BYTES:
        raise ValueError(f"nonce must be {NONCE_BYTES} bytes")
    enc_key, mac_key = _subkeys(key, context)
    ciphertext = _ctr(enc_key, nonce, plaintext)
    return ciphertext, _tag(mac_key, nonce, ciphertext)


def open_bytes(key: bytes, nonce: bytes, ciphertext: bytes, tag: bytes,
               context: bytes = b"qkeymesh frame") -> bytes:
    """
    Verify then decrypt.

    Raises:
        MacInvalid: tag does not verify under `key`
    """
    enc_key, mac_key = _subkeys(key, context)
    if len(nonce) != NONCE_BYTES or not constant_time.bytes_eq(_tag(mac_key, nonce, ciphertext), tag):
        raise MacInvalid("authentication tag mismatch")
    return _ctr(enc_key, nonce, ciphertext)


def seal_selection(selection: KeySelectionInfo, intersite_key: bytes, nonce: bytes) -> SealedSelectionPacket:
    ciphertext, mac = seal_bytes(intersite_key, selection.pack(), nonce, b"qkeymesh selection")
    return SealedSelectionPacket(nonce, ciphertext, mac)


def open_selection(packet: SealedSelectionPacket, intersite_key: bytes) -> KeySelectionInfo:
    plaintext = open_bytes(intersite_key, packet.nonce, packet.ciphertext, packet.mac, b"qkeymesh selection")
    if len(plaintext) != SELECTION_LAYOUT.size:
        raise MacInvalid("selection has the wrong size")
    return KeySelectionInfo.unpack(plaintext)


def derive_static_key(master: bytes, label: str) -> bytes:
    """Pre-shared key for a site pair or neighbour pair"""
    return HKDF(algorithm=hashes.SHA256(), length=32, salt=None, info=label.encode()).derive(master)


def derive_expanded_key(seed_bytes: bytes, out_length: int) -> bytes:
    """
    Deterministic key expansion: AES-256-CTR keystream keyed by SHA-256(seed).

    Raises:
        EmptySeed: seed has no bytes
    """
    if not seed_bytes:
        raise EmptySeed("key expansion needs a non-empty seed")
    if out_length < 0:
        raise ValueError("out_length must not be negative")
    digest = hashes.Hash(hashes.SHA256())
    digest.update(seed_bytes)
    return _ctr(digest.finalize(), bytes(NONCE_BYTES), bytes(out_length))


def xor_bytes(*parts: bytes) -> bytes:
    """Bytewise XOR of equal-length byte strings"""
    if not parts:
        raise ValueError("nothing to combine")
    if len({len(p) for p in parts}) != 1:
        raise LengthMismatch(f"part lengths differ: {[len(p) for p in parts]}")
    acc = np.frombuffer(parts[0], dtype=np.uint8).copy()
    for part in parts[1:]:
        np.bitwise_xor(acc, np.frombuffer(part, dtype=np.uint8), out=acc)
    return acc.tobytes()


def combine_hybrid(k_qkd: bytes, k_pq: bytes) -> bytes:
    """XOR a QKD key with an independently established key"""
    return xor_bytes(k_qkd, k_pq)


def encode_psk_hint(selection: KeySelectionInfo) -> str:
    """Fixed-width decimal PSK identity hint; the timestamp is not carried"""
    fields = (
        selection.pool_id, selection.generation, selection.offset_bytes,
        selection.length_bytes, selection.session_id,
    )
    out = []
    for value, width in zip(fields, HINT_WIDTHS):
        if value < 0 or value >= 10 ** width:
            raise MalformedHint(f"value {value} does not fit {width} digits")
        out.append(str(value).zfill(width))
    return "".join(out)


def decode_psk_hint(hint: str) -> KeySelectionInfo:
    if not isinstance(hint, str) or not _HINT_PATTERN.fullmatch(hint):
        raise MalformedHint(f"hint must be {HINT_LENGTH} decimal digits")
    values, pos = [], 0
    for width in HINT_WIDTHS:
        values.append(int(hint[pos: pos + width]))
        pos += width
    return KeySelectionInfo(*values)
