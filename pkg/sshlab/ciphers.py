"""The six authenticated BPP constructions and their per-packet state evolution."""
from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.poly1305 import Poly1305

from .codec import BinaryPacket, pack_mpint, pack_uint32
from .errors import AuthFailure, PacketLengthError

MAX_PACKET_LENGTH = 35000
AES_BLOCK = 16
PLAINTEXT_BLOCK = 8
HMAC_LENGTH = 32
TAG_LENGTH = 16

CIPHER_CHACHA = "chacha20-poly1305@openssh.com"
CIPHER_GCM = "aes128-gcm@openssh.com"
CIPHER_CTR = "aes128-ctr"
CIPHER_CBC = "aes128-cbc"
MAC_EAM = "hmac-sha2-256"
MAC_ETM = "hmac-sha2-256-etm@openssh.com"
ETM_SUFFIX = "-etm@openssh.com"

_U64 = struct.Struct(">Q")
_U32 = struct.Struct(">I")


class Direction(str, Enum):
    client_to_server = "c2s"
    server_to_client = "s2c"

    @property
    def arrow(self) -> str:
        return "C->S" if self is Direction.client_to_server else "S->C"

    @property
    def reverse(self) -> "Direction":
        if self is Direction.client_to_server:
            return Direction.server_to_client
        return Direction.client_to_server


class Exposure(str, Enum):
    not_vulnerable = "not_vulnerable"
    vulnerable_exploitable = "vulnerable_exploitable"
    vulnerable_not_exploitable = "vulnerable_not_exploitable"
    vulnerable_probabilistic = "vulnerable_probabilistic"


class ModeId(str, Enum):
    cbc_eam = "CBC-EaM"
    cbc_etm = "CBC-EtM"
    ctr_eam = "CTR-EaM"
    ctr_etm = "CTR-EtM"
    gcm = "GCM"
    chacha20_poly1305 = "ChaCha20-Poly1305"

    @classmethod
    def parse(cls, text: str) -> "ModeId":
        wanted = text.strip().lower().replace("_", "-")
        aliases = {"chacha": cls.chacha20_poly1305, "chacha20": cls.chacha20_poly1305}
        if wanted in aliases:
            return aliases[wanted]
        for mode in cls:
            if wanted in (mode.value.lower(), mode.name.replace("_", "-")):
                return mode
        raise ValueError(f"unknown mode {text!r}; expected one of {', '.join(m.value for m in cls)}")

    @classmethod
    def from_algorithms(cls, cipher: str, mac: Optional[str]) -> "ModeId":
        if cipher == CIPHER_CHACHA:
            return cls.chacha20_poly1305
        if cipher == CIPHER_GCM:
            return cls.gcm
        if mac is None:
            raise ValueError(f"cipher {cipher} needs a MAC")
        etm = mac.endswith(ETM_SUFFIX)
        if cipher == CIPHER_CTR:
            return cls.ctr_etm if etm else cls.ctr_eam
        if cipher == CIPHER_CBC:
            return cls.cbc_etm if etm else cls.cbc_eam
        raise ValueError(f"unsupported cipher {cipher}")

    @property
    def cipher_name(self) -> str:
        return {
            ModeId.chacha20_poly1305: CIPHER_CHACHA,
            ModeId.gcm: CIPHER_GCM,
            ModeId.ctr_eam: CIPHER_CTR,
            ModeId.ctr_etm: CIPHER_CTR,
            ModeId.cbc_eam: CIPHER_CBC,
            ModeId.cbc_etm: CIPHER_CBC,
        }[self]

    @property
    def mac_name(self) -> Optional[str]:
        if self.is_aead:
            return None
        return MAC_ETM if self.encrypt_then_mac else MAC_EAM

    @property
    def is_aead(self) -> bool:
        return self in (ModeId.gcm, ModeId.chacha20_poly1305)

    @property
    def encrypt_then_mac(self) -> bool:
        return self in (ModeId.cbc_etm, ModeId.ctr_etm)

    @property
    def is_cbc(self) -> bool:
        return self in (ModeId.cbc_eam, ModeId.cbc_etm)

    @property
    def aligns_length_field(self) -> bool:
        """True where 4 + packet_length is aligned; elsewhere packet_length alone."""
        return self in (ModeId.cbc_eam, ModeId.ctr_eam)

    @property
    def length_visible(self) -> bool:
        """Whether an observer can read the packet length from the wire."""
        return self in (ModeId.cbc_etm, ModeId.ctr_etm, ModeId.gcm)

    @property
    def block_size(self) -> int:
        return PLAINTEXT_BLOCK if self is ModeId.chacha20_poly1305 else AES_BLOCK

    @property
    def mac_length(self) -> int:
        return TAG_LENGTH if self.is_aead else HMAC_LENGTH

    @property
    def head_size(self) -> int:
        return AES_BLOCK if self.aligns_length_field else 4

    @property
    def taxonomy(self) -> Exposure:
        return {
            ModeId.chacha20_poly1305: Exposure.vulnerable_exploitable,
            ModeId.cbc_etm: Exposure.vulnerable_probabilistic,
            ModeId.ctr_etm: Exposure.vulnerable_not_exploitable,
            ModeId.cbc_eam: Exposure.not_vulnerable,
            ModeId.ctr_eam: Exposure.not_vulnerable,
            ModeId.gcm: Exposure.not_vulnerable,
        }[self]


@dataclass
class DirectionalCipherState:
    """Single-owner state of one direction of one peer. ``mode`` is None before keys exist."""

    mode: Optional[ModeId] = None
    enc_key: bytes = b""
    length_key: bytes = b""
    mac_key: bytes = b""
    iv_kdf: bytes = b""
    chain_iv: bytes = b""
    ctr: int = 0
    invocation_ctr: int = 0
    active: bool = False

    @property
    def block_size(self) -> int:
        return self.mode.block_size if self.active and self.mode else PLAINTEXT_BLOCK

    @property
    def aligns_length_field(self) -> bool:
        return self.mode.aligns_length_field if self.active and self.mode else True

    @property
    def head_size(self) -> int:
        return self.mode.head_size if self.active and self.mode else 4

    @property
    def mac_length(self) -> int:
        return self.mode.mac_length if self.active and self.mode else 0

    def activate(self) -> None:
        if self.mode is None:
            raise ValueError("cannot activate a state without derived keys")
        self.active = True

    def copy(self) -> "DirectionalCipherState":
        return replace(self)


_LETTERS = {
    Direction.client_to_server: (b"A", b"C", b"E"),
    Direction.server_to_client: (b"B", b"D", b"F"),
}


def kdf(K: int, H: bytes, letter: bytes, session_id: bytes, size: int, hash_alg: str = "sha256") -> bytes:
    """RFC 4253 key derivation, extended by re-hashing until ``size`` bytes exist."""
    secret = pack_mpint(K)
    out = hashlib.new(hash_alg, secret + H + letter + session_id).digest()
    while len(out) < size:
        out += hashlib.new(hash_alg, secret + H + out).digest()
    return out[:size]


def derive_directional_keys(
    K: int,
    H: bytes,
    session_id: bytes,
    mode: ModeId,
    direction: Direction,
) -> DirectionalCipherState:
    if not H or not session_id:
        raise ValueError("exchange hash and session id must be non-empty")
    iv_letter, key_letter, mac_letter = _LETTERS[direction]
    if mode is ModeId.chacha20_poly1305:
        key = kdf(K, H, key_letter, session_id, 64)
        return DirectionalCipherState(mode=mode, enc_key=key[:32], length_key=key[32:])
    enc_key = kdf(K, H, key_letter, session_id, 16)
    if mode is ModeId.gcm:
        iv = kdf(K, H, iv_letter, session_id, 12)
        return DirectionalCipherState(
            mode=mode, enc_key=enc_key, iv_kdf=iv, invocation_ctr=int.from_bytes(iv[4:], "big")
        )
    iv = kdf(K, H, iv_letter, session_id, AES_BLOCK)
    return DirectionalCipherState(
        mode=mode,
        enc_key=enc_key,
        mac_key=kdf(K, H, mac_letter, session_id, HMAC_LENGTH),
        iv_kdf=iv,
        chain_iv=iv if mode.is_cbc else b"",
        ctr=0 if mode.is_cbc else int.from_bytes(iv, "big"),
    )


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _chacha20(key: bytes, nonce: bytes, counter: int, data: bytes) -> bytes:
    # 64-bit little-endian block counter followed by the 64-bit nonce
    iv = struct.pack("<Q", counter) + nonce
    return Cipher(algorithms.ChaCha20(key, iv), mode=None).encryptor().update(data)


def _cbc(key: bytes, iv: bytes, data: bytes, encrypt: bool) -> bytes:
    cipher = Cipher(algorithms.AES(key), modes.CBC(iv))
    ctx = cipher.encryptor() if encrypt else cipher.decryptor()
    return ctx.update(data) + ctx.finalize()


def _ctr(key: bytes, counter: int, data: bytes) -> bytes:
    ctx = Cipher(algorithms.AES(key), modes.CTR(counter.to_bytes(16, "big"))).encryptor()
    return ctx.update(data) + ctx.finalize()


def _blocks(length: int) -> int:
    return -(-length // AES_BLOCK)


def _hmac(key: bytes, data: bytes) -> bytes:
    return hmac.new(key, data, hashlib.sha256).digest()


def _gcm_nonce(state: DirectionalCipherState) -> bytes:
    return state.iv_kdf[:4] + _U64.pack(state.invocation_ctr)


def _encrypt_blocks(state: DirectionalCipherState, data: bytes) -> bytes:
    if state.mode is not None and state.mode.is_cbc:
        out = _cbc(state.enc_key, state.chain_iv, data, encrypt=True)
        state.chain_iv = out[-AES_BLOCK:]
        return out
    out = _ctr(state.enc_key, state.ctr, data)
    state.ctr = (state.ctr + _blocks(len(data))) % (1 << 128)
    return out


def _decrypt_blocks(state: DirectionalCipherState, data: bytes) -> bytes:
    """Decrypt without advancing the state; callers commit with :func:`_advance_blocks`."""
    if state.mode is not None and state.mode.is_cbc:
        if len(data) % AES_BLOCK:
            raise PacketLengthError(f"ciphertext of {len(data)} bytes is not block aligned", len(data))
        return _cbc(state.enc_key, state.chain_iv, data, encrypt=False)
    return _ctr(state.enc_key, state.ctr, data)


def _advance_blocks(state: DirectionalCipherState, ciphertext: bytes) -> None:
    if state.mode is not None and state.mode.is_cbc:
        state.chain_iv = ciphertext[-AES_BLOCK:]
    else:
        state.ctr = (state.ctr + _blocks(len(ciphertext))) % (1 << 128)


# ---------------------------------------------------------------------------
# seal / open
# ---------------------------------------------------------------------------

def seal(state: DirectionalCipherState, seqno: int, packet: BinaryPacket) -> bytes:
    plain = packet.to_bytes()
    if not state.active:
        return plain
    mode = state.mode
    length, body = plain[:4], plain[4:]
    seq = pack_uint32(seqno)

    if mode is ModeId.chacha20_poly1305:
        nonce = _U64.pack(seqno)
        enc_length = _chacha20(state.length_key, nonce, 0, length)
        poly_key = _chacha20(state.enc_key, nonce, 0, bytes(32))
        ciphertext = _chacha20(state.enc_key, nonce, 1, body)
        return enc_length + ciphertext + Poly1305.generate_tag(poly_key, enc_length + ciphertext)

    if mode is ModeId.gcm:
        sealed = AESGCM(state.enc_key).encrypt(_gcm_nonce(state), body, length)
        state.invocation_ctr = (state.invocation_ctr + 1) % (1 << 64)
        return length + sealed

    if mode.encrypt_then_mac:
        ciphertext = _encrypt_blocks(state, body)
        return length + ciphertext + _hmac(state.mac_key, seq + length + ciphertext)

    mac = _hmac(state.mac_key, seq + plain)
    return _encrypt_blocks(state, plain) + mac


def frame_length(state: DirectionalCipherState, seqno: int, head: bytes) -> int:
    """Total wire size of the packet starting with ``head`` (at least ``state.head_size`` bytes).

    Never mutates ``state``. Raises PacketLengthError for implausible lengths.
    """
    if len(head) < state.head_size:
        raise PacketLengthError(f"need {state.head_size} bytes to read the length, got {len(head)}")
    mode = state.mode if state.active else None
    if mode is None or mode.length_visible:
        length = _U32.unpack(head[:4])[0]
    elif mode is ModeId.chacha20_poly1305:
        length = _U32.unpack(_chacha20(state.length_key, _U64.pack(seqno), 0, head[:4]))[0]
    else:
        length = _U32.unpack(_decrypt_blocks(state, head[:AES_BLOCK])[:4])[0]

    if length > MAX_PACKET_LENGTH:
        raise PacketLengthError(f"declared packet length {length} exceeds {MAX_PACKET_LENGTH}", length)
    if length < 5:
        raise PacketLengthError(f"declared packet length {length} is too short", length)
    aligned = length + 4 if state.aligns_length_field else length
    if aligned % state.block_size:
        raise PacketLengthError(
            f"packet length {length} not aligned to block size {state.block_size}", length
        )
    return 4 + length + state.mac_length


def open(state: DirectionalCipherState, seqno: int, wire: bytes) -> BinaryPacket:  # noqa: A001
    """Verify and decrypt one wire packet. Raises AuthFailure or PacketLengthError."""
    if not state.active:
        if len(wire) < 4:
            raise PacketLengthError(f"wire packet of {len(wire)} bytes has no length field")
        declared = _U32.unpack(wire[:4])[0]
        if declared != len(wire) - 4:
            raise PacketLengthError(f"declared length {declared} but {len(wire) - 4} bytes follow", declared)
        return BinaryPacket.from_body(wire[4:])

    mode = state.mode
    seq = pack_uint32(seqno)
    tag_length = mode.mac_length
    if len(wire) < 4 + tag_length + 1:
        raise PacketLengthError(f"wire packet of {len(wire)} bytes is too short")
    sealed, tag = wire[:-tag_length], wire[-tag_length:]

    if mode is ModeId.chacha20_poly1305:
        nonce = _U64.pack(seqno)
        enc_length, ciphertext = sealed[:4], sealed[4:]
        poly_key = _chacha20(state.enc_key, nonce, 0, bytes(32))
        try:
            Poly1305.verify_tag(poly_key, enc_length + ciphertext, tag)
        except InvalidSignature as e:
            raise AuthFailure(f"Poly1305 tag mismatch at seqno {seqno}") from e
        declared = _U32.unpack(_chacha20(state.length_key, nonce, 0, enc_length))[0]
        if declared != len(ciphertext):
            raise PacketLengthError(f"declared length {declared} but {len(ciphertext)} bytes follow", declared)
        return BinaryPacket.from_body(_chacha20(state.enc_key, nonce, 1, ciphertext))

    if mode is ModeId.gcm:
        length, ciphertext = sealed[:4], sealed[4:]
        declared = _U32.unpack(length)[0]
        if declared != len(ciphertext):
            raise PacketLengthError(f"declared length {declared} but {len(ciphertext)} bytes follow", declared)
        try:
            body = AESGCM(state.enc_key).decrypt(_gcm_nonce(state), ciphertext + tag, length)
        except InvalidTag as e:
            raise AuthFailure(f"GCM tag mismatch at invocation {state.invocation_ctr}") from e
        state.invocation_ctr = (state.invocation_ctr + 1) % (1 << 64)
        return BinaryPacket.from_body(body)

    if mode.encrypt_then_mac:
        length, ciphertext = sealed[:4], sealed[4:]
        declared = _U32.unpack(length)[0]
        if declared != len(ciphertext):
            raise PacketLengthError(f"declared length {declared} but {len(ciphertext)} bytes follow", declared)
        if not hmac.compare_digest(_hmac(state.mac_key, seq + length + ciphertext), tag):
            raise AuthFailure(f"MAC mismatch at seqno {seqno}")
        body = _decrypt_blocks(state, ciphertext)
        _advance_blocks(state, ciphertext)
        return BinaryPacket.from_body(body)

    plain = _decrypt_blocks(state, sealed)
    if not hmac.compare_digest(_hmac(state.mac_key, seq + plain), tag):
        raise AuthFailure(f"MAC mismatch at seqno {seqno}")
    declared = _U32.unpack(plain[:4])[0]
    if declared != len(plain) - 4:
        raise PacketLengthError(f"declared length {declared} but {len(plain) - 4} bytes follow", declared)
    _advance_blocks(state, sealed)
    return BinaryPacket.from_body(plain[4:])
