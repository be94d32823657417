"""Key exchange: algorithm negotiation, group14 Diffie-Hellman, exchange hash, host key and
the transcript MAC countermeasure."""
from __future__ import annotations

import hashlib
import hmac
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .ciphers import Direction, ModeId, kdf
from .codec import KexInit, WireReader, pack_mpint, pack_string
from .errors import CodecError, HandshakeError, NegotiationError
from .models import HOST_KEY_ED25519, IndicatorNames, PeerConfig, Role

logger = logging.getLogger(__name__)

EphemeralSource = Callable[[int], bytes]

# Oakley group 14 (RFC 3526), 2048 bits
_GROUP14_P = int(
    "ffffffffffffffffc90fdaa22168c234c4c6628b80dc1cd129024e088a67cc74020bbea63b139b22514a0879"
    "8e3404ddef9519b3cd3a431b302b0a6df25f14374fe1356d6d51c245e485b576625e7ec6f44c42e9a637ed6b"
    "0bff5cb6f406b7edee386bfb5a899fa5ae9f24117c4b1fe649286651ece45b3dc2007cb8a163bf0598da4836"
    "1c55d39a69163fa8fd24cf5f83655d23dca3ad961c62f356208552bb9ed529077096966d670c354e4abc9804"
    "f1746c08ca18217c32905e462e36ce3be39e772c180e86039b2783a2ec07a28fb5c55df06f4c52c9de2bcbf6"
    "955817183995497cea956ae515d2261898fa051015728e5a8aacaa68ffffffffffffffff",
    16,
)


@dataclass(frozen=True)
class DhGroup:
    name: str
    p: int
    g: int

    @property
    def bits(self) -> int:
        return self.p.bit_length()


GROUP14 = DhGroup("group14", _GROUP14_P, 2)

_AEAD_CIPHERS = frozenset(mode.cipher_name for mode in ModeId if mode.is_aead)


# ---------------------------------------------------------------------------
# negotiation
# ---------------------------------------------------------------------------

def build_kexinit(config: PeerConfig, cookie: bytes) -> KexInit:
    """KexInit for ``config``: its algorithm lists plus the indicator names it signals."""
    names = config.indicator_names
    indicators: List[str] = []
    if config.role is Role.client:
        if config.signal_ext_info:
            indicators.append(names.ext_info_client)
        if config.countermeasures.seq_reset:
            indicators.append(names.seq_reset_client)
        if config.countermeasures.transcript_mac:
            indicators.append(names.transcript_mac_client)
    else:
        if config.signal_ext_info:
            indicators.append(names.ext_info_server)
        if config.countermeasures.seq_reset:
            indicators.append(names.seq_reset_server)
        if config.countermeasures.transcript_mac:
            indicators.append(names.transcript_mac_server)
    return KexInit(
        cookie=cookie,
        kex_algorithms=tuple(config.kex_algorithms) + tuple(indicators),
        server_host_key_algorithms=tuple(config.host_key_algorithms),
        encryption_client_to_server=tuple(config.ciphers),
        encryption_server_to_client=tuple(config.ciphers),
        mac_client_to_server=tuple(config.macs),
        mac_server_to_client=tuple(config.macs),
    )


@dataclass(frozen=True)
class NegotiationResult:
    kex_algorithm: str
    host_key_algorithm: str
    cipher_client_to_server: str
    cipher_server_to_client: str
    mac_client_to_server: Optional[str]
    mac_server_to_client: Optional[str]
    ext_info_to_client: bool = False
    ext_info_to_server: bool = False
    seq_reset_enabled: bool = False
    transcript_mac_enabled: bool = False

    def mode(self, direction: Direction) -> ModeId:
        if direction is Direction.client_to_server:
            return ModeId.from_algorithms(self.cipher_client_to_server, self.mac_client_to_server)
        return ModeId.from_algorithms(self.cipher_server_to_client, self.mac_server_to_client)


def _is_pseudo(name: str, names: IndicatorNames) -> bool:
    return name in names.all_names() or name.startswith("kex-strict-")


def _first_common(category: str, client: Sequence[str], server: Sequence[str]) -> str:
    for name in client:
        if name in server:
            return name
    raise NegotiationError(category, list(client), list(server))


def _pick_mac(category: str, cipher: str, client: Sequence[str], server: Sequence[str]) -> Optional[str]:
    if cipher in _AEAD_CIPHERS:
        return None
    return _first_common(category, client, server)


def negotiate(
    client_kexinit: KexInit,
    server_kexinit: KexInit,
    role: Role = Role.client,
    names: Optional[IndicatorNames] = None,
) -> NegotiationResult:
    """Pick the first client-preferred algorithm the server also offers, per category.

    Indicator names are stripped from the kex lists before selection and consumed into
    the feature flags. Both roles compute the same result.
    """
    names = names or IndicatorNames()
    client_kex = client_kexinit.kex_algorithms
    server_kex = server_kexinit.kex_algorithms

    kex = _first_common(
        "kex",
        [n for n in client_kex if not _is_pseudo(n, names)],
        [n for n in server_kex if not _is_pseudo(n, names)],
    )
    host_key = _first_common(
        "host key", client_kexinit.server_host_key_algorithms, server_kexinit.server_host_key_algorithms
    )
    cipher_cs = _first_common(
        "cipher (client to server)",
        client_kexinit.encryption_client_to_server,
        server_kexinit.encryption_client_to_server,
    )
    cipher_sc = _first_common(
        "cipher (server to client)",
        client_kexinit.encryption_server_to_client,
        server_kexinit.encryption_server_to_client,
    )
    mac_cs = _pick_mac(
        "mac (client to server)", cipher_cs, client_kexinit.mac_client_to_server, server_kexinit.mac_client_to_server
    )
    mac_sc = _pick_mac(
        "mac (server to client)", cipher_sc, client_kexinit.mac_server_to_client, server_kexinit.mac_server_to_client
    )
    _first_common(
        "compression (client to server)",
        client_kexinit.compression_client_to_server,
        server_kexinit.compression_client_to_server,
    )
    _first_common(
        "compression (server to client)",
        client_kexinit.compression_server_to_client,
        server_kexinit.compression_server_to_client,
    )

    result = NegotiationResult(
        kex_algorithm=kex,
        host_key_algorithm=host_key,
        cipher_client_to_server=cipher_cs,
        cipher_server_to_client=cipher_sc,
        mac_client_to_server=mac_cs,
        mac_server_to_client=mac_sc,
        ext_info_to_client=names.ext_info_client in client_kex,
        ext_info_to_server=names.ext_info_server in server_kex,
        seq_reset_enabled=names.seq_reset_client in client_kex and names.seq_reset_server in server_kex,
        transcript_mac_enabled=(
            names.transcript_mac_client in client_kex and names.transcript_mac_server in server_kex
        ),
    )
    logger.debug(
        "%s negotiated %s+%s / %s+%s", role.value, cipher_cs, mac_cs or "aead", cipher_sc, mac_sc or "aead"
    )
    return result


# ---------------------------------------------------------------------------
# Diffie-Hellman
# ---------------------------------------------------------------------------

class DhExchange:
    """One side of a finite-field DH exchange over ``group``."""

    def __init__(
        self,
        role: Role,
        group: DhGroup = GROUP14,
        ephemeral_source: EphemeralSource = os.urandom,
        exponent_bits: int = 256,
        private: Optional[int] = None,
    ) -> None:
        self.role = role
        self.group = group
        if private is None:
            raw = int.from_bytes(ephemeral_source((exponent_bits + 7) // 8), "big")
            private = (raw % (1 << exponent_bits)) | (1 << (exponent_bits - 1))
        if not 1 < private < group.p - 1:
            raise HandshakeError("private exponent out of range")
        self.private = private
        self.public = pow(group.g, private, group.p)

    def check_public(self, value: int) -> None:
        if not 1 < value < self.group.p - 1:
            raise HandshakeError(f"peer DH value out of range (bit length {value.bit_length()})")

    def complete(self, peer_public: int) -> Tuple[int, bytes]:
        """Shared secret K and the exchange data X = mpint(e) || mpint(f)."""
        self.check_public(peer_public)
        shared = pow(peer_public, self.private, self.group.p)
        if self.role is Role.client:
            e, f = self.public, peer_public
        else:
            e, f = peer_public, self.public
        return shared, pack_mpint(e) + pack_mpint(f)


def dh_kex(
    client_source: EphemeralSource = os.urandom,
    server_source: EphemeralSource = os.urandom,
    group: DhGroup = GROUP14,
    exponent_bits: int = 256,
) -> Tuple[int, bytes]:
    """Run both halves of an exchange in-process; returns the agreed (K, X)."""
    client = DhExchange(Role.client, group, client_source, exponent_bits)
    server = DhExchange(Role.server, group, server_source, exponent_bits)
    client_result = client.complete(server.public)
    server_result = server.complete(client.public)
    if client_result != server_result:
        raise HandshakeError("DH halves disagree")
    return client_result


# ---------------------------------------------------------------------------
# exchange hash and host key
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TranscriptInputs:
    """Exchange hash inputs: both banners (without CR LF), both KexInit payloads, the host
    key blob, the exchange data X and the shared secret K."""

    client_banner: bytes
    server_banner: bytes
    client_kexinit: bytes
    server_kexinit: bytes
    host_key: bytes
    exchange_data: bytes
    shared_secret: int


def exchange_hash(inputs: TranscriptInputs, hash_alg: str = "sha256") -> bytes:
    h = hashlib.new(hash_alg)
    for part in (
        inputs.client_banner,
        inputs.server_banner,
        inputs.client_kexinit,
        inputs.server_kexinit,
        inputs.host_key,
    ):
        h.update(pack_string(part))
    h.update(inputs.exchange_data)
    h.update(pack_mpint(inputs.shared_secret))
    return h.digest()


class HostKey:
    algorithm = HOST_KEY_ED25519

    def __init__(self, private_key: Ed25519PrivateKey) -> None:
        self._private = private_key

    @classmethod
    def from_seed(cls, seed: bytes) -> "HostKey":
        return cls(Ed25519PrivateKey.from_private_bytes(seed))

    @classmethod
    def generate(cls) -> "HostKey":
        return cls(Ed25519PrivateKey.generate())

    @property
    def public_blob(self) -> bytes:
        raw = self._private.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        return pack_string(self.algorithm.encode("ascii")) + pack_string(raw)

    def sign(self, data: bytes) -> bytes:
        return pack_string(self.algorithm.encode("ascii")) + pack_string(self._private.sign(data))


def verify_host_signature(public_blob: bytes, data: bytes, signature: bytes) -> bool:
    """Check an ssh-ed25519 signature blob over ``data``; False on any mismatch or bad encoding."""
    try:
        key_reader = WireReader(public_blob)
        if key_reader.read_string() != HOST_KEY_ED25519.encode("ascii"):
            return False
        raw_key = key_reader.read_string()
        key_reader.expect_end()
        sig_reader = WireReader(signature)
        if sig_reader.read_string() != HOST_KEY_ED25519.encode("ascii"):
            return False
        raw_sig = sig_reader.read_string()
        sig_reader.expect_end()
        Ed25519PublicKey.from_public_bytes(raw_key).verify(raw_sig, data)
    except (CodecError, InvalidSignature, ValueError):
        return False
    return True


# ---------------------------------------------------------------------------
# transcript MAC
# ---------------------------------------------------------------------------

TRANSCRIPT_KEY_LETTER = b"T"


@dataclass
class FullTranscript:
    """Every plaintext packet exchanged up to and including NewKeys, per direction."""

    client_banner: bytes = b""
    server_banner: bytes = b""
    entries: List[Tuple[Direction, bytes]] = field(default_factory=list)

    def record(self, direction: Direction, packet: bytes) -> None:
        self.entries.append((direction, packet))

    def view(self, direction: Direction) -> bytes:
        return b"".join(packet for d, packet in self.entries if d is direction)

    def serialize(self) -> bytes:
        # one string per direction, so relative timing between the directions does not matter
        return (
            pack_string(self.client_banner)
            + pack_string(self.server_banner)
            + pack_string(self.view(Direction.client_to_server))
            + pack_string(self.view(Direction.server_to_client))
        )

    def counts(self) -> Dict[str, int]:
        return {d.value: sum(1 for e, _ in self.entries if e is d) for d in Direction}


def transcript_mac(
    transcript: FullTranscript, K: int, H: bytes, session_id: Optional[bytes] = None
) -> bytes:
    key = kdf(K, H, TRANSCRIPT_KEY_LETTER, session_id or H, 32)
    return hmac.new(key, transcript.serialize(), hashlib.sha256).digest()


def verify_transcript_mac(
    transcript: FullTranscript, K: int, H: bytes, mac: bytes, session_id: Optional[bytes] = None
) -> bool:
    return hmac.compare_digest(transcript_mac(transcript, K, H, session_id), mac)
