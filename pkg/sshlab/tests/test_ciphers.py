from __future__ import annotations

from typing import Tuple

import pytest

from sshlab import ciphers
from sshlab.ciphers import (
    CIPHER_CBC,
    CIPHER_CHACHA,
    CIPHER_CTR,
    CIPHER_GCM,
    MAC_EAM,
    MAC_ETM,
    MAX_PACKET_LENGTH,
    Direction,
    DirectionalCipherState,
    Exposure,
    ModeId,
    derive_directional_keys,
    frame_length,
    kdf,
    seal,
)
from sshlab.codec import Ignore, ServiceAccept, encode_packet, pack_uint32
from sshlab.errors import AuthFailure, PacketLengthError

K = 0x1D2C3B4A5968778695A4B3C2D1E0F
H = bytes(range(32))


def _pair(mode: ModeId) -> Tuple[DirectionalCipherState, DirectionalCipherState]:
    sender = derive_directional_keys(K, H, H, mode, Direction.server_to_client)
    receiver = derive_directional_keys(K, H, H, mode, Direction.server_to_client)
    sender.activate()
    receiver.activate()
    return sender, receiver


def _packet(state: DirectionalCipherState, msg=None):
    return encode_packet(
        msg or ServiceAccept(),
        block_size=state.block_size,
        length_encrypted=state.aligns_length_field,
        padding_source=lambda n: bytes(n),
    )


@pytest.mark.parametrize("mode", list(ModeId))
def test_seal_open_round_trip(mode: ModeId) -> None:
    """Three consecutive packets open in order under every mode."""
    sender, receiver = _pair(mode)
    for seqno, msg in enumerate([ServiceAccept(), Ignore(b"x" * 40), Ignore(b"")], start=3):
        packet = _packet(sender, msg)
        wire = seal(sender, seqno, packet)
        assert frame_length(receiver, seqno, wire[:receiver.head_size]) == len(wire)
        assert ciphers.open(receiver, seqno, wire) == packet


@pytest.mark.parametrize("mode", list(ModeId))
def test_tampered_ciphertext_fails_authentication(mode: ModeId) -> None:
    """Flipping a ciphertext bit after the length field is an AuthFailure."""
    sender, receiver = _pair(mode)
    wire = bytearray(seal(sender, 0, _packet(sender)))
    wire[-(receiver.mac_length + 1)] ^= 0x01
    with pytest.raises(AuthFailure):
        ciphers.open(receiver, 0, bytes(wire))


@pytest.mark.parametrize(
    "mode",
    [ModeId.chacha20_poly1305, ModeId.ctr_eam, ModeId.ctr_etm, ModeId.cbc_eam, ModeId.cbc_etm],
)
def test_wrong_sequence_number_fails_authentication(mode: ModeId) -> None:
    """Modes that bind the sequence number reject a packet opened under another one."""
    sender, receiver = _pair(mode)
    wire = seal(sender, 5, _packet(sender))
    with pytest.raises(AuthFailure):
        ciphers.open(receiver, 6, wire)


def test_gcm_ignores_sequence_number_but_tracks_invocations() -> None:
    """GCM authenticates with its own invocation counter, so skipping a packet breaks the next one."""
    sender, receiver = _pair(ModeId.gcm)
    first = seal(sender, 0, _packet(sender))
    second = seal(sender, 1, _packet(sender))
    with pytest.raises(AuthFailure):
        ciphers.open(receiver, 1, second)
    assert ciphers.open(receiver, 99, first) == _packet(receiver)


def test_inactive_state_is_plaintext() -> None:
    """Before NewKeys the wire bytes are the packet bytes."""
    state = DirectionalCipherState()
    packet = encode_packet(Ignore(b"hello"))
    wire = seal(state, 0, packet)
    assert wire == packet.to_bytes()
    assert frame_length(state, 0, wire[:4]) == len(wire)
    assert ciphers.open(state, 0, wire) == packet


class TestFrameLength:
    def test_rejects_oversized_length(self) -> None:
        state = DirectionalCipherState()
        with pytest.raises(PacketLengthError, match="exceeds"):
            frame_length(state, 0, pack_uint32(MAX_PACKET_LENGTH + 8))

    def test_rejects_unaligned_length(self) -> None:
        state = DirectionalCipherState()
        with pytest.raises(PacketLengthError, match="not aligned"):
            frame_length(state, 0, pack_uint32(13))

    def test_needs_a_full_head(self) -> None:
        sender, receiver = _pair(ModeId.cbc_eam)
        with pytest.raises(PacketLengthError, match="need 16 bytes"):
            frame_length(receiver, 0, bytes(4))

    def test_open_rejects_truncated_cleartext_wire(self) -> None:
        with pytest.raises(PacketLengthError, match="no length field"):
            ciphers.open(DirectionalCipherState(), 0, b"\x00\x00")

    def test_does_not_mutate_state(self) -> None:
        """Reading the length of a CBC-EaM packet leaves the IV chain alone."""
        sender, receiver = _pair(ModeId.cbc_eam)
        wire = seal(sender, 0, _packet(sender))
        before = receiver.copy()
        frame_length(receiver, 0, wire[:16])
        assert receiver == before


class TestModeIds:
    @pytest.mark.parametrize(
        ("cipher", "mac", "expected"),
        [
            (CIPHER_CHACHA, None, ModeId.chacha20_poly1305),
            (CIPHER_GCM, None, ModeId.gcm),
            (CIPHER_CTR, MAC_EAM, ModeId.ctr_eam),
            (CIPHER_CTR, MAC_ETM, ModeId.ctr_etm),
            (CIPHER_CBC, MAC_EAM, ModeId.cbc_eam),
            (CIPHER_CBC, MAC_ETM, ModeId.cbc_etm),
        ],
    )
    def test_from_algorithms(self, cipher: str, mac, expected: ModeId) -> None:
        assert ModeId.from_algorithms(cipher, mac) is expected
        assert expected.cipher_name == cipher

    @pytest.mark.parametrize(
        ("text", "expected"),
        [("chacha", ModeId.chacha20_poly1305), ("cbc-etm", ModeId.cbc_etm), ("GCM", ModeId.gcm)],
    )
    def test_parse(self, text: str, expected: ModeId) -> None:
        assert ModeId.parse(text) is expected

    def test_parse_rejects_unknown(self) -> None:
        with pytest.raises(ValueError, match="unknown mode"):
            ModeId.parse("rc4")

    def test_taxonomy(self) -> None:
        """Only ChaCha20-Poly1305 and CBC-EtM are exploitably vulnerable."""
        assert ModeId.chacha20_poly1305.taxonomy is Exposure.vulnerable_exploitable
        assert ModeId.cbc_etm.taxonomy is Exposure.vulnerable_probabilistic
        assert ModeId.ctr_etm.taxonomy is Exposure.vulnerable_not_exploitable
        for mode in (ModeId.gcm, ModeId.cbc_eam, ModeId.ctr_eam):
            assert mode.taxonomy is Exposure.not_vulnerable


class TestKeyDerivation:
    def test_directions_differ(self) -> None:
        c2s = derive_directional_keys(K, H, H, ModeId.ctr_etm, Direction.client_to_server)
        s2c = derive_directional_keys(K, H, H, ModeId.ctr_etm, Direction.server_to_client)
        assert c2s.enc_key != s2c.enc_key
        assert c2s.mac_key != s2c.mac_key

    def test_kdf_extends_past_one_digest(self) -> None:
        """Keys longer than the hash are prefix-stable."""
        long = kdf(K, H, b"C", H, 64)
        assert len(long) == 64
        assert long[:32] == kdf(K, H, b"C", H, 32)

    def test_state_starts_inactive(self) -> None:
        state = derive_directional_keys(K, H, H, ModeId.gcm, Direction.client_to_server)
        assert not state.active
        assert state.block_size == 8

    def test_requires_exchange_hash(self) -> None:
        with pytest.raises(ValueError, match="non-empty"):
            derive_directional_keys(K, b"", H, ModeId.gcm, Direction.client_to_server)
