from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sshlab.codec import (
    MIN_PADDING,
    BinaryPacket,
    CriticallyCorrupt,
    Debug,
    Disconnect,
    EvasivelyCorrupt,
    ExtInfo,
    Ignore,
    KexDhInit,
    KexDhReply,
    KexInit,
    NewKeys,
    Ping,
    Pong,
    ServiceAccept,
    ServiceRequest,
    Unimplemented,
    Unknown,
    UserAuthFailure,
    UserAuthRequest,
    VersionBanner,
    decode_message,
    decode_namelist,
    decode_packet,
    encode_namelist,
    encode_packet,
    pack_mpint,
    padding_length_for,
)
from sshlab.errors import CodecError
from sshlab.registry import MessageIdRegistry, load_registry

names = st.text(
    alphabet=st.characters(min_codepoint=0x21, max_codepoint=0x7E, blacklist_characters=","),
    min_size=1,
    max_size=24,
)
name_lists = st.lists(names, max_size=6).map(tuple)
texts = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=40)
blobs = st.binary(max_size=120)
uint32s = st.integers(min_value=0, max_value=2**32 - 1)

messages = st.one_of(
    st.builds(Disconnect, uint32s, texts, texts),
    st.builds(Ignore, blobs),
    st.builds(Unimplemented, uint32s),
    st.builds(Debug, st.booleans(), texts, texts),
    st.builds(ServiceRequest, texts),
    st.builds(ServiceAccept, texts),
    st.builds(
        ExtInfo,
        st.lists(st.tuples(texts, blobs), max_size=4).map(tuple),
    ),
    st.builds(
        KexInit,
        st.binary(min_size=16, max_size=16),
        *([name_lists] * 10),
        first_kex_packet_follows=st.booleans(),
        reserved=uint32s,
    ),
    st.just(NewKeys()),
    st.builds(KexDhInit, st.integers(min_value=0, max_value=2**2048)),
    st.builds(KexDhReply, blobs, st.integers(min_value=0, max_value=2**2048), blobs),
    st.builds(UserAuthRequest, texts, texts, st.just("password"), blobs),
    st.builds(UserAuthFailure, name_lists, st.booleans()),
    st.builds(Ping, blobs),
    st.builds(Pong, blobs),
)


def _round_trip(msg, block_size: int, length_encrypted: bool) -> None:
    packet = encode_packet(msg, block_size=block_size, length_encrypted=length_encrypted)
    assert packet.is_well_formed
    aligned = packet.packet_length + (4 if length_encrypted else 0)
    assert aligned % max(8, block_size) == 0
    assert decode_packet(packet.to_bytes()[4:]) == msg


@given(msg=messages, block_size=st.sampled_from([8, 16]), length_encrypted=st.booleans())
def test_packet_round_trip(msg, block_size: int, length_encrypted: bool) -> None:
    """Every modelled message survives encode_packet followed by decode_packet."""
    _round_trip(msg, block_size, length_encrypted)


@pytest.mark.slow
@settings(max_examples=10_000, deadline=None)
@given(msg=messages, block_size=st.sampled_from([8, 16]), length_encrypted=st.booleans())
def test_packet_round_trip_long_run(msg, block_size: int, length_encrypted: bool) -> None:
    """Ten thousand generated messages decode back to themselves."""
    _round_trip(msg, block_size, length_encrypted)


@pytest.mark.parametrize(
    ("payload_length", "block_size", "length_encrypted", "expected"),
    [
        (1, 8, True, 10),
        (3, 8, True, 8),
        (4, 8, True, 7),
        (17, 16, True, 10),
        (17, 16, False, 14),
        (11, 16, False, 4),
    ],
)
def test_padding_length_for(payload_length: int, block_size: int, length_encrypted: bool, expected: int) -> None:
    """Padding is the smallest value of at least four that aligns the packet."""
    padding = padding_length_for(payload_length, block_size, length_encrypted)
    assert padding == expected
    assert padding >= MIN_PADDING


class TestDecodeVerdicts:
    """decode_packet classifies corrupt plaintext instead of raising."""

    def test_padding_too_small_is_critical(self) -> None:
        """A padding length under four is critically corrupt."""
        body = bytes([3, Ignore.message_id]) + bytes(14)
        result = decode_packet(body)
        assert isinstance(result, CriticallyCorrupt)
        assert result.padding_length == 3

    def test_padding_longer_than_packet_is_critical(self) -> None:
        """A padding length that leaves no payload byte is critically corrupt."""
        body = bytes([15, Ignore.message_id]) + bytes(14)
        assert isinstance(decode_packet(body), CriticallyCorrupt)

    def test_unknown_id_is_evasive(self) -> None:
        """A well-formed packet with an unregistered ID is evasively corrupt."""
        body = bytes([4, 200]) + b"abcdefghij" + bytes(4)
        result = decode_packet(body)
        assert isinstance(result, EvasivelyCorrupt)
        assert result.message_id == 200
        assert result.payload == bytes([200]) + b"abcdefghij"

    def test_malformed_known_body_is_critical(self) -> None:
        """A registered ID whose body does not parse is critically corrupt."""
        body = bytes([4, Ignore.message_id]) + b"\xff\xff\xff\xff\x00" + bytes(4)
        result = decode_packet(body)
        assert isinstance(result, CriticallyCorrupt)
        assert result.message_id == Ignore.message_id

    def test_custom_registry_changes_the_verdict(self) -> None:
        """IDs outside a custom registry are evasive even when a class exists for them."""
        registry = MessageIdRegistry.from_ids([Ignore.message_id])
        packet = encode_packet(Ping(b"hi"))
        assert isinstance(decode_packet(packet, registry), EvasivelyCorrupt)

    def test_short_packet_is_critical(self) -> None:
        assert isinstance(decode_packet(b"\x04"), CriticallyCorrupt)


class TestEmptyServiceAccept:
    """The crafted first block of the CBC-EtM downgrade: padding 0x1E followed by ID 0x06."""

    BLOCK = bytes([0x1E, 0x06]) + b"\xff" * 30

    def test_accepted_leniently(self) -> None:
        """A lenient decoder reads the block as a body-less ServiceAccept."""
        assert decode_packet(self.BLOCK, lenient_service_accept=True) == ServiceAccept(None)

    def test_rejected_strictly(self) -> None:
        """A strict decoder rejects the same block."""
        result = decode_packet(self.BLOCK)
        assert isinstance(result, CriticallyCorrupt)
        assert result.message_id == ServiceAccept.message_id

    def test_exhaustive_leading_pairs(self) -> None:
        """Exactly one (padding length, ID) pair of the 2^16 decodes as a ServiceAccept."""
        registry = load_registry()
        accepted = [
            (p, m)
            for p in range(256)
            for m in range(256)
            if isinstance(
                decode_packet(bytes([p, m]) + b"\xff" * 30, registry, lenient_service_accept=True),
                ServiceAccept,
            )
        ]
        assert accepted == [(0x1E, 0x06)]


class TestWirePrimitives:
    @pytest.mark.parametrize(
        ("value", "expected"),
        [
            (0, b"\x00\x00\x00\x00"),
            (0x7F, b"\x00\x00\x00\x01\x7f"),
            (0x80, b"\x00\x00\x00\x02\x00\x80"),
            (0x1234, b"\x00\x00\x00\x02\x12\x34"),
        ],
    )
    def test_pack_mpint(self, value: int, expected: bytes) -> None:
        """mpints are minimal two's complement with a spare sign bit."""
        assert pack_mpint(value) == expected

    def test_namelist_round_trip(self) -> None:
        encoded = encode_namelist(["aes128-ctr", "chacha20-poly1305@openssh.com"])
        assert decode_namelist(encoded) == ["aes128-ctr", "chacha20-poly1305@openssh.com"]

    def test_namelist_rejects_comma(self) -> None:
        with pytest.raises(CodecError, match="comma"):
            encode_namelist(["a,b"])

    def test_unknown_ids_decode_opaquely(self) -> None:
        """decode_message keeps the body of an ID without a message class."""
        assert decode_message(bytes([200]) + b"xyz") == Unknown(200, b"xyz")

    def test_trailing_bytes_rejected(self) -> None:
        with pytest.raises(CodecError, match="trailing"):
            decode_message(NewKeys().encode() + b"\x00")

    def test_binary_packet_from_body_partitions_corrupt_bodies(self) -> None:
        """from_body never loses bytes, even when the padding length is nonsense."""
        body = bytes([250, 1, 2, 3])
        assert BinaryPacket.from_body(body).body == body


class TestVersionBanner:
    def test_line_round_trip(self) -> None:
        banner = VersionBanner.for_software("OpenSSH_9.5")
        assert banner.to_line() == b"SSH-2.0-OpenSSH_9.5\r\n"
        assert VersionBanner.parse_line(banner.to_line()) == banner
        assert banner.software == "OpenSSH_9.5"

    @pytest.mark.parametrize(
        "text",
        [b"SSH-1.99-old", b"SSH-2.0-a\rb", b"SSH-2.0-" + b"x" * 250],
    )
    def test_invalid_banners(self, text: bytes) -> None:
        with pytest.raises(CodecError):
            VersionBanner(text)
