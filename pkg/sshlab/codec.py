"""Binary Packet Protocol codec.

Covers version banners, RFC 4251 wire primitives, every modelled message body and
packet framing with padding. Decoding a packet never raises: malformed plaintext is
reported as a verdict so the peer can decide how to react.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Callable, ClassVar, Dict, List, Optional, Sequence, Tuple, Type, Union

from .errors import CodecError
from .registry import MessageIdRegistry, default_registry

MAX_PAYLOAD = 32768
MIN_PADDING = 4
MAX_BANNER_LINE = 255
BANNER_PREFIX = b"SSH-2.0-"

PaddingSource = Callable[[int], bytes]

_UINT32 = struct.Struct(">I")


# ---------------------------------------------------------------------------
# wire primitives
# ---------------------------------------------------------------------------

def pack_uint32(value: int) -> bytes:
    return _UINT32.pack(value & 0xFFFFFFFF)


def pack_string(data: bytes) -> bytes:
    return _UINT32.pack(len(data)) + data


def pack_mpint(value: int) -> bytes:
    if value < 0:
        raise CodecError("negative mpint values are not used by this protocol")
    if value == 0:
        return pack_string(b"")
    # one spare bit keeps the sign bit clear
    return pack_string(value.to_bytes(value.bit_length() // 8 + 1, "big"))


def _check_name(name: str) -> None:
    if not name:
        raise CodecError("empty algorithm name in name-list")
    if "," in name:
        raise CodecError(f"name-list entry contains a comma: {name!r}")
    if not name.isascii():
        raise CodecError(f"name-list entry is not ASCII: {name!r}")


def encode_namelist(names: Sequence[str]) -> bytes:
    for name in names:
        _check_name(name)
    return pack_string(",".join(names).encode("ascii"))


def decode_namelist(data: bytes) -> List[str]:
    reader = WireReader(data)
    names = reader.read_namelist()
    reader.expect_end()
    return names


class WireReader:
    """Cursor over a byte string; every read raises CodecError on truncation."""

    def __init__(self, data: bytes, offset: int = 0) -> None:
        self._data = data
        self._pos = offset

    @property
    def remaining(self) -> int:
        return len(self._data) - self._pos

    def read_bytes(self, count: int) -> bytes:
        if count < 0 or self._pos + count > len(self._data):
            raise CodecError(f"truncated field: wanted {count} bytes, {self.remaining} left")
        chunk = self._data[self._pos:self._pos + count]
        self._pos += count
        return chunk

    def read_byte(self) -> int:
        return self.read_bytes(1)[0]

    def read_boolean(self) -> bool:
        return self.read_byte() != 0

    def read_uint32(self) -> int:
        return _UINT32.unpack(self.read_bytes(4))[0]

    def read_string(self) -> bytes:
        return self.read_bytes(self.read_uint32())

    def read_text(self) -> str:
        raw = self.read_string()
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise CodecError("string field is not valid UTF-8") from e

    def read_mpint(self) -> int:
        raw = self.read_string()
        if raw and raw[0] & 0x80:
            raise CodecError("negative mpint")
        return int.from_bytes(raw, "big")

    def read_namelist(self) -> List[str]:
        raw = self.read_string()
        if not raw:
            return []
        try:
            text = raw.decode("ascii")
        except UnicodeDecodeError as e:
            raise CodecError("name-list is not ASCII") from e
        names = text.split(",")
        for name in names:
            _check_name(name)
        return names

    def rest(self) -> bytes:
        return self.read_bytes(self.remaining)

    def expect_end(self) -> None:
        if self.remaining:
            raise CodecError(f"{self.remaining} trailing bytes after message body")


class WireWriter:
    def __init__(self) -> None:
        self._parts: List[bytes] = []

    def byte(self, value: int) -> "WireWriter":
        self._parts.append(bytes([value]))
        return self

    def boolean(self, value: bool) -> "WireWriter":
        return self.byte(1 if value else 0)

    def uint32(self, value: int) -> "WireWriter":
        self._parts.append(pack_uint32(value))
        return self

    def string(self, value: bytes) -> "WireWriter":
        self._parts.append(pack_string(value))
        return self

    def text(self, value: str) -> "WireWriter":
        return self.string(value.encode("utf-8"))

    def mpint(self, value: int) -> "WireWriter":
        self._parts.append(pack_mpint(value))
        return self

    def namelist(self, names: Sequence[str]) -> "WireWriter":
        self._parts.append(encode_namelist(names))
        return self

    def raw(self, value: bytes) -> "WireWriter":
        self._parts.append(value)
        return self

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


# ---------------------------------------------------------------------------
# version banner
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VersionBanner:
    text: bytes

    def __post_init__(self) -> None:
        if not self.text.startswith(BANNER_PREFIX):
            raise CodecError(f"banner must start with {BANNER_PREFIX!r}")
        if b"\r" in self.text or b"\n" in self.text:
            raise CodecError("banner contains CR or LF")
        if len(self.text) + 2 > MAX_BANNER_LINE:
            raise CodecError("banner line longer than 255 bytes")

    @classmethod
    def for_software(cls, software: str) -> "VersionBanner":
        return cls(BANNER_PREFIX + software.encode("ascii"))

    @classmethod
    def parse_line(cls, line: bytes) -> "VersionBanner":
        return cls(line.rstrip(b"\n").rstrip(b"\r"))

    def to_line(self) -> bytes:
        return self.text + b"\r\n"

    @property
    def software(self) -> str:
        return self.text[len(BANNER_PREFIX):].decode("ascii", errors="replace")


# ---------------------------------------------------------------------------
# messages
# ---------------------------------------------------------------------------

MESSAGE_TYPES: Dict[int, Type["Message"]] = {}


def _variant(cls: Type["Message"]) -> Type["Message"]:
    MESSAGE_TYPES[cls.message_id] = cls
    return cls


@dataclass(frozen=True)
class Message:
    """Base of the message union; subclasses set ``message_id`` and their body layout."""

    message_id: ClassVar[int] = -1

    @property
    def id(self) -> int:
        return self.message_id

    @property
    def name(self) -> str:
        return type(self).__name__

    def encode(self) -> bytes:
        writer = WireWriter().byte(self.id)
        self._write_body(writer)
        return writer.getvalue()

    def _write_body(self, writer: WireWriter) -> None:
        return None

    @classmethod
    def _read_body(cls, reader: WireReader, lenient_service_accept: bool) -> "Message":
        return cls()


@_variant
@dataclass(frozen=True)
class Disconnect(Message):
    message_id: ClassVar[int] = 1

    reason_code: int = 11
    description: str = ""
    language: str = ""

    def _write_body(self, writer: WireWriter) -> None:
        writer.uint32(self.reason_code).text(self.description).text(self.language)

    @classmethod
    def _read_body(cls, reader: WireReader, lenient_service_accept: bool) -> "Disconnect":
        return cls(reader.read_uint32(), reader.read_text(), reader.read_text())


@_variant
@dataclass(frozen=True)
class Ignore(Message):
    message_id: ClassVar[int] = 2

    data: bytes = b""

    def _write_body(self, writer: WireWriter) -> None:
        writer.string(self.data)

    @classmethod
    def _read_body(cls, reader: WireReader, lenient_service_accept: bool) -> "Ignore":
        return cls(reader.read_string())


@_variant
@dataclass(frozen=True)
class Unimplemented(Message):
    message_id: ClassVar[int] = 3

    seqno: int = 0

    def _write_body(self, writer: WireWriter) -> None:
        writer.uint32(self.seqno)

    @classmethod
    def _read_body(cls, reader: WireReader, lenient_service_accept: bool) -> "Unimplemented":
        return cls(reader.read_uint32())


@_variant
@dataclass(frozen=True)
class Debug(Message):
    message_id: ClassVar[int] = 4

    always_display: bool = False
    message: str = ""
    language: str = ""

    def _write_body(self, writer: WireWriter) -> None:
        writer.boolean(self.always_display).text(self.message).text(self.language)

    @classmethod
    def _read_body(cls, reader: WireReader, lenient_service_accept: bool) -> "Debug":
        return cls(reader.read_boolean(), reader.read_text(), reader.read_text())


@_variant
@dataclass(frozen=True)
class ServiceRequest(Message):
    message_id: ClassVar[int] = 5

    service: str = "ssh-userauth"

    def _write_body(self, writer: WireWriter) -> None:
        writer.text(self.service)

    @classmethod
    def _read_body(cls, reader: WireReader, lenient_service_accept: bool) -> "ServiceRequest":
        return cls(reader.read_text())


@_variant
@dataclass(frozen=True)
class ServiceAccept(Message):
    """``service`` is None for the body-less form some clients tolerate."""

    message_id: ClassVar[int] = 6

    service: Optional[str] = "ssh-userauth"

    def _write_body(self, writer: WireWriter) -> None:
        if self.service is not None:
            writer.text(self.service)

    @classmethod
    def _read_body(cls, reader: WireReader, lenient_service_accept: bool) -> "ServiceAccept":
        if reader.remaining == 0:
            if lenient_service_accept:
                return cls(None)
            raise CodecError("ServiceAccept without service name")
        return cls(reader.read_text())


@_variant
@dataclass(frozen=True)
class ExtInfo(Message):
    message_id: ClassVar[int] = 7

    extensions: Tuple[Tuple[str, bytes], ...] = ()

    @classmethod
    def from_mapping(cls, mapping: Dict[str, Union[str, bytes]]) -> "ExtInfo":
        return cls(tuple(
            (name, value.encode("utf-8") if isinstance(value, str) else value)
            for name, value in mapping.items()
        ))

    def as_dict(self) -> Dict[str, bytes]:
        return dict(self.extensions)

    def _write_body(self, writer: WireWriter) -> None:
        writer.uint32(len(self.extensions))
        for name, value in self.extensions:
            writer.text(name).string(value)

    @classmethod
    def _read_body(cls, reader: WireReader, lenient_service_accept: bool) -> "ExtInfo":
        count = reader.read_uint32()
        if count * 8 > reader.remaining:
            raise CodecError(f"ExtInfo announces {count} entries in {reader.remaining} bytes")
        return cls(tuple((reader.read_text(), reader.read_string()) for _ in range(count)))


@_variant
@dataclass(frozen=True)
class TranscriptMac(Message):
    message_id: ClassVar[int] = 8

    mac: bytes = b""

    def _write_body(self, writer: WireWriter) -> None:
        writer.string(self.mac)

    @classmethod
    def _read_body(cls, reader: WireReader, lenient_service_accept: bool) -> "TranscriptMac":
        return cls(reader.read_string())


@_variant
@dataclass(frozen=True)
class KexInit(Message):
    message_id: ClassVar[int] = 20

    cookie: bytes = bytes(16)
    kex_algorithms: Tuple[str, ...] = ()
    server_host_key_algorithms: Tuple[str, ...] = ()
    encryption_client_to_server: Tuple[str, ...] = ()
    encryption_server_to_client: Tuple[str, ...] = ()
    mac_client_to_server: Tuple[str, ...] = ()
    mac_server_to_client: Tuple[str, ...] = ()
    compression_client_to_server: Tuple[str, ...] = ("none",)
    compression_server_to_client: Tuple[str, ...] = ("none",)
    languages_client_to_server: Tuple[str, ...] = ()
    languages_server_to_client: Tuple[str, ...] = ()
    first_kex_packet_follows: bool = False
    reserved: int = 0

    LIST_FIELDS: ClassVar[Tuple[str, ...]] = (
        "kex_algorithms",
        "server_host_key_algorithms",
        "encryption_client_to_server",
        "encryption_server_to_client",
        "mac_client_to_server",
        "mac_server_to_client",
        "compression_client_to_server",
        "compression_server_to_client",
        "languages_client_to_server",
        "languages_server_to_client",
    )

    def __post_init__(self) -> None:
        if len(self.cookie) != 16:
            raise CodecError("KexInit cookie must be 16 bytes")

    def _write_body(self, writer: WireWriter) -> None:
        writer.raw(self.cookie)
        for field_name in self.LIST_FIELDS:
            writer.namelist(getattr(self, field_name))
        writer.boolean(self.first_kex_packet_follows).uint32(self.reserved)

    @classmethod
    def _read_body(cls, reader: WireReader, lenient_service_accept: bool) -> "KexInit":
        cookie = reader.read_bytes(16)
        lists = [tuple(reader.read_namelist()) for _ in cls.LIST_FIELDS]
        follows = reader.read_boolean()
        reserved = reader.read_uint32()
        return cls(cookie, *lists, first_kex_packet_follows=follows, reserved=reserved)

    def lists(self) -> Dict[str, List[str]]:
        return {field_name: list(getattr(self, field_name)) for field_name in self.LIST_FIELDS}


@_variant
@dataclass(frozen=True)
class NewKeys(Message):
    message_id: ClassVar[int] = 21


@_variant
@dataclass(frozen=True)
class KexDhInit(Message):
    message_id: ClassVar[int] = 30

    e: int = 0

    def _write_body(self, writer: WireWriter) -> None:
        writer.mpint(self.e)

    @classmethod
    def _read_body(cls, reader: WireReader, lenient_service_accept: bool) -> "KexDhInit":
        return cls(reader.read_mpint())


@_variant
@dataclass(frozen=True)
class KexDhReply(Message):
    message_id: ClassVar[int] = 31

    host_key: bytes = b""
    f: int = 0
    signature: bytes = b""

    def _write_body(self, writer: WireWriter) -> None:
        writer.string(self.host_key).mpint(self.f).string(self.signature)

    @classmethod
    def _read_body(cls, reader: WireReader, lenient_service_accept: bool) -> "KexDhReply":
        return cls(reader.read_string(), reader.read_mpint(), reader.read_string())


@_variant
@dataclass(frozen=True)
class UserAuthRequest(Message):
    """Password carries the secret in ``credential``; publickey carries the key blob."""

    message_id: ClassVar[int] = 50

    user: str = ""
    service: str = "ssh-connection"
    method: str = "password"
    credential: bytes = b""
    algorithm: str = ""

    def _write_body(self, writer: WireWriter) -> None:
        writer.text(self.user).text(self.service).text(self.method)
        if self.method == "password":
            writer.boolean(False).string(self.credential)
        elif self.method == "publickey":
            writer.boolean(True).text(self.algorithm).string(self.credential)
        elif self.method != "none":
            writer.raw(self.credential)

    @classmethod
    def _read_body(cls, reader: WireReader, lenient_service_accept: bool) -> "UserAuthRequest":
        user, service, method = reader.read_text(), reader.read_text(), reader.read_text()
        if method == "password":
            if reader.read_boolean():
                raise CodecError("password change requests are not supported")
            return cls(user, service, method, reader.read_string())
        if method == "publickey":
            reader.read_boolean()
            algorithm = reader.read_text()
            return cls(user, service, method, reader.read_string(), algorithm)
        if method == "none":
            return cls(user, service, method)
        return cls(user, service, method, reader.rest())


@_variant
@dataclass(frozen=True)
class UserAuthFailure(Message):
    message_id: ClassVar[int] = 51

    methods: Tuple[str, ...] = ("password",)
    partial_success: bool = False

    def _write_body(self, writer: WireWriter) -> None:
        writer.namelist(self.methods).boolean(self.partial_success)

    @classmethod
    def _read_body(cls, reader: WireReader, lenient_service_accept: bool) -> "UserAuthFailure":
        return cls(tuple(reader.read_namelist()), reader.read_boolean())


@_variant
@dataclass(frozen=True)
class UserAuthSuccess(Message):
    message_id: ClassVar[int] = 52


@_variant
@dataclass(frozen=True)
class Ping(Message):
    message_id: ClassVar[int] = 192

    data: bytes = b""

    def _write_body(self, writer: WireWriter) -> None:
        writer.string(self.data)

    @classmethod
    def _read_body(cls, reader: WireReader, lenient_service_accept: bool) -> "Ping":
        return cls(reader.read_string())


@_variant
@dataclass(frozen=True)
class Pong(Message):
    message_id: ClassVar[int] = 193

    data: bytes = b""

    def _write_body(self, writer: WireWriter) -> None:
        writer.string(self.data)

    @classmethod
    def _read_body(cls, reader: WireReader, lenient_service_accept: bool) -> "Pong":
        return cls(reader.read_string())


@dataclass(frozen=True)
class Unknown(Message):
    """Any ID without a modelled body; the payload after the ID byte is kept opaque."""

    code: int = 200
    data: bytes = b""

    def __post_init__(self) -> None:
        if not 0 <= self.code <= 255:
            raise CodecError(f"message id {self.code} does not fit in a byte")

    @property
    def id(self) -> int:
        return self.code

    def _write_body(self, writer: WireWriter) -> None:
        writer.raw(self.data)


def decode_message(payload: bytes, *, lenient_service_accept: bool = False) -> Message:
    """Decode a payload (ID byte first). Raises CodecError on a malformed body."""
    if not payload:
        raise CodecError("empty payload")
    cls = MESSAGE_TYPES.get(payload[0])
    if cls is None:
        return Unknown(payload[0], payload[1:])
    reader = WireReader(payload, 1)
    msg = cls._read_body(reader, lenient_service_accept)
    reader.expect_end()
    return msg


# ---------------------------------------------------------------------------
# packets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BinaryPacket:
    packet_length: int
    padding_length: int
    payload: bytes
    padding: bytes

    @classmethod
    def from_body(cls, body: bytes) -> "BinaryPacket":
        """Split the bytes after the length field without validating them.

        The split always partitions ``body`` so ``packet.body == body`` holds even for
        corrupt plaintext; :func:`decode_packet` judges well-formedness.
        """
        if not body:
            return cls(0, 0, b"", b"")
        padding_length = body[0]
        end = max(1, len(body) - padding_length)
        return cls(len(body), padding_length, body[1:end], body[end:])

    @property
    def body(self) -> bytes:
        if self.packet_length == 0:
            return b""
        return bytes([self.padding_length]) + self.payload + self.padding

    def to_bytes(self) -> bytes:
        return pack_uint32(self.packet_length) + self.body

    @property
    def is_well_formed(self) -> bool:
        return MIN_PADDING <= self.padding_length <= self.packet_length - 2

    @property
    def message_id(self) -> Optional[int]:
        return self.payload[0] if self.payload else None


class VerdictKind(str, Enum):
    critically_corrupt = "critically_corrupt"
    evasively_corrupt = "evasively_corrupt"


@dataclass(frozen=True)
class CriticallyCorrupt:
    reason: str
    padding_length: int = 0
    message_id: Optional[int] = None

    kind: ClassVar[VerdictKind] = VerdictKind.critically_corrupt


@dataclass(frozen=True)
class EvasivelyCorrupt:
    """Well-formed packet whose ID the registry does not know."""

    message_id: int
    payload: bytes = b""

    kind: ClassVar[VerdictKind] = VerdictKind.evasively_corrupt


WellFormednessVerdict = Union[CriticallyCorrupt, EvasivelyCorrupt]
DecodeResult = Union[Message, CriticallyCorrupt, EvasivelyCorrupt]


def padding_length_for(payload_length: int, block_size: int, length_encrypted: bool) -> int:
    """Smallest padding >= 4 that aligns the packet.

    With ``length_encrypted`` the 4-byte length field counts towards the alignment,
    otherwise only ``packet_length`` has to be a multiple of max(8, block_size).
    """
    align = max(8, block_size)
    base = 1 + payload_length + (4 if length_encrypted else 0)
    return (-(base + MIN_PADDING)) % align + MIN_PADDING


def encode_packet(
    msg: Union[Message, bytes],
    block_size: int = 8,
    length_encrypted: bool = True,
    padding_source: PaddingSource = os.urandom,
) -> BinaryPacket:
    payload = msg.encode() if isinstance(msg, Message) else bytes(msg)
    if len(payload) > MAX_PAYLOAD:
        raise CodecError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    if block_size <= 0:
        raise CodecError("block size must be positive")
    padding_length = padding_length_for(len(payload), block_size, length_encrypted)
    padding = padding_source(padding_length)
    if len(padding) != padding_length:
        raise CodecError("padding source returned the wrong number of bytes")
    return BinaryPacket(1 + len(payload) + padding_length, padding_length, payload, padding)


def decode_packet(
    raw: Union[BinaryPacket, bytes],
    registry: Optional[MessageIdRegistry] = None,
    *,
    lenient_service_accept: bool = False,
) -> DecodeResult:
    """Decode packet plaintext (bytes after the length field) into a message or a verdict."""
    body = raw.body if isinstance(raw, BinaryPacket) else bytes(raw)
    ell = len(body)
    if ell < 2:
        return CriticallyCorrupt(f"packet of {ell} bytes cannot hold a message")
    padding_length = body[0]
    if not MIN_PADDING <= padding_length <= ell - 2:
        return CriticallyCorrupt(
            f"padding length {padding_length} outside [{MIN_PADDING}, {ell - 2}]", padding_length
        )
    payload = body[1:ell - padding_length]
    message_id = payload[0]
    known = (registry or default_registry()).known_ids
    if message_id not in known:
        return EvasivelyCorrupt(message_id, payload)
    try:
        return decode_message(payload, lenient_service_accept=lenient_service_accept)
    except CodecError as e:
        return CriticallyCorrupt(str(e), padding_length, message_id)


def is_verdict(result: DecodeResult) -> bool:
    return isinstance(result, (CriticallyCorrupt, EvasivelyCorrupt))
