"""Client and server state machines over the codec, cipher and handshake layers.

Peers are sans-IO: feed bytes with ``receive_data`` and collect wire frames (one per
packet, the banner line included) with ``drain_output``. The deterministic fabric and
the asyncio stream drivers at the bottom of this module run the same core.
"""
from __future__ import annotations

import asyncio
import hmac
import logging
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import ciphers
from .ciphers import Direction, DirectionalCipherState, derive_directional_keys
from .codec import (
    CriticallyCorrupt,
    Debug,
    Disconnect,
    EvasivelyCorrupt,
    ExtInfo,
    Ignore,
    KexDhInit,
    KexDhReply,
    KexInit,
    Message,
    NewKeys,
    Ping,
    Pong,
    ServiceAccept,
    ServiceRequest,
    TranscriptMac,
    Unimplemented,
    Unknown,
    UserAuthFailure,
    UserAuthRequest,
    UserAuthSuccess,
    VersionBanner,
    decode_packet,
    encode_packet,
)
from .errors import CodecError, HandshakeError, NegotiationError, PacketLengthError, AuthFailure
from .handshake import (
    GROUP14,
    DhExchange,
    FullTranscript,
    HostKey,
    NegotiationResult,
    TranscriptInputs,
    build_kexinit,
    exchange_hash,
    negotiate,
    transcript_mac,
    verify_host_signature,
    verify_transcript_mac,
)
from .models import HOST_KEY_ED25519, PeerConfig, Role
from .registry import MessageIdRegistry, load_registry

logger = logging.getLogger(__name__)

SeedLike = Union[None, int, Sequence[int], np.random.SeedSequence]

MAX_BANNER_PREAMBLE = 16 * 1024
_COMPACT_AFTER = 1 << 16
USERAUTH_SERVICE = "ssh-userauth"


class DisconnectReason(IntEnum):
    protocol_error = 2
    key_exchange_failed = 3
    mac_error = 5
    service_not_available = 7
    host_key_not_verifiable = 9
    by_application = 11
    no_more_auth_methods = 14


class TerminalCause(str, Enum):
    auth_failure = "AUTH_FAILURE"
    packet_length = "PACKET_LENGTH"
    corrupt_packet = "CORRUPT_PACKET"
    disconnect_sent = "DISCONNECT_SENT"
    disconnect_received = "DISCONNECT_RECEIVED"
    peer_closed = "PEER_CLOSED"
    closed = "CLOSED"
    negotiation_failure = "NEGOTIATION_FAILURE"
    kex_failure = "KEX_FAILURE"
    host_key_rejected = "HOST_KEY_REJECTED"
    transcript_mac_mismatch = "TRANSCRIPT_MAC_MISMATCH"
    rollover_detected = "ROLLOVER_DETECTED"
    userauth_failure = "USERAUTH_FAILURE"
    timeout = "TIMEOUT"

    @property
    def is_failure(self) -> bool:
        return self not in (TerminalCause.closed, TerminalCause.peer_closed)

    @property
    def is_detection(self) -> bool:
        return self in (TerminalCause.rollover_detected, TerminalCause.transcript_mac_mismatch)


class EventKind(str, Enum):
    banner_sent = "banner_sent"
    banner_received = "banner_received"
    sent = "sent"
    received = "received"
    ignored = "ignored"
    deferred = "deferred"
    corrupt = "corrupt"
    evasive = "evasive"
    keys_activated = "keys_activated"
    counters_reset = "counters_reset"
    channel_entered = "channel_entered"
    extensions = "extensions"
    established = "established"
    terminal = "terminal"


@dataclass
class SequenceCounters:
    bits: int = 32
    snd: int = 0
    rcv: int = 0

    def __post_init__(self) -> None:
        if self.bits not in (16, 32):
            raise ValueError(f"sequence counters are 16 or 32 bits wide, got {self.bits}")

    @property
    def modulus(self) -> int:
        return 1 << self.bits

    def advance_send(self) -> bool:
        """Count one sent packet; True when the counter wrapped to zero."""
        self.snd = (self.snd + 1) % self.modulus
        return self.snd == 0

    def advance_recv(self) -> bool:
        self.rcv = (self.rcv + 1) % self.modulus
        return self.rcv == 0

    def reset_send(self) -> None:
        self.snd = 0

    def reset_recv(self) -> None:
        self.rcv = 0

    def snapshot(self) -> Tuple[int, int]:
        return self.snd, self.rcv


@dataclass(frozen=True, slots=True)
class PeerEvent:
    kind: EventKind
    message: str = ""
    message_id: Optional[int] = None
    seqno: Optional[int] = None
    snd: int = 0
    rcv: int = 0
    encrypted: bool = False
    detail: str = ""

    def describe(self) -> str:
        parts = [self.kind.value]
        if self.message:
            parts.append(self.message if self.message_id is None else f"{self.message}({self.message_id})")
        if self.seqno is not None:
            parts.append(f"seq={self.seqno}")
        parts.append(f"snd={self.snd} rcv={self.rcv}")
        if self.encrypted:
            parts.append("encrypted")
        if self.detail:
            parts.append(self.detail)
        return " ".join(parts)


@dataclass
class PeerSession:
    role: Role
    counters: SequenceCounters
    send_state: DirectionalCipherState = field(default_factory=DirectionalCipherState)
    recv_state: DirectionalCipherState = field(default_factory=DirectionalCipherState)
    local_banner: Optional[VersionBanner] = None
    peer_banner: Optional[VersionBanner] = None
    local_kexinit: Optional[KexInit] = None
    peer_kexinit: Optional[KexInit] = None
    negotiated: Optional[NegotiationResult] = None
    session_id: Optional[bytes] = None
    received_extensions: Dict[str, bytes] = field(default_factory=dict)
    authenticated_user: Optional[str] = None
    established: bool = False
    channel_entry: Optional[Tuple[int, int]] = None
    transcript: FullTranscript = field(default_factory=FullTranscript)
    app_sent: List[bytes] = field(default_factory=list)
    app_received: List[bytes] = field(default_factory=list)
    events: List[PeerEvent] = field(default_factory=list)
    terminal: Optional[TerminalCause] = None
    terminal_detail: str = ""

    @property
    def keystroke_countermeasure_active(self) -> bool:
        return "ping@openssh.com" in self.received_extensions

    @property
    def failed(self) -> bool:
        return self.terminal is not None and self.terminal.is_failure

    @property
    def detected(self) -> bool:
        return self.terminal is not None and self.terminal.is_detection

    def count(self, kind: EventKind, message: Optional[str] = None) -> int:
        return sum(1 for e in self.events if e.kind is kind and (message is None or e.message == message))

    def messages(self, kind: EventKind) -> List[str]:
        return [e.message for e in self.events if e.kind is kind]

    def summary(self) -> Dict[str, object]:
        return {
            "role": self.role.value,
            "established": self.established,
            "authenticatedUser": self.authenticated_user,
            "extensions": sorted(self.received_extensions),
            "keystrokeCountermeasure": self.keystroke_countermeasure_active,
            "snd": self.counters.snd,
            "rcv": self.counters.rcv,
            "channelEntry": list(self.channel_entry) if self.channel_entry else None,
            "appSent": len(self.app_sent),
            "appReceived": len(self.app_received),
            "terminal": self.terminal.value if self.terminal else None,
            "detail": self.terminal_detail,
        }


def as_seed_sequence(seed: SeedLike) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


class Peer:
    """Shared transport core; subclasses add the role-specific handshake and service flow."""

    role: Role

    def __init__(
        self,
        config: PeerConfig,
        seed: SeedLike = None,
        registry: Optional[MessageIdRegistry] = None,
    ) -> None:
        if config.role is not self.role:
            raise ValueError(f"{type(self).__name__} needs a {self.role.value} config, got {config.role.value}")
        self.config = config
        self.profile = config.profile
        self.registry = registry or load_registry()
        # separate streams so injected traffic never shifts key material or cookies
        kex_seq, padding_seq, cookie_seq = as_seed_sequence(seed).spawn(3)
        self._kex_rng = np.random.default_rng(kex_seq)
        self._padding_rng = np.random.default_rng(padding_seq)
        self._cookie_rng = np.random.default_rng(cookie_seq)

        self.session = PeerSession(role=self.role, counters=SequenceCounters(config.seq_modulus_bits))
        self._buffer = bytearray()
        self._offset = 0
        self._output: List[bytes] = []
        self._pending_channel: List[Message] = []
        self._local_kexinit_payload = b""
        self._peer_kexinit_payload = b""
        self._next_send_state: Optional[DirectionalCipherState] = None
        self._next_recv_state: Optional[DirectionalCipherState] = None
        self._shared_secret: Optional[int] = None
        self._exchange_hash: Optional[bytes] = None
        self._newkeys_sent = False
        self._newkeys_received = False
        self._mac_sent = False
        self._mac_verified = False
        self._post_received = 0

    # -- public surface --------------------------------------------------

    @property
    def local_direction(self) -> Direction:
        return Direction.client_to_server if self.role is Role.client else Direction.server_to_client

    @property
    def closed(self) -> bool:
        return self.session.terminal is not None

    @property
    def channel_entered(self) -> bool:
        return self.session.channel_entry is not None

    def start(self) -> None:
        banner = VersionBanner.for_software(self.config.software)
        self.session.local_banner = banner
        self._output.append(banner.to_line())
        self._record(EventKind.banner_sent, detail=banner.software)
        kexinit = build_kexinit(self.config, self._cookie_rng.bytes(16))
        self.session.local_kexinit = kexinit
        self._local_kexinit_payload = kexinit.encode()
        self.send(kexinit)

    def drain_output(self) -> List[bytes]:
        out, self._output = self._output, []
        return out

    def receive_data(self, data: bytes) -> None:
        if self.closed or not data:
            return
        self._buffer += data
        self._process_buffer()
        if self._offset > _COMPACT_AFTER:
            del self._buffer[:self._offset]
            self._offset = 0

    def send(self, msg: Message) -> None:
        if self.closed:
            return
        if self._must_queue(msg):
            self._pending_channel.append(msg)
            return
        self._send_now(msg)

    def mark_timeout(self, detail: str = "read timed out") -> None:
        self._fail(TerminalCause.timeout, detail)

    def handle_unknown(self, message_id: int, seqno: int) -> Optional[Message]:
        """Answer an unrecognized message: Unimplemented, or Disconnect under a strict-unknown profile."""
        if self.profile.respond_unimplemented_to_unknown:
            reply = Unimplemented(seqno)
            self.send(reply)
            return reply
        return self._fail(
            TerminalCause.disconnect_sent,
            f"unrecognized message id {message_id}",
            DisconnectReason.protocol_error,
        )

    def handle_ping(self, msg: Ping, seqno: int) -> Optional[Message]:
        if not self.config.ping_supported:
            return self.handle_unknown(msg.id, seqno)
        reply = Pong(msg.data)
        self.send(reply)
        return reply

    # -- framing ---------------------------------------------------------

    def _process_buffer(self) -> None:
        while not self.closed:
            if self.session.peer_banner is None:
                if not self._read_banner():
                    return
                continue
            state = self.session.recv_state
            available = len(self._buffer) - self._offset
            if available < state.head_size:
                return
            head = bytes(self._buffer[self._offset:self._offset + state.head_size])
            try:
                total = ciphers.frame_length(state, self.session.counters.rcv, head)
            except PacketLengthError as e:
                self._fail(TerminalCause.packet_length, str(e), DisconnectReason.protocol_error)
                return
            if available < total:
                return
            wire = bytes(self._buffer[self._offset:self._offset + total])
            self._offset += total
            self._handle_wire(wire)

    def _read_banner(self) -> bool:
        while True:
            end = self._buffer.find(b"\n", self._offset)
            if end < 0:
                if len(self._buffer) - self._offset > MAX_BANNER_PREAMBLE:
                    self._fail(TerminalCause.disconnect_sent, "no version banner", DisconnectReason.protocol_error)
                return False
            line = bytes(self._buffer[self._offset:end + 1])
            self._offset = end + 1
            if not line.startswith(b"SSH-"):
                continue
            try:
                banner = VersionBanner.parse_line(line)
            except CodecError as e:
                self._fail(TerminalCause.disconnect_sent, f"bad banner: {e}", DisconnectReason.protocol_error)
                return False
            self.session.peer_banner = banner
            self._record(EventKind.banner_received, detail=banner.software)
            return True

    def _handle_wire(self, wire: bytes) -> None:
        session = self.session
        seqno = session.counters.rcv
        try:
            packet = ciphers.open(session.recv_state, seqno, wire)
        except AuthFailure as e:
            self._fail(TerminalCause.auth_failure, str(e), DisconnectReason.mac_error)
            return
        except PacketLengthError as e:
            self._fail(TerminalCause.packet_length, str(e), DisconnectReason.protocol_error)
            return
        encrypted = session.recv_state.active
        if not encrypted:
            session.transcript.record(self.local_direction.reverse, wire)
        wrapped = session.counters.advance_recv()
        if wrapped and self.profile.detect_seqno_rollover:
            self._fail(TerminalCause.rollover_detected, "receive sequence number wrapped", DisconnectReason.protocol_error)
            return

        result = decode_packet(
            packet, self.registry, lenient_service_accept=self.profile.accept_empty_service_accept
        )
        if encrypted:
            self._post_received += 1
            if self._expecting_transcript_mac() and not isinstance(result, TranscriptMac):
                self._fail(
                    TerminalCause.transcript_mac_mismatch,
                    "first channel message is not a transcript MAC",
                    DisconnectReason.protocol_error,
                )
                return
        if isinstance(result, CriticallyCorrupt):
            self._record(EventKind.corrupt, "", result.message_id, seqno, encrypted, result.reason)
            self._fail(TerminalCause.corrupt_packet, result.reason, DisconnectReason.protocol_error)
            return
        if isinstance(result, EvasivelyCorrupt):
            self._record(EventKind.evasive, "Unknown", result.message_id, seqno, encrypted)
            self.handle_unknown(result.message_id, seqno)
            return
        self._record(EventKind.received, result.name, result.id, seqno, encrypted)
        self._dispatch(result, seqno, packet.payload)

    # -- dispatch ----------------------------------------------------------

    def _dispatch(self, msg: Message, seqno: int, payload: bytes) -> None:
        if isinstance(msg, Ignore):
            if self.session.established:
                self.session.app_received.append(msg.data)
            return
        if isinstance(msg, (Debug, Unimplemented, Pong)):
            return
        if isinstance(msg, Disconnect):
            self._on_disconnect(msg)
            return
        if isinstance(msg, TranscriptMac):
            self._on_transcript_mac(msg)
            return
        if isinstance(msg, Ping):
            self.handle_ping(msg, seqno)
            return
        if isinstance(msg, KexInit):
            self._on_kexinit(msg, payload)
            return
        if isinstance(msg, NewKeys):
            self._on_newkeys()
            return
        if isinstance(msg, ExtInfo):
            if not self._accept_ext_info(msg):
                self._protocol_error(msg)
            return
        if isinstance(msg, Unknown) or not self._on_message(msg):
            self._protocol_error(msg)

    def _on_message(self, msg: Message) -> bool:
        """Role-specific handling; False means the message is unexpected here."""
        raise NotImplementedError

    def _protocol_error(self, msg: Message) -> None:
        self._fail(
            TerminalCause.disconnect_sent,
            f"unexpected {msg.name} (id {msg.id})",
            DisconnectReason.protocol_error,
        )

    def _on_disconnect(self, msg: Disconnect) -> None:
        if self.session.established and msg.reason_code == DisconnectReason.by_application:
            self._fail(TerminalCause.peer_closed, msg.description or "closed by peer")
        else:
            self._fail(
                TerminalCause.disconnect_received,
                f"reason {msg.reason_code}: {msg.description}".rstrip(": "),
            )

    # -- key exchange ------------------------------------------------------

    def _on_kexinit(self, msg: KexInit, payload: bytes) -> None:
        if self.session.peer_kexinit is not None:
            self._fail(TerminalCause.disconnect_sent, "re-keying is not supported", DisconnectReason.protocol_error)
            return
        self.session.peer_kexinit = msg
        self._peer_kexinit_payload = payload
        local = self.session.local_kexinit
        client_kexinit, server_kexinit = (local, msg) if self.role is Role.client else (msg, local)
        try:
            result = negotiate(client_kexinit, server_kexinit, self.role, self.config.indicator_names)
            for direction in Direction:
                result.mode(direction)
        except (NegotiationError, ValueError) as e:
            self._fail(TerminalCause.negotiation_failure, str(e), DisconnectReason.key_exchange_failed)
            return
        self.session.negotiated = result
        self._after_negotiation()

    def _after_negotiation(self) -> None:
        return None

    def _transcript_inputs(self, host_key: bytes, exchange_data: bytes, shared: int) -> TranscriptInputs:
        session = self.session
        if self.role is Role.client:
            client_banner, server_banner = session.local_banner, session.peer_banner
            client_kexinit, server_kexinit = self._local_kexinit_payload, self._peer_kexinit_payload
        else:
            client_banner, server_banner = session.peer_banner, session.local_banner
            client_kexinit, server_kexinit = self._peer_kexinit_payload, self._local_kexinit_payload
        return TranscriptInputs(
            client_banner=client_banner.text,
            server_banner=server_banner.text,
            client_kexinit=client_kexinit,
            server_kexinit=server_kexinit,
            host_key=host_key,
            exchange_data=exchange_data,
            shared_secret=shared,
        )

    def _install_keys(self, shared: int, exchange_hash_value: bytes) -> None:
        session = self.session
        if session.session_id is None:
            session.session_id = exchange_hash_value
        session.transcript.client_banner = self._banner_text(Role.client)
        session.transcript.server_banner = self._banner_text(Role.server)
        self._shared_secret = shared
        self._exchange_hash = exchange_hash_value
        out_dir = self.local_direction
        in_dir = out_dir.reverse
        neg = session.negotiated
        self._next_send_state = derive_directional_keys(
            shared, exchange_hash_value, session.session_id, neg.mode(out_dir), out_dir
        )
        self._next_recv_state = derive_directional_keys(
            shared, exchange_hash_value, session.session_id, neg.mode(in_dir), in_dir
        )

    def _banner_text(self, role: Role) -> bytes:
        banner = self.session.local_banner if role is self.role else self.session.peer_banner
        return banner.text if banner else b""

    def _send_newkeys(self) -> None:
        self._send_now(NewKeys())
        if self.closed:
            return
        session = self.session
        session.send_state = self._next_send_state
        session.send_state.activate()
        self._record(EventKind.keys_activated, detail=f"send {session.send_state.mode.value}")
        if session.negotiated.seq_reset_enabled:
            session.counters.reset_send()
            self._record(EventKind.counters_reset, detail="send")
        self._newkeys_sent = True
        if self._newkeys_received:
            self._enter_channel()

    def _on_newkeys(self) -> None:
        if self._next_recv_state is None or self._newkeys_received:
            self._protocol_error(NewKeys())
            return
        session = self.session
        session.recv_state = self._next_recv_state
        session.recv_state.activate()
        self._record(EventKind.keys_activated, detail=f"receive {session.recv_state.mode.value}")
        if session.negotiated.seq_reset_enabled:
            session.counters.reset_recv()
            self._record(EventKind.counters_reset, detail="receive")
        self._newkeys_received = True
        if self._newkeys_sent:
            self._enter_channel()

    def _enter_channel(self) -> None:
        session = self.session
        session.channel_entry = session.counters.snapshot()
        self._record(EventKind.channel_entered)
        if session.negotiated.transcript_mac_enabled:
            mac = transcript_mac(session.transcript, self._shared_secret, self._exchange_hash, session.session_id)
            self._send_now(TranscriptMac(mac))
            self._mac_sent = True
            pending, self._pending_channel = self._pending_channel, []
            for msg in pending:
                self._send_now(msg)
        if not self.closed:
            self._on_channel_ready()

    def _on_channel_ready(self) -> None:
        return None

    # -- transcript MAC ----------------------------------------------------

    def _transcript_mac_enabled(self) -> bool:
        neg = self.session.negotiated
        return neg is not None and neg.transcript_mac_enabled

    def _expecting_transcript_mac(self) -> bool:
        return self._transcript_mac_enabled() and not self._mac_verified

    def _on_transcript_mac(self, msg: TranscriptMac) -> None:
        if not self._transcript_mac_enabled() or self._mac_verified or not self.session.recv_state.active:
            self._protocol_error(msg)
            return
        session = self.session
        ok = verify_transcript_mac(
            session.transcript, self._shared_secret, self._exchange_hash, msg.mac, session.session_id
        )
        if not ok:
            self._fail(
                TerminalCause.transcript_mac_mismatch,
                "transcript MAC mismatch",
                DisconnectReason.protocol_error,
            )
            return
        self._mac_verified = True

    def _must_queue(self, msg: Message) -> bool:
        return (
            self._transcript_mac_enabled()
            and self.session.send_state.active
            and not self._mac_sent
            and not isinstance(msg, (Disconnect, TranscriptMac))
        )

    # -- extensions --------------------------------------------------------

    def _first_channel_message(self) -> bool:
        return self._post_received == (2 if self._transcript_mac_enabled() else 1)

    def _late_ext_info_allowed(self) -> bool:
        return False

    def _accept_ext_info(self, msg: ExtInfo) -> bool:
        if not self.config.signal_ext_info:
            return False
        if not self.session.recv_state.active:
            if not self.profile.accept_early_ext_info:
                return False
        elif not (self._first_channel_message() or self._late_ext_info_allowed()):
            return False
        self.session.received_extensions.update(msg.as_dict())
        self._record(EventKind.extensions, detail=",".join(name for name, _ in msg.extensions) or "(none)")
        return True

    # -- sending and teardown ----------------------------------------------

    def _send_now(self, msg: Message) -> None:
        session = self.session
        state = session.send_state
        packet = encode_packet(
            msg,
            block_size=state.block_size,
            length_encrypted=state.aligns_length_field,
            padding_source=self._padding_rng.bytes,
        )
        seqno = session.counters.snd
        wire = ciphers.seal(state, seqno, packet)
        if not state.active:
            session.transcript.record(self.local_direction, wire)
        wrapped = session.counters.advance_send()
        self._output.append(wire)
        self._record(EventKind.sent, msg.name, msg.id, seqno, state.active)
        if wrapped and self.profile.detect_seqno_rollover and not isinstance(msg, Disconnect):
            self._fail(TerminalCause.rollover_detected, "send sequence number wrapped", DisconnectReason.protocol_error)

    def _establish(self) -> None:
        session = self.session
        session.established = True
        self._record(EventKind.established, detail=session.authenticated_user or "")
        logger.info("%s established (user=%s)", self.role.value, session.authenticated_user)
        for item in self.config.workload:
            self.send(Ignore(item))
            session.app_sent.append(item)
        if self.config.disconnect_when_done:
            self._fail(TerminalCause.closed, "workload complete", DisconnectReason.by_application)

    def _fail(
        self,
        cause: TerminalCause,
        detail: str,
        reason: Optional[DisconnectReason] = None,
    ) -> Optional[Disconnect]:
        if self.closed:
            return None
        notice = None
        if reason is not None:
            notice = Disconnect(int(reason), detail)
            self._send_now(notice)
        self.session.terminal = cause
        self.session.terminal_detail = detail
        self._record(EventKind.terminal, cause.value, detail=detail)
        log = logger.info if cause.is_failure else logger.debug
        log("%s terminated: %s (%s)", self.role.value, cause.value, detail)
        return notice

    def _record(
        self,
        kind: EventKind,
        message: str = "",
        message_id: Optional[int] = None,
        seqno: Optional[int] = None,
        encrypted: bool = False,
        detail: str = "",
    ) -> None:
        counters = self.session.counters
        self.session.events.append(
            PeerEvent(kind, message, message_id, seqno, counters.snd, counters.rcv, encrypted, detail)
        )


class ClientPhase(str, Enum):
    kexinit = "kexinit"
    dh_reply = "dh_reply"
    newkeys = "newkeys"
    probing = "probing"
    service_accept = "service_accept"
    userauth = "userauth"
    established = "established"


class ClientPeer(Peer):
    role = Role.client

    def __init__(
        self,
        config: PeerConfig,
        seed: SeedLike = None,
        registry: Optional[MessageIdRegistry] = None,
    ) -> None:
        super().__init__(config, seed, registry)
        self.phase = ClientPhase.kexinit
        self._dh: Optional[DhExchange] = None

    @property
    def probe_done(self) -> bool:
        """Handshake finished and the server's first channel message, if any is due, arrived."""
        if self.closed:
            return True
        if not self.channel_entered:
            return False
        neg = self.session.negotiated
        return not neg.ext_info_to_client or self._post_received > (1 if neg.transcript_mac_enabled else 0)

    def _after_negotiation(self) -> None:
        self._dh = DhExchange(
            Role.client, GROUP14, self._kex_rng.bytes, exponent_bits=self.config.dh_exponent_bits
        )
        self.send(KexDhInit(self._dh.public))
        self.phase = ClientPhase.dh_reply

    def _on_message(self, msg: Message) -> bool:
        if isinstance(msg, KexDhReply) and self.phase is ClientPhase.dh_reply:
            self._on_kex_reply(msg)
            return True
        if isinstance(msg, ServiceAccept) and self.phase is ClientPhase.service_accept:
            self._on_service_accept()
            return True
        if isinstance(msg, UserAuthSuccess) and self.phase is ClientPhase.userauth:
            self.phase = ClientPhase.established
            self.session.authenticated_user = self.config.credentials.user
            self._establish()
            return True
        if isinstance(msg, UserAuthFailure) and self.phase is ClientPhase.userauth:
            self._fail(
                TerminalCause.userauth_failure,
                f"authentication rejected (methods: {','.join(msg.methods)})",
                DisconnectReason.no_more_auth_methods,
            )
            return True
        return False

    def _on_kex_reply(self, msg: KexDhReply) -> None:
        try:
            shared, exchange_data = self._dh.complete(msg.f)
        except HandshakeError as e:
            self._fail(TerminalCause.kex_failure, str(e), DisconnectReason.key_exchange_failed)
            return
        inputs = self._transcript_inputs(msg.host_key, exchange_data, shared)
        digest = exchange_hash(inputs)
        if self.session.negotiated.host_key_algorithm != HOST_KEY_ED25519 or not verify_host_signature(
            msg.host_key, digest, msg.signature
        ):
            self._fail(
                TerminalCause.host_key_rejected,
                "host signature over the exchange hash does not verify",
                DisconnectReason.host_key_not_verifiable,
            )
            return
        self._install_keys(shared, digest)
        self.phase = ClientPhase.newkeys
        self._send_newkeys()

    def _on_channel_ready(self) -> None:
        neg = self.session.negotiated
        if neg.ext_info_to_server and self.config.extensions:
            self.send(ExtInfo.from_mapping(self.config.extensions))
        if self.config.probe_only:
            self.phase = ClientPhase.probing
            return
        self.send(ServiceRequest(USERAUTH_SERVICE))
        self.phase = ClientPhase.service_accept

    def _on_service_accept(self) -> None:
        creds = self.config.credentials
        if creds is None:
            self._fail(TerminalCause.userauth_failure, "no credentials configured", DisconnectReason.by_application)
            return
        self.send(UserAuthRequest(
            user=creds.user,
            method=creds.method,
            credential=creds.password.encode("utf-8"),
            algorithm=HOST_KEY_ED25519 if creds.method == "publickey" else "",
        ))
        self.phase = ClientPhase.userauth

    def _late_ext_info_allowed(self) -> bool:
        # a server may send a second ExtInfo right before UserAuthSuccess
        return self.phase is ClientPhase.userauth


class ServerPhase(str, Enum):
    kexinit = "kexinit"
    dh_init = "dh_init"
    newkeys = "newkeys"
    service_request = "service_request"
    userauth = "userauth"
    established = "established"


class ServerPeer(Peer):
    role = Role.server

    def __init__(
        self,
        config: PeerConfig,
        seed: SeedLike = None,
        registry: Optional[MessageIdRegistry] = None,
    ) -> None:
        super().__init__(config, seed, registry)
        self.phase = ServerPhase.kexinit
        self.host_key = HostKey.from_seed(bytes.fromhex(config.host_key_seed))
        self._service_accepted = False
        self._ext_info_sent = False
        self.deferred_requests: List[UserAuthRequest] = []

    def _after_negotiation(self) -> None:
        self.phase = ServerPhase.dh_init

    def _on_message(self, msg: Message) -> bool:
        if isinstance(msg, KexDhInit) and self.phase is ServerPhase.dh_init:
            self._on_kex_init(msg)
            return True
        if isinstance(msg, ServiceRequest) and self.phase is ServerPhase.service_request:
            self._on_service_request(msg)
            return True
        if isinstance(msg, UserAuthRequest):
            return self._on_userauth_request(msg)
        return False

    def _on_kex_init(self, msg: KexDhInit) -> None:
        dh = DhExchange(Role.server, GROUP14, self._kex_rng.bytes, exponent_bits=self.config.dh_exponent_bits)
        try:
            shared, exchange_data = dh.complete(msg.e)
        except HandshakeError as e:
            self._fail(TerminalCause.kex_failure, str(e), DisconnectReason.key_exchange_failed)
            return
        host_blob = self.host_key.public_blob
        digest = exchange_hash(self._transcript_inputs(host_blob, exchange_data, shared))
        self._install_keys(shared, digest)
        self.send(KexDhReply(host_blob, dh.public, self.host_key.sign(digest)))
        self.phase = ServerPhase.newkeys
        self._send_newkeys()
        if not self.session.negotiated.transcript_mac_enabled:
            self._send_ext_info()

    def _send_ext_info(self) -> None:
        if self._ext_info_sent or self.closed:
            return
        if self.session.negotiated.ext_info_to_client and self.config.extensions:
            self.send(ExtInfo.from_mapping(self.config.extensions))
            self._ext_info_sent = True

    def _on_channel_ready(self) -> None:
        self._send_ext_info()
        self.phase = ServerPhase.service_request

    def _on_service_request(self, msg: ServiceRequest) -> None:
        if msg.service != USERAUTH_SERVICE:
            self._fail(
                TerminalCause.disconnect_sent,
                f"service {msg.service!r} not available",
                DisconnectReason.service_not_available,
            )
            return
        self.send(ServiceAccept(msg.service))
        self._service_accepted = True
        self.phase = ServerPhase.userauth
        deferred, self.deferred_requests = self.deferred_requests, []
        for request in deferred:
            if self.closed:
                break
            self._on_userauth_request(request)

    def _on_userauth_request(self, msg: UserAuthRequest) -> bool:
        if self.session.authenticated_user is not None:
            if self.profile.ignore_extra_userauth_after_success:
                self._record(EventKind.ignored, msg.name, msg.id, detail=f"user={msg.user}")
                return True
            return False
        if not self._service_accepted:
            if not self.profile.accept_early_userauth:
                return False
            self.deferred_requests.append(msg)
            self._record(EventKind.deferred, msg.name, msg.id, detail=f"user={msg.user}")
            return True
        reply = self.process_userauth(msg)
        neg = self.session.negotiated
        if isinstance(reply, UserAuthSuccess) and self.config.second_extensions is not None and neg.ext_info_to_client:
            self.send(ExtInfo.from_mapping(self.config.second_extensions))
        self.send(reply)
        if isinstance(reply, UserAuthSuccess):
            self.phase = ServerPhase.established
            self._establish()
        return True

    def process_userauth(self, request: UserAuthRequest) -> Message:
        """Check ``request`` against the account table; on success record the user."""
        expected = self.config.accounts.get(request.user)
        if (
            expected is not None
            and request.method in ("password", "publickey")
            and hmac.compare_digest(expected.encode("utf-8"), request.credential)
        ):
            self.session.authenticated_user = request.user
            return UserAuthSuccess()
        return UserAuthFailure(("password", "publickey"))


def create_peer(config: PeerConfig, seed: SeedLike = None, registry: Optional[MessageIdRegistry] = None) -> Peer:
    if config.role is Role.client:
        return ClientPeer(config, seed, registry)
    return ServerPeer(config, seed, registry)


# ---------------------------------------------------------------------------
# asyncio stream drivers
# ---------------------------------------------------------------------------

async def drive_stream(
    peer: Peer,
    reader: asyncio.StreamReader,
    writer: asyncio.StreamWriter,
    *,
    read_timeout: float = 10.0,
    until: Optional[Callable[[Peer], bool]] = None,
) -> PeerSession:
    """Pump ``peer`` over a stream pair until it terminates, EOF, a timeout or ``until``."""
    peer.start()
    try:
        while True:
            for frame in peer.drain_output():
                writer.write(frame)
            await writer.drain()
            if peer.closed or (until is not None and until(peer)):
                break
            try:
                data = await asyncio.wait_for(reader.read(65536), timeout=read_timeout)
            except asyncio.TimeoutError:
                peer.mark_timeout(f"no data for {read_timeout:.1f}s")
                break
            if not data:
                logger.debug("%s: connection closed by remote end", peer.role.value)
                break
            peer.receive_data(data)
    finally:
        writer.close()
        try:
            await writer.wait_closed()
        except (ConnectionError, OSError):
            pass
    return peer.session


async def run_client(
    config: PeerConfig,
    reader: asyncio.StreamReader,
    writer: asyncio.StreamWriter,
    *,
    seed: SeedLike = None,
    read_timeout: float = 10.0,
    until: Optional[Callable[[Peer], bool]] = None,
) -> PeerSession:
    return await drive_stream(ClientPeer(config, seed), reader, writer, read_timeout=read_timeout, until=until)


async def run_server(
    config: PeerConfig,
    reader: asyncio.StreamReader,
    writer: asyncio.StreamWriter,
    *,
    seed: SeedLike = None,
    read_timeout: float = 10.0,
) -> PeerSession:
    return await drive_stream(ServerPeer(config, seed), reader, writer, read_timeout=read_timeout)
