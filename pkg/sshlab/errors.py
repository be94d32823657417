"""Exception hierarchy shared by the codec, cipher, handshake and scanner layers."""
from __future__ import annotations


class LabError(Exception):
    """Base class for every error raised by sshlab."""


class CodecError(LabError, ValueError):
    """Malformed or out-of-range wire data."""


class ChannelError(LabError):
    """A sealed packet could not be opened."""


class AuthFailure(ChannelError):
    """MAC or AEAD tag mismatch."""


class PacketLengthError(ChannelError):
    """Declared packet length is implausible or disagrees with the wire."""

    def __init__(self, message: str, declared: int | None = None) -> None:
        super().__init__(message)
        self.declared = declared


class NegotiationError(LabError):
    """No algorithm in common for one of the KexInit lists."""

    def __init__(self, category: str, client: list[str], server: list[str]) -> None:
        super().__init__(
            f"no common {category} algorithm (client={','.join(client) or '-'}, "
            f"server={','.join(server) or '-'})"
        )
        self.category = category


class HandshakeError(LabError):
    """Key exchange failed: bad DH value or rejected host signature."""


class ScanRefused(LabError):
    """A live scan was requested without the safety acknowledgement, or hit the blocklist."""
