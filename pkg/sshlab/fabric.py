"""Deterministic in-process transport between two endpoints, with an optional meddler.

The meddler never holds keys. It sees framed wire packets, knows which side of NewKeys
each direction is on, reads plaintext KexInits to learn the negotiated modes, and acts on
packets through an :class:`AttackScript` of match/action rules.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from .ciphers import Direction, ModeId
from .codec import BANNER_PREFIX, KexInit, NewKeys, decode_message
from .errors import CodecError, NegotiationError
from .handshake import NegotiationResult, negotiate

logger = logging.getLogger(__name__)

DEFAULT_MAX_ROUNDS = 10_000


class Phase(str, Enum):
    pre = "pre"
    post = "post"


class Action(str, Enum):
    forward = "forward"
    delete = "delete"
    inject = "inject"
    hold = "hold"


class LengthOracle(str, Enum):
    """How the meddler learns the size of a packet it deletes after NewKeys."""

    exact = "exact"
    guess = "guess"


class Endpoint(Protocol):
    closed: bool

    def start(self) -> None: ...

    def receive_data(self, data: bytes) -> None: ...

    def drain_output(self) -> List[bytes]: ...


@dataclass(frozen=True)
class FrameInfo:
    direction: Direction
    phase: Phase
    index: int
    message_id: Optional[int]
    size: int


@dataclass(frozen=True)
class Match:
    """Selects frames by direction and phase, optionally by plaintext ID or per-phase index.

    ``index`` counts original frames (injections excluded) per direction and phase;
    ``from_index`` selects every frame at or after that index.
    """

    direction: Direction
    phase: Phase = Phase.pre
    message_id: Optional[int] = None
    index: Optional[int] = None
    from_index: Optional[int] = None

    def matches(self, frame: FrameInfo) -> bool:
        return (
            frame.direction is self.direction
            and frame.phase is self.phase
            and (self.message_id is None or frame.message_id == self.message_id)
            and (self.index is None or frame.index == self.index)
            and (self.from_index is None or frame.index >= self.from_index)
        )

    def describe(self) -> str:
        parts = [self.direction.arrow, self.phase.value]
        if self.message_id is not None:
            parts.append(f"id={self.message_id}")
        if self.index is not None:
            parts.append(f"#{self.index}")
        if self.from_index is not None:
            parts.append(f"#{self.from_index}+")
        return " ".join(parts)


@dataclass
class Rule:
    match: Match
    action: Action
    payload: bytes = b""
    count: int = 0
    target: Optional[Direction] = None
    before: bool = True
    release: Optional[Match] = None
    once: bool = True
    label: str = ""
    fired: int = 0

    @property
    def live(self) -> bool:
        return not (self.once and self.fired)


@dataclass
class AttackScript:
    name: str
    rules: List[Rule] = field(default_factory=list)

    def __add__(self, other: "AttackScript") -> "AttackScript":
        return AttackScript(f"{self.name}+{other.name}", [*self.rules, *other.rules])

    def fresh_rules(self) -> List[Rule]:
        return [replace(rule, fired=0) for rule in self.rules]

    def injected_count(self, target: Direction) -> int:
        return sum(
            rule.count for rule in self.rules
            if rule.action is Action.inject and (rule.target or rule.match.direction) is target
        )


@dataclass(frozen=True)
class MitmEvent:
    direction: Direction
    phase: Phase
    index: Optional[int]
    message_id: Optional[int]
    action: Action
    detail: str = ""
    count: int = 1

    def describe(self) -> str:
        where = f"{self.direction.arrow} {self.phase.value}"
        if self.index is not None:
            where += f" #{self.index}"
        what = f"{self.action.value}" + (f" x{self.count}" if self.count != 1 else "")
        ident = f" id={self.message_id}" if self.message_id is not None else ""
        return f"{where}{ident}: {what} {self.detail}".rstrip()


class Meddler:
    """Active attacker between the two pipes of a :class:`Fabric`."""

    def __init__(
        self,
        script: Optional[AttackScript] = None,
        *,
        oracle: LengthOracle = LengthOracle.exact,
        guess_lengths: Sequence[int] = (),
        rng: Optional[np.random.Generator] = None,
    ) -> None:
        if oracle is LengthOracle.guess and not guess_lengths:
            raise ValueError("guess oracle needs at least one candidate length")
        self.script = script or AttackScript("passive")
        self.rules = self.script.fresh_rules()
        self.oracle = oracle
        self.guess_lengths = list(guess_lengths)
        self.rng = rng or np.random.default_rng()
        self.log: List[MitmEvent] = []
        self.seen: List[FrameInfo] = []
        self.kexinits: Dict[Direction, KexInit] = {}
        self.negotiated: Optional[NegotiationResult] = None
        self._phase = {d: Phase.pre for d in Direction}
        self._banner_seen = {d: False for d in Direction}
        self._indices: Dict[Tuple[Direction, Phase], int] = {}
        self._held: List[Tuple[Match, Direction, bytes, FrameInfo]] = []
        self._pending_cut = {d: 0 for d in Direction}

    def phase(self, direction: Direction) -> Phase:
        return self._phase[direction]

    def process(self, direction: Direction, frame: bytes) -> List[Tuple[Direction, bytes]]:
        """Route one frame; returns the chunks to append to each pipe, in order."""
        if not self._banner_seen[direction] and frame.startswith(BANNER_PREFIX[:4]):
            self._banner_seen[direction] = True
            return [(direction, frame)]

        info = self._classify(direction, frame)
        self.seen.append(info)
        if info.phase is Phase.pre and info.message_id == KexInit.message_id:
            self._observe_kexinit(direction, frame)

        out: List[Tuple[Direction, bytes]] = []
        after: List[Tuple[Direction, bytes]] = []
        deleted = False
        hold: Optional[Rule] = None
        for rule in self.rules:
            if not rule.live or not rule.match.matches(info):
                continue
            rule.fired += 1
            if rule.action is Action.inject:
                target = rule.target or direction
                (out if rule.before else after).append((target, rule.payload))
                self._log(info, Action.inject, f"{rule.label} -> {target.arrow}", rule.count, target)
            elif rule.action is Action.delete:
                deleted = True
            elif rule.action is Action.hold and rule.release is not None:
                hold = rule

        if deleted:
            out.extend(self._delete(info, frame))
        elif hold is not None and not self._seen_match(hold.release):
            self._held.append((hold.release, direction, frame, info))
            self._log(info, Action.hold, f"until {hold.release.describe()}")
        else:
            chunk = self._apply_pending_cut(direction, frame)
            if chunk:
                out.append((direction, chunk))
        out.extend(after)
        out.extend(self._release_ready())

        if info.phase is Phase.pre and info.message_id == NewKeys.message_id:
            self._phase[direction] = Phase.post
        return out

    def _classify(self, direction: Direction, frame: bytes) -> FrameInfo:
        phase = self._phase[direction]
        key = (direction, phase)
        index = self._indices.get(key, 0)
        self._indices[key] = index + 1
        message_id = frame[5] if phase is Phase.pre and len(frame) > 5 else None
        return FrameInfo(direction, phase, index, message_id, len(frame))

    def _observe_kexinit(self, direction: Direction, frame: bytes) -> None:
        padding_length = frame[4]
        try:
            msg = decode_message(frame[5:len(frame) - padding_length])
        except CodecError:
            return
        if not isinstance(msg, KexInit):
            return
        self.kexinits[direction] = msg
        if len(self.kexinits) == 2:
            try:
                self.negotiated = negotiate(
                    self.kexinits[Direction.client_to_server], self.kexinits[Direction.server_to_client]
                )
            except NegotiationError:
                self.negotiated = None

    def _mode(self, direction: Direction) -> Optional[ModeId]:
        if self.negotiated is None:
            return None
        try:
            return self.negotiated.mode(direction)
        except ValueError:
            return None

    def _delete(self, info: FrameInfo, frame: bytes) -> List[Tuple[Direction, bytes]]:
        mode = self._mode(info.direction)
        exact = (
            self.oracle is LengthOracle.exact
            or info.phase is Phase.pre
            or (mode is not None and mode.length_visible)
        )
        if exact:
            self._log(info, Action.delete, f"{info.size} bytes")
            return []
        guess = int(self.rng.choice(self.guess_lengths))
        self._log(info, Action.delete, f"guessed {guess} bytes (actual {info.size})")
        if guess >= len(frame):
            self._pending_cut[info.direction] += guess - len(frame)
            return []
        return [(info.direction, frame[guess:])]

    def _apply_pending_cut(self, direction: Direction, frame: bytes) -> bytes:
        cut = min(self._pending_cut[direction], len(frame))
        if cut:
            self._pending_cut[direction] -= cut
        return frame[cut:]

    def _seen_match(self, match: Match) -> bool:
        return any(match.matches(info) for info in self.seen)

    def _release_ready(self) -> List[Tuple[Direction, bytes]]:
        released: List[Tuple[Direction, bytes]] = []
        remaining = []
        for release, direction, frame, info in self._held:
            if self._seen_match(release):
                released.append((direction, frame))
                self._log(info, Action.forward, "released")
            else:
                remaining.append((release, direction, frame, info))
        self._held = remaining
        return released

    def _log(
        self,
        info: FrameInfo,
        action: Action,
        detail: str = "",
        count: int = 1,
        target: Optional[Direction] = None,
    ) -> None:
        event = MitmEvent(target or info.direction, info.phase, info.index, info.message_id, action, detail, count)
        self.log.append(event)
        logger.debug("mitm %s", event.describe())


@dataclass
class FabricRun:
    client: Endpoint
    server: Endpoint
    mitm_log: List[MitmEvent]
    rounds: int
    delivered: Dict[Direction, int]

    @property
    def client_session(self):
        return getattr(self.client, "session", None)

    @property
    def server_session(self):
        return getattr(self.server, "session", None)


class Fabric:
    """Round-based delivery: each round drains the client then the server through the
    meddler, then delivers to the server then the client, until nothing moves."""

    def __init__(
        self,
        client: Endpoint,
        server: Endpoint,
        meddler: Optional[Meddler] = None,
        max_rounds: int = DEFAULT_MAX_ROUNDS,
    ) -> None:
        self.client = client
        self.server = server
        self.meddler = meddler
        self.max_rounds = max_rounds

    def run(self) -> FabricRun:
        pipes: Dict[Direction, List[bytes]] = {d: [] for d in Direction}
        delivered = {d: 0 for d in Direction}
        self.client.start()
        self.server.start()
        rounds = 0
        while rounds < self.max_rounds:
            rounds += 1
            moved = False
            for direction, sender in (
                (Direction.client_to_server, self.client),
                (Direction.server_to_client, self.server),
            ):
                for frame in sender.drain_output():
                    moved = True
                    if self.meddler is None:
                        pipes[direction].append(frame)
                        continue
                    for target, chunk in self.meddler.process(direction, frame):
                        pipes[target].append(chunk)
            for direction, receiver in (
                (Direction.client_to_server, self.server),
                (Direction.server_to_client, self.client),
            ):
                if not pipes[direction]:
                    continue
                data = b"".join(pipes[direction])
                pipes[direction].clear()
                moved = True
                if not receiver.closed:
                    delivered[direction] += len(data)
                    receiver.receive_data(data)
            if not moved or (self.client.closed and self.server.closed):
                break
        else:
            logger.warning("fabric stopped after %d rounds with traffic still moving", self.max_rounds)
        return FabricRun(
            client=self.client,
            server=self.server,
            mitm_log=list(self.meddler.log) if self.meddler else [],
            rounds=rounds,
            delivered=delivered,
        )
