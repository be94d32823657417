from __future__ import annotations

from typing import Dict

import pytest

from sshlab.attacks import (
    OUTCOME_CLEAN,
    OUTCOME_CORRUPTED,
    OUTCOME_FAILURE,
    extension_downgrade,
    prefix_truncate,
    rcv_decrease,
    run_mode_matrix,
    run_scenario,
    snd_increase,
    unknown_message_id,
)
from sshlab.ciphers import ModeId
from sshlab.models import (
    Countermeasure,
    CountermeasurePeers,
    Role,
    ScenarioName,
    ScenarioSpec,
)
from sshlab.peer import EventKind, TerminalCause
from sshlab.registry import MessageIdRegistry

EXPECTED_MATRIX: Dict[ModeId, str] = {
    ModeId.chacha20_poly1305: OUTCOME_CLEAN,
    ModeId.gcm: OUTCOME_FAILURE,
    ModeId.cbc_eam: OUTCOME_FAILURE,
    ModeId.ctr_eam: OUTCOME_FAILURE,
    ModeId.ctr_etm: OUTCOME_CORRUPTED,
    ModeId.cbc_etm: OUTCOME_CORRUPTED,
}


def _spec(name: ScenarioName, **params) -> ScenarioSpec:
    return ScenarioSpec(name=name, **params)


# ---------------------------------------------------------------------------
# script builders
# ---------------------------------------------------------------------------

class TestScriptBuilders:
    def test_rcv_decrease_wraps_with_ignores(self) -> None:
        """Lowering by three in a 16-bit space takes 65533 Ignores."""
        script = rcv_decrease(Role.client, 3, modulus_bits=16)
        assert script.rules[0].count == 65533

    def test_snd_increase_mixes_unknown_and_ignore(self) -> None:
        script = snd_increase(Role.client, 2, modulus_bits=16)
        assert script.rules[0].count == 65536
        assert "2 x Unknown + 65534 x Ignore" in script.rules[0].label

    @pytest.mark.parametrize("builder", [rcv_decrease, snd_increase])
    def test_rejects_out_of_range(self, builder) -> None:
        with pytest.raises(ValueError, match="n must be in"):
            builder(Role.server, 1 << 16, modulus_bits=16)

    def test_zero_is_a_no_op(self) -> None:
        assert prefix_truncate(0, 0).rules == []

    def test_extension_downgrade_rejects_other_modes(self) -> None:
        with pytest.raises(ValueError, match="not defined for GCM"):
            extension_downgrade(ModeId.gcm)

    def test_unknown_id_avoids_registered_ids(self) -> None:
        registry = MessageIdRegistry.from_ids(range(0, 255))
        assert unknown_message_id(registry) == 255
        assert unknown_message_id() == 200

    def test_unknown_id_needs_a_gap(self) -> None:
        with pytest.raises(ValueError, match="knows every message id"):
            unknown_message_id(MessageIdRegistry.from_ids(range(256)))


# ---------------------------------------------------------------------------
# prefix truncation across modes
# ---------------------------------------------------------------------------

@pytest.mark.parametrize(("mode", "expected"), list(EXPECTED_MATRIX.items()))
def test_single_message_prefix_truncation(mode: ModeId, expected: str) -> None:
    """Deleting the first server channel packet is clean only under ChaCha20-Poly1305."""
    [row] = run_mode_matrix(trials=5, seed=11, modes=[mode])
    assert row.outcomes == {expected: 5}


@pytest.mark.slow
def test_mode_matrix_full_run() -> None:
    """One hundred seeded trials per mode reproduce the clean / corrupted / failed split."""
    rows = run_mode_matrix(trials=100, seed=0)
    assert {row.mode: row.outcomes for row in rows} == {
        mode: {outcome: 100} for mode, outcome in EXPECTED_MATRIX.items()
    }
    cbc = next(row for row in rows if row.mode is ModeId.cbc_etm)
    assert sum(cbc.verdicts.values()) >= 1


def test_cbc_etm_truncation_reports_corruption_verdicts() -> None:
    """The packet after a CBC-EtM deletion passes its MAC and decodes as corrupt plaintext."""
    result = run_scenario(_spec(ScenarioName.prefix_truncate, mode=ModeId.cbc_etm, profile="lenient"), seed=3)
    assert result.outcome == OUTCOME_CORRUPTED
    assert result.client.terminal is not TerminalCause.auth_failure


def test_chacha_prefix_truncation_both_directions() -> None:
    result = run_scenario(_spec(ScenarioName.prefix_truncate, n_s=1, n_c=1), seed=4)
    assert result.success, result.reason
    assert result.server.received_extensions == {}


# ---------------------------------------------------------------------------
# extension downgrade
# ---------------------------------------------------------------------------

class TestChachaExtensionDowngrade:
    def test_strips_server_extensions(self) -> None:
        """The client ends up without server-sig-algs or the keystroke countermeasure and sees no error."""
        result = run_scenario(_spec(ScenarioName.ext_downgrade_chacha), seed=1)
        client = result.client
        assert result.success, result.reason
        assert client.received_extensions == {}
        assert not client.keystroke_countermeasure_active
        assert not client.failed and not result.server.failed
        assert client.count(EventKind.corrupt) == 0 and client.count(EventKind.evasive) == 0
        assert client.established

    def test_baseline_keeps_extensions(self) -> None:
        result = run_scenario(_spec(ScenarioName.baseline), seed=1)
        assert result.success
        assert "server-sig-algs" in result.client.received_extensions
        assert result.client.keystroke_countermeasure_active

    def test_server_side_variant(self) -> None:
        """Stripping the client's ExtInfo leaves the server without client extensions."""
        result = run_scenario(_spec(ScenarioName.ext_downgrade_chacha, target=Role.server), seed=1)
        assert result.success, result.reason
        assert result.server.received_extensions == {}

    def test_deterministic_over_seeds(self) -> None:
        spec = _spec(ScenarioName.ext_downgrade_chacha)
        assert all(run_scenario(spec, seed=(7, i)).success for i in range(10))


def test_cbc_etm_downgrade_fails_against_dropbear() -> None:
    """A peer that disconnects on an unknown message is immune to the CBC-EtM variant."""
    result = run_scenario(_spec(ScenarioName.ext_downgrade_cbc_etm, profile="dropbear"), seed=2)
    assert not result.success


# ---------------------------------------------------------------------------
# sequence number techniques
# ---------------------------------------------------------------------------

TECHNIQUES = [
    ScenarioName.technique_rcv_inc,
    ScenarioName.technique_rcv_dec,
    ScenarioName.technique_snd_inc,
    ScenarioName.technique_snd_dec,
]


@pytest.mark.parametrize("name", TECHNIQUES)
@pytest.mark.parametrize("n", [1, 3])
def test_technique_shifts_exactly_one_counter(name: ScenarioName, n: int) -> None:
    """Each technique moves only the named counter, by n modulo 2^16."""
    result = run_scenario(_spec(name, n=n, target=Role.client), seed=5)
    assert result.success, result.reason
    deltas = result.details["deltas"]
    counter = "rcv" if name in (ScenarioName.technique_rcv_inc, ScenarioName.technique_rcv_dec) else "snd"
    sign = 1 if name in (ScenarioName.technique_rcv_inc, ScenarioName.technique_snd_inc) else -1
    assert deltas[f"client.{counter}"] == (sign * n) % (1 << 16)
    assert sum(1 for value in deltas.values() if value) == 1


def test_rcv_increase_targets_the_server() -> None:
    result = run_scenario(_spec(ScenarioName.technique_rcv_inc, n=5, target=Role.server), seed=5)
    assert result.success
    assert result.details["deltas"]["server.rcv"] == 5
    assert result.details["deltas"]["server.snd"] == 0


def test_zero_shift_is_a_no_op() -> None:
    result = run_scenario(_spec(ScenarioName.technique_rcv_dec, n=0), seed=5)
    assert result.success
    assert all(value == 0 for value in result.details["deltas"].values())


def test_rollover_detection_aborts_rcv_decrease() -> None:
    result = run_scenario(_spec(ScenarioName.technique_rcv_dec, n=1, profile="strict"), seed=5)
    assert not result.success
    assert result.outcome == "detected"
    assert result.client.terminal is TerminalCause.rollover_detected


@pytest.mark.parametrize("name", [ScenarioName.technique_snd_inc, ScenarioName.technique_snd_dec])
def test_dropbear_defeats_send_techniques(name: ScenarioName) -> None:
    result = run_scenario(_spec(name, n=1, profile="dropbear"), seed=5)
    assert not result.success
    assert result.client.terminal is TerminalCause.disconnect_sent


def test_dropbear_still_falls_to_rcv_decrease() -> None:
    result = run_scenario(_spec(ScenarioName.technique_rcv_dec, n=1, profile="dropbear"), seed=5)
    assert result.success, result.reason


# ---------------------------------------------------------------------------
# rogue extension and rogue session
# ---------------------------------------------------------------------------

class TestRogueAttacks:
    def test_rogue_extension_replaces_extensions(self) -> None:
        result = run_scenario(_spec(ScenarioName.rogue_extension), seed=6)
        assert result.success, result.reason
        assert result.client.received_extensions == {"server-sig-algs": b"ssh-rsa"}

    def test_rogue_extension_fails_strictly(self) -> None:
        result = run_scenario(_spec(ScenarioName.rogue_extension, profile="strict"), seed=6)
        assert not result.success

    @pytest.mark.parametrize("strategy", [1, 2])
    def test_rogue_session_logs_client_in_as_attacker(self, strategy: int) -> None:
        result = run_scenario(_spec(ScenarioName.rogue_session, strategy=strategy), seed=6)
        assert result.success, result.reason
        assert result.server.authenticated_user == "mallory"
        assert result.client.established
        assert not result.client.failed

    def test_rogue_session_client_log_matches_a_clean_login(self) -> None:
        """Under the first strategy the client receives exactly what an unattacked client receives."""
        attacked = run_scenario(_spec(ScenarioName.rogue_session, strategy=1), seed=6)
        clean = run_scenario(_spec(ScenarioName.baseline, profile="asyncssh"), seed=6)
        assert attacked.client.messages(EventKind.received) == clean.client.messages(EventKind.received)

    @pytest.mark.parametrize("strategy", [1, 2])
    def test_rogue_session_fails_strictly(self, strategy: int) -> None:
        result = run_scenario(_spec(ScenarioName.rogue_session, strategy=strategy, profile="strict"), seed=6)
        assert not result.success
        assert result.server.authenticated_user != "mallory"


def test_suffix_truncation_goes_unnoticed() -> None:
    result = run_scenario(_spec(ScenarioName.suffix_truncate, suffix_after=3), seed=8)
    assert result.success, result.reason
    assert len(result.server.app_received) == 3
    assert len(result.client.app_sent) == 4
    assert not result.server.failed


# ---------------------------------------------------------------------------
# countermeasures
# ---------------------------------------------------------------------------

COUNTERED = [
    dict(name=ScenarioName.ext_downgrade_chacha),
    dict(name=ScenarioName.prefix_truncate),
    dict(name=ScenarioName.ext_downgrade_cbc_etm),
    dict(name=ScenarioName.ext_downgrade_cbc_etm, use_ping=True),
    dict(name=ScenarioName.technique_rcv_inc, n=1),
    dict(name=ScenarioName.technique_rcv_dec, n=3),
    dict(name=ScenarioName.technique_snd_inc, n=1),
    dict(name=ScenarioName.technique_snd_dec, n=1),
    dict(name=ScenarioName.rogue_extension),
    dict(name=ScenarioName.rogue_session, strategy=1),
    dict(name=ScenarioName.rogue_session, strategy=2),
]


def _countered_id(params: dict) -> str:
    variant = params.get("strategy", params.get("n", "ping" if params.get("use_ping") else ""))
    return f"{params['name'].value}-{variant}"


@pytest.mark.parametrize("countermeasure", [Countermeasure.seq_reset, Countermeasure.transcript_mac])
@pytest.mark.parametrize("params", COUNTERED, ids=_countered_id)
def test_countermeasure_on_both_peers_stops_attack(countermeasure: Countermeasure, params: dict) -> None:
    result = run_scenario(ScenarioSpec(countermeasure=countermeasure, **params), seed=9)
    assert not result.success, result.reason


@pytest.mark.slow
@pytest.mark.parametrize("countermeasure", [Countermeasure.seq_reset, Countermeasure.transcript_mac])
@pytest.mark.parametrize("params", COUNTERED, ids=_countered_id)
def test_countermeasure_holds_across_seeds(countermeasure: Countermeasure, params: dict) -> None:
    spec = ScenarioSpec(countermeasure=countermeasure, **params)
    for seed in range(1, 6):
        result = run_scenario(spec, seed=seed)
        assert not result.success, f"seed {seed}: {result.reason}"


@pytest.mark.parametrize("countermeasure", list(Countermeasure))
def test_baseline_survives_countermeasures(countermeasure: Countermeasure) -> None:
    result = run_scenario(_spec(ScenarioName.baseline, countermeasure=countermeasure), seed=9)
    assert result.success, result.reason
    assert result.client.established and result.server.established


@pytest.mark.parametrize("peers", [CountermeasurePeers.client, CountermeasurePeers.server])
@pytest.mark.parametrize("countermeasure", [Countermeasure.seq_reset, Countermeasure.transcript_mac])
def test_one_sided_countermeasure_is_inactive(countermeasure: Countermeasure, peers: CountermeasurePeers) -> None:
    spec = _spec(ScenarioName.ext_downgrade_chacha, countermeasure=countermeasure, countermeasure_peers=peers)
    result = run_scenario(spec, seed=9)
    assert result.success, result.reason
