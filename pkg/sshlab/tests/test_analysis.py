from __future__ import annotations

from fractions import Fraction

import pytest

from sshlab.analysis import (
    brute_force_verdict_count,
    cbc_downgrade_length,
    expected_success_rate,
    run_monte_carlo,
    scenario1_accepting_pairs,
    scenario1_prob,
    scenario2_prob,
    summarize_trials,
    valid_padding_count,
)
from sshlab.ciphers import ModeId
from sshlab.models import Countermeasure, CountermeasurePeers, ScenarioName, ScenarioSpec
from sshlab.registry import MessageIdRegistry, load_registry

SPAN = 256 * 256
UNKNOWN = 213


class TestExactEstimates:
    def test_registry_leaves_213_unknown_ids(self) -> None:
        assert load_registry().unknown_count == UNKNOWN

    @pytest.mark.parametrize(
        ("ell", "expected"),
        [(8, 3), (16, 11), (32, 27), (256, 251), (257, 252), (4096, 252)],
    )
    def test_valid_padding_count(self, ell: int, expected: int) -> None:
        assert valid_padding_count(ell) == expected

    def test_rejects_short_packets(self) -> None:
        with pytest.raises(ValueError, match="at least 8"):
            valid_padding_count(7)

    @pytest.mark.parametrize("ell", [16, 32, 64, 264])
    def test_brute_force_matches_formula(self, ell: int) -> None:
        """Decoding all 65536 first-block prefixes agrees with the closed form."""
        counts = brute_force_verdict_count(ell)
        assert sum(counts.values()) == SPAN
        assert Fraction(counts["evasive"], SPAN) == scenario2_prob(ell).combined

    def test_brute_force_reference_counts(self) -> None:
        assert brute_force_verdict_count(16)["evasive"] == 2343
        assert brute_force_verdict_count(264)["evasive"] == 53676

    def test_combined_is_non_decreasing_and_bounded(self) -> None:
        estimates = [scenario2_prob(ell) for ell in range(16, 300, 4)]
        combined = [e.combined for e in estimates]
        assert combined == sorted(combined)
        for estimate in estimates:
            assert estimate.lower_bound <= estimate.combined <= estimate.upper_bound

    def test_bounds(self) -> None:
        estimate = scenario2_prob(16)
        assert estimate.lower_bound == Fraction(11, SPAN)
        assert estimate.upper_bound == Fraction(252 * UNKNOWN, SPAN)
        assert estimate.as_dict()["combined"]["exact"] == str(Fraction(11 * UNKNOWN, SPAN))

    def test_custom_registry_changes_the_rate(self) -> None:
        """With every ID registered nothing is evasive."""
        full = MessageIdRegistry.from_ids(range(256))
        assert scenario2_prob(16, full).combined == 0
        assert brute_force_verdict_count(16, full)["evasive"] == 0

    def test_service_accept_acceptance(self) -> None:
        assert scenario1_accepting_pairs(lenient=True) == [(0x1E, 0x06)]
        assert scenario1_accepting_pairs(lenient=False) == []
        assert scenario1_prob(True) == Fraction(len(scenario1_accepting_pairs()), SPAN)
        assert scenario1_prob(False) == 0

    def test_downgrade_reply_lengths(self) -> None:
        assert cbc_downgrade_length(use_ping=False) == 16
        assert valid_padding_count(cbc_downgrade_length(use_ping=True)) == 252


class TestExpectedSuccessRate:
    @pytest.mark.parametrize(
        ("params", "expected"),
        [
            (dict(name=ScenarioName.baseline), Fraction(1)),
            (dict(name=ScenarioName.ext_downgrade_chacha), Fraction(1)),
            (dict(name=ScenarioName.prefix_truncate, mode=ModeId.gcm), Fraction(0)),
            (dict(name=ScenarioName.prefix_truncate, mode=ModeId.cbc_eam), Fraction(0)),
            (dict(name=ScenarioName.prefix_truncate, mode=ModeId.chacha20_poly1305, n_s=3, n_c=2), Fraction(1)),
            (dict(name=ScenarioName.prefix_truncate, mode=ModeId.cbc_etm, profile="lenient"), Fraction(1, SPAN)),
            (dict(name=ScenarioName.ext_downgrade_cbc_etm), Fraction(11 * UNKNOWN, SPAN)),
            (dict(name=ScenarioName.ext_downgrade_cbc_etm, use_ping=True), Fraction(252 * UNKNOWN, SPAN)),
            (dict(name=ScenarioName.ext_downgrade_cbc_etm, profile="dropbear"), Fraction(0)),
            (dict(name=ScenarioName.rogue_extension), Fraction(1)),
            (dict(name=ScenarioName.rogue_extension, profile="strict"), Fraction(0)),
            (dict(name=ScenarioName.rogue_session, strategy=2, profile="asyncssh"), Fraction(1)),
            (dict(name=ScenarioName.technique_rcv_dec, profile="strict"), Fraction(0)),
            (dict(name=ScenarioName.technique_rcv_inc, profile="strict"), Fraction(1)),
            (dict(name=ScenarioName.technique_snd_inc, profile="dropbear"), Fraction(0)),
            (dict(name=ScenarioName.ext_downgrade_chacha, countermeasure=Countermeasure.seq_reset), Fraction(0)),
            (
                dict(
                    name=ScenarioName.ext_downgrade_chacha,
                    countermeasure=Countermeasure.both,
                    countermeasure_peers=CountermeasurePeers.client,
                ),
                Fraction(1),
            ),
        ],
    )
    def test_rates(self, params: dict, expected: Fraction) -> None:
        assert expected_success_rate(ScenarioSpec(**params)) == expected

    def test_unmodelled_cases_are_none(self) -> None:
        assert expected_success_rate(ScenarioSpec(name=ScenarioName.prefix_truncate, mode=ModeId.ctr_etm)) is None
        assert expected_success_rate(ScenarioSpec(name=ScenarioName.rogue_extension, mode=ModeId.gcm)) is None


class TestMonteCarlo:
    def test_deterministic_scenario_reports_pass(self) -> None:
        spec = ScenarioSpec(name=ScenarioName.ext_downgrade_chacha)
        report = run_monte_carlo(spec, trials=20, seed=1)
        assert report.successes == 20
        assert report.passed
        assert report.expected_exact == "1"
        assert report.outcomes == {"downgraded": 20}

    def test_same_seed_same_report(self) -> None:
        spec = ScenarioSpec(name=ScenarioName.technique_rcv_inc, n=2)
        first = run_monte_carlo(spec, trials=4, seed=42)
        second = run_monte_carlo(spec, trials=4, seed=42)
        assert first.model_dump() == second.model_dump()

    def test_gcm_truncation_never_succeeds(self) -> None:
        spec = ScenarioSpec(name=ScenarioName.prefix_truncate, mode=ModeId.gcm, profile="lenient")
        report = run_monte_carlo(spec, trials=50, seed=3)
        assert report.successes == 0
        assert report.passed

    def test_rejects_zero_trials(self) -> None:
        with pytest.raises(ValueError, match="positive"):
            run_monte_carlo(ScenarioSpec(name=ScenarioName.baseline), trials=0)

    def test_rejects_unmodelled_scenario(self) -> None:
        spec = ScenarioSpec(name=ScenarioName.prefix_truncate, mode=ModeId.ctr_etm)
        with pytest.raises(ValueError, match="no analytic success rate"):
            run_monte_carlo(spec, trials=10)

    def test_probabilistic_rate_needs_enough_trials(self) -> None:
        spec = ScenarioSpec(name=ScenarioName.ext_downgrade_cbc_etm)
        with pytest.raises(ValueError, match="at least 1000 trials"):
            run_monte_carlo(spec, trials=999)

    @pytest.mark.slow
    def test_gcm_thousand_trials(self) -> None:
        spec = ScenarioSpec(name=ScenarioName.prefix_truncate, mode=ModeId.gcm, profile="lenient")
        assert run_monte_carlo(spec, trials=1000, seed=0).successes == 0

    @pytest.mark.slow
    @pytest.mark.parametrize("use_ping", [False, True])
    def test_cbc_etm_downgrade_rate_within_three_sigma(self, use_ping: bool) -> None:
        """Twenty thousand seeded trials land inside the three-sigma interval around the exact rate."""
        spec = ScenarioSpec(name=ScenarioName.ext_downgrade_cbc_etm, use_ping=use_ping)
        report = run_monte_carlo(spec, trials=20_000, seed=0, workers=4)
        assert report.passed, report
        assert report.interval_low <= report.empirical_rate <= report.interval_high


class TestSummarizeTrials:
    SPEC = ScenarioSpec(name=ScenarioName.ext_downgrade_cbc_etm)

    def test_interval_and_p_value(self) -> None:
        report = summarize_trials(self.SPEC, 0, 1000, 36, Fraction(11 * UNKNOWN, SPAN), {"downgraded": 36})
        assert report.interval_low < report.expected_rate < report.interval_high
        assert report.passed
        assert 0.0 < report.p_value <= 1.0
        assert "seed" not in report.parameters

    def test_out_of_interval_fails(self) -> None:
        report = summarize_trials(self.SPEC, 0, 1000, 400, Fraction(11 * UNKNOWN, SPAN), {})
        assert not report.passed
        assert report.p_value < 1e-6

    @pytest.mark.parametrize(("successes", "passed"), [(10, True), (9, False)])
    def test_certain_rate_needs_every_trial(self, successes: int, passed: bool) -> None:
        report = summarize_trials(self.SPEC, 0, 10, successes, Fraction(1), {})
        assert report.sigma == 0.0
        assert report.passed is passed
