"""Success probabilities for the truncation attacks and the Monte-Carlo harness that checks them.

Analytic values are exact :class:`~fractions.Fraction` objects; floats appear only in reports.
"""
from __future__ import annotations

import logging
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Iterator, List, Optional, Tuple

from scipy.stats import binomtest
from tqdm import tqdm

from .attacks import PING_REFLECTION_BYTES, run_scenario
from .ciphers import AES_BLOCK, ModeId
from .codec import (
    MIN_PADDING,
    CriticallyCorrupt,
    EvasivelyCorrupt,
    Pong,
    ServiceAccept,
    Unimplemented,
    decode_packet,
    encode_packet,
)
from .models import (
    Countermeasure,
    CountermeasurePeers,
    ScenarioName,
    ScenarioSpec,
    TrialReport,
)
from .registry import MessageIdRegistry, load_registry

logger = logging.getLogger(__name__)

BYTE_VALUES = 256
MAX_PADDING = 255
MIN_WELL_FORMED_LENGTH = 8
LOWER_BOUND_LENGTH = 16
MIN_PROBABILISTIC_TRIALS = 1000
SIGMA_WIDTH = 3
SCENARIO1_LENGTH = 32
SCENARIO1_FILLER = 0xFF


# ---------------------------------------------------------------------------
# exact estimates
# ---------------------------------------------------------------------------

def valid_padding_count(ell: int) -> int:
    """Padding-length byte values p with 4 <= p <= ell - 2."""
    if ell < MIN_WELL_FORMED_LENGTH:
        raise ValueError(f"ciphertext length must be at least {MIN_WELL_FORMED_LENGTH}, got {ell}")
    return min(MAX_PADDING - MIN_PADDING + 1, ell - 5)


def well_formed_prob(ell: int) -> Fraction:
    """Chance that a uniformly random padding-length byte is valid for an ``ell``-byte packet."""
    return Fraction(valid_padding_count(ell), BYTE_VALUES)


def unrecognized_prob(registry: Optional[MessageIdRegistry] = None) -> Fraction:
    registry = registry or load_registry()
    return Fraction(registry.unknown_count, BYTE_VALUES)


@dataclass(frozen=True)
class ProbabilityEstimate:
    ell: int
    well_formed: Fraction
    unrecognized: Fraction
    combined: Fraction
    lower_bound: Fraction
    upper_bound: Fraction

    def as_dict(self) -> Dict[str, object]:
        out: Dict[str, object] = {"ell": self.ell}
        for name in ("well_formed", "unrecognized", "combined", "lower_bound", "upper_bound"):
            value: Fraction = getattr(self, name)
            out[name] = {"exact": str(value), "value": float(value)}
        return out


def scenario2_prob(ell: int, registry: Optional[MessageIdRegistry] = None) -> ProbabilityEstimate:
    """Chance that a corrupted first block of an ``ell``-byte packet is evasively corrupt.

    The lower bound assumes the smallest AES-sized packet and a single unknown ID; the upper
    bound assumes a packet long enough for every padding value.
    """
    registry = registry or load_registry()
    unknown = registry.unknown_count
    well_formed = well_formed_prob(ell)
    unrecognized = Fraction(unknown, BYTE_VALUES)
    span = BYTE_VALUES * BYTE_VALUES
    return ProbabilityEstimate(
        ell=ell,
        well_formed=well_formed,
        unrecognized=unrecognized,
        combined=well_formed * unrecognized,
        lower_bound=Fraction(valid_padding_count(min(ell, LOWER_BOUND_LENGTH)) * min(1, unknown), span),
        upper_bound=Fraction((MAX_PADDING - MIN_PADDING + 1) * unknown, span),
    )


def scenario1_prob(lenient: bool) -> Fraction:
    """Chance that a randomized first block still reads as a body-less ServiceAccept."""
    return Fraction(1, BYTE_VALUES * BYTE_VALUES) if lenient else Fraction(0)


def _corrupted_body(padding_length: int, message_id: int, ell: int, filler: int) -> bytes:
    return bytes([padding_length, message_id]) + bytes([filler]) * (ell - 2)


def brute_force_verdict_count(
    ell: int,
    registry: Optional[MessageIdRegistry] = None,
    filler: int = SCENARIO1_FILLER,
) -> Dict[str, int]:
    """Decode every (padding length, message ID) pair at length ``ell`` and tally the verdicts."""
    valid_padding_count(ell)
    registry = registry or load_registry()
    tally: Counter = Counter()
    for p in range(BYTE_VALUES):
        for m in range(BYTE_VALUES):
            result = decode_packet(_corrupted_body(p, m, ell, filler), registry)
            if isinstance(result, EvasivelyCorrupt):
                tally["evasive"] += 1
            elif isinstance(result, CriticallyCorrupt):
                tally["critical"] += 1
            else:
                tally["decoded"] += 1
    return {key: tally.get(key, 0) for key in ("evasive", "critical", "decoded")}


def scenario1_accepting_pairs(
    lenient: bool = True,
    ell: int = SCENARIO1_LENGTH,
    registry: Optional[MessageIdRegistry] = None,
    filler: int = SCENARIO1_FILLER,
) -> List[Tuple[int, int]]:
    """(padding length, message ID) pairs whose block still decodes as a ServiceAccept."""
    registry = registry or load_registry()
    pairs = []
    for p in range(BYTE_VALUES):
        result = decode_packet(
            _corrupted_body(p, ServiceAccept.message_id, ell, filler), registry, lenient_service_accept=lenient
        )
        if isinstance(result, ServiceAccept):
            pairs.append((p, ServiceAccept.message_id))
    return pairs


def sealed_length(payload_message, block_size: int = AES_BLOCK) -> int:
    """Ciphertext length of ``payload_message`` in an encrypt-then-MAC mode with ``block_size``."""
    packet = encode_packet(payload_message, block_size=block_size, length_encrypted=False, padding_source=bytes)
    return packet.packet_length


def cbc_downgrade_length(use_ping: bool) -> int:
    """Length of the server reply whose first block gets randomized in the CBC-EtM downgrade."""
    reply = Pong(bytes(PING_REFLECTION_BYTES)) if use_ping else Unimplemented(0)
    return sealed_length(reply)


def expected_success_rate(
    spec: ScenarioSpec, registry: Optional[MessageIdRegistry] = None
) -> Optional[Fraction]:
    """Analytic success rate of ``spec``; None where the outcome is not modelled exactly."""
    name = spec.name
    if name in (ScenarioName.baseline, ScenarioName.suffix_truncate):
        return Fraction(1)
    if spec.countermeasure is not Countermeasure.none and spec.countermeasure_peers is CountermeasurePeers.both:
        return Fraction(0)

    mode = spec.resolved_mode()
    profile = spec.resolved_profile()
    chacha = mode is ModeId.chacha20_poly1305

    if name is ScenarioName.prefix_truncate:
        if chacha or (spec.n_s, spec.n_c) == (0, 0):
            return Fraction(1)
        if mode is ModeId.cbc_etm:
            if (spec.n_s, spec.n_c) == (1, 0):
                return scenario1_prob(profile.accept_empty_service_accept)
            return None
        if mode is ModeId.ctr_etm:
            return None
        return Fraction(0)

    if name is ScenarioName.ext_downgrade_chacha:
        return Fraction(1)
    if name is ScenarioName.ext_downgrade_cbc_etm:
        if not profile.respond_unimplemented_to_unknown:
            return Fraction(0)
        return scenario2_prob(cbc_downgrade_length(spec.use_ping), registry).combined

    if not chacha:
        return None
    if name is ScenarioName.rogue_extension:
        return Fraction(int(profile.accept_early_ext_info))
    if name is ScenarioName.rogue_session:
        ok = profile.accept_early_userauth and profile.ignore_extra_userauth_after_success
        if spec.strategy == 2:
            ok = ok and profile.respond_unimplemented_to_unknown
        return Fraction(int(ok))

    if spec.n == 0:
        return Fraction(1)
    wraps = name is not ScenarioName.technique_rcv_inc
    if wraps and profile.detect_seqno_rollover:
        return Fraction(0)
    needs_unimplemented = name in (ScenarioName.technique_snd_inc, ScenarioName.technique_snd_dec)
    if needs_unimplemented and not profile.respond_unimplemented_to_unknown:
        return Fraction(0)
    return Fraction(1)


# ---------------------------------------------------------------------------
# Monte-Carlo
# ---------------------------------------------------------------------------

def _run_trial(job: Tuple[str, int, int]) -> Tuple[bool, str]:
    spec_json, seed, index = job
    spec = ScenarioSpec.model_validate_json(spec_json)
    result = run_scenario(spec, seed=(seed, index))
    return result.success, result.outcome


def _trial_outcomes(spec: ScenarioSpec, trials: int, seed: int, workers: int) -> Iterator[Tuple[bool, str]]:
    spec_json = spec.model_dump_json()
    jobs = ((spec_json, seed, i) for i in range(trials))
    if workers <= 1:
        for job in jobs:
            yield _run_trial(job)
        return
    chunksize = max(1, trials // (workers * 8))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(_run_trial, jobs, chunksize=chunksize)


def summarize_trials(
    spec: ScenarioSpec,
    seed: int,
    trials: int,
    successes: int,
    expected: Fraction,
    outcomes: Dict[str, int],
) -> TrialReport:
    p = float(expected)
    empirical = successes / trials
    sigma = math.sqrt(p * (1 - p) / trials)
    low = max(0.0, p - SIGMA_WIDTH * sigma)
    high = min(1.0, p + SIGMA_WIDTH * sigma)
    if 0 < expected < 1:
        p_value = float(binomtest(successes, trials, p).pvalue)
        passed = low <= empirical <= high
    else:
        passed = successes == (trials if expected == 1 else 0)
        p_value = 1.0 if passed else 0.0
    return TrialReport(
        scenario=spec.name.value,
        parameters=spec.model_dump(mode="json", by_alias=True, exclude={"seed", "trials"}),
        seed=seed,
        trials=trials,
        successes=successes,
        empirical_rate=empirical,
        expected_rate=p,
        expected_exact=str(expected),
        sigma=sigma,
        interval_low=low,
        interval_high=high,
        p_value=min(1.0, max(0.0, p_value)),
        passed=passed,
        outcomes=dict(sorted(outcomes.items())),
    )


def run_monte_carlo(
    spec: ScenarioSpec,
    trials: Optional[int] = None,
    seed: Optional[int] = None,
    *,
    workers: int = 1,
    progress: bool = False,
    registry: Optional[MessageIdRegistry] = None,
) -> TrialReport:
    """Run ``trials`` independent scenario trials and compare the rate with the analytic value.

    Trial i uses the seed pair (seed, i), so reports reproduce exactly for a given seed.
    """
    trials = spec.trials if trials is None else trials
    seed = spec.seed if seed is None else seed
    if trials < 1:
        raise ValueError("trials must be positive")
    expected = expected_success_rate(spec, registry)
    if expected is None:
        raise ValueError(f"no analytic success rate for {spec.name.value} in {spec.resolved_mode().value}")
    if 0 < expected < 1 and trials < MIN_PROBABILISTIC_TRIALS:
        raise ValueError(
            f"{spec.name.value} succeeds with probability {expected}; "
            f"use at least {MIN_PROBABILISTIC_TRIALS} trials"
        )

    logger.info("monte-carlo %s: %d trials, seed %d, %d worker(s)", spec.name.value, trials, seed, workers)
    successes = 0
    outcomes: Counter = Counter()
    for ok, outcome in tqdm(
        _trial_outcomes(spec, trials, seed, workers),
        total=trials,
        desc=spec.name.value,
        disable=not progress,
    ):
        successes += int(ok)
        outcomes[outcome] += 1
    report = summarize_trials(spec, seed, trials, successes, expected, dict(outcomes))
    logger.info(
        "monte-carlo %s: %d/%d (expected %.4f, interval [%.4f, %.4f])",
        spec.name.value, successes, trials, report.expected_rate, report.interval_low, report.interval_high,
    )
    return report
