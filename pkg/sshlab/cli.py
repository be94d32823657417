"""Command-line entry point: demos, Monte-Carlo runs, the mode matrix and the scanner.

Exit codes: 0 when a command ran to a verdict (attack failures included), 1 for usage and
validation errors or a refused scan, 2 for anything unexpected.
"""
from __future__ import annotations

import asyncio
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import click
from pydantic import ValidationError

from .analysis import brute_force_verdict_count, expected_success_rate, run_monte_carlo, scenario2_prob
from .attacks import ScenarioResult, run_mode_matrix, run_scenario
from .ciphers import ModeId
from .errors import LabError, ScanRefused
from .models import (
    PROFILE_PRESETS,
    SCHEMA_VERSION,
    Countermeasure,
    CountermeasurePeers,
    ScanSettings,
    ScenarioName,
    ScenarioSpec,
)
from .scanner import aggregate, load_fleet, read_targets, scan_fleet, scan_targets, write_report
from .store import ResultStore, sync_bootstrap

logger = logging.getLogger(__name__)

LOG_LEVEL_ENV = "SSHLAB_LOG_LEVEL"
EVENT_PREFIX = "[sshlab-event]"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INTERNAL = 2


class Reporter:
    """Tagged human lines plus optional compact JSON event lines on stdout."""

    def __init__(self, events: bool = False, quiet: bool = False) -> None:
        self.events = events
        self.quiet = quiet

    @property
    def progress(self) -> bool:
        return not self.quiet and sys.stderr.isatty()

    def line(self, tag: str, message: str) -> None:
        if not self.quiet:
            click.echo(f"[{tag}] {message}")

    def event(self, state: str, message: str, **extra: Any) -> None:
        if not self.events:
            return
        payload: Dict[str, Any] = {"state": state, "message": message}
        payload.update(extra)
        click.echo(f"{EVENT_PREFIX}{json.dumps(payload, separators=(',', ':'))}")

    def emit(self, tag: str, message: str, **extra: Any) -> None:
        self.line(tag, message)
        self.event(tag, message, **extra)


def _configure_logging(level: Optional[str]) -> None:
    name = (level or os.getenv(LOG_LEVEL_ENV) or "WARNING").upper()
    numeric = logging.getLevelName(name)
    if not isinstance(numeric, int):
        raise click.BadParameter(f"unknown log level {name!r}", param_hint="--log-level")
    logging.basicConfig(
        level=numeric,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def _write_json(path: Path, payload: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# scenario options
# ---------------------------------------------------------------------------

def scenario_options(func):
    options = [
        click.option(
            "--scenario", "scenario", required=True,
            type=click.Choice([name.value for name in ScenarioName]),
            help="Scenario to run.",
        ),
        click.option("--mode", type=click.Choice([mode.value for mode in ModeId], case_sensitive=False),
                     help="Authenticated-encryption mode both peers negotiate."),
        click.option("--n-s", "n_s", type=click.IntRange(0), default=1, show_default=True,
                     help="Server-to-client channel packets to delete (prefix-truncate)."),
        click.option("--n-c", "n_c", type=click.IntRange(0), default=0, show_default=True,
                     help="Client-to-server channel packets to delete (prefix-truncate)."),
        click.option("-N", "--n", "n", type=click.IntRange(0), default=1, show_default=True,
                     help="Counter shift for the technique scenarios."),
        click.option("--target", type=click.Choice(["client", "server"]), default="client", show_default=True),
        click.option("--use-ping", is_flag=True, help="Reflect a Ping instead of an unknown message (CBC-EtM)."),
        click.option("--strategy", type=click.Choice(["1", "2"]), default="1", show_default=True,
                     help="Rogue-session sequence-number repair strategy."),
        click.option("--profile", type=click.Choice(sorted(PROFILE_PRESETS)), help="Strictness profile preset."),
        click.option("--seed", type=click.IntRange(0), default=0, show_default=True),
        click.option("--seq-modulus", "seq_modulus", type=click.Choice(["16", "32"]),
                     help="Sequence-number width in bits."),
        click.option("--countermeasure", type=click.Choice([c.value for c in Countermeasure]),
                     default="none", show_default=True),
        click.option("--countermeasure-peers", type=click.Choice([p.value for p in CountermeasurePeers]),
                     default="both", show_default=True, help="Which peers signal the countermeasure."),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def build_spec(**params: Any) -> ScenarioSpec:
    mode = params.get("mode")
    modulus = params.get("seq_modulus")
    return ScenarioSpec(
        name=ScenarioName(params["scenario"]),
        mode=ModeId.parse(mode) if mode else None,
        n_s=params["n_s"],
        n_c=params["n_c"],
        n=params["n"],
        target=params["target"],
        use_ping=params["use_ping"],
        strategy=int(params["strategy"]),
        profile=params.get("profile"),
        seed=params["seed"],
        trials=params.get("trials") or 1,
        seq_modulus_bits=int(modulus) if modulus else None,
        countermeasure=Countermeasure(params["countermeasure"]),
        countermeasure_peers=CountermeasurePeers(params["countermeasure_peers"]),
    )


def result_payload(result: ScenarioResult) -> Dict[str, Any]:
    return {
        "schemaVersion": SCHEMA_VERSION,
        "scenario": result.spec.model_dump(mode="json", by_alias=True),
        "success": result.success,
        "outcome": result.outcome,
        "reason": result.reason,
        "client": result.client.summary(),
        "server": result.server.summary(),
        "mitm": [event.describe() for event in result.mitm_log],
        "details": result.details,
    }


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

@click.group()
@click.option("--log-level", help="Logging level (default from SSHLAB_LOG_LEVEL, else WARNING).")
@click.option("--events", is_flag=True, help="Also emit machine-readable event lines.")
@click.option("-q", "--quiet", is_flag=True, help="Suppress tagged output and progress bars.")
@click.pass_context
def cli(ctx: click.Context, log_level: Optional[str], events: bool, quiet: bool) -> None:
    """SSH transport-layer lab: scripted attacks, probability checks and exposure scans."""
    _configure_logging(log_level)
    ctx.obj = Reporter(events=events, quiet=quiet)


@cli.command()
@scenario_options
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), help="Write the run report as JSON.")
@click.pass_obj
def demo(reporter: Reporter, out: Optional[Path], **params: Any) -> None:
    """Run one scripted session and print the client, server and attacker logs with a verdict."""
    spec = build_spec(**params)
    result = run_scenario(spec)
    for tag, session in (("client", result.client), ("server", result.server)):
        for event in session.events:
            reporter.emit(tag, event.describe(), kind=event.kind.value)
    for event in result.mitm_log:
        reporter.emit("mitm", event.describe(), action=event.action.value)
    verdict = "SUCCESS" if result.success else f"FAILED({result.outcome})"
    reporter.emit("verdict", f"{verdict}: {result.reason}", success=result.success, outcome=result.outcome)
    reporter.line("verdict", f"client extensions: {sorted(result.client.received_extensions) or 'none'}")
    if out is not None:
        _write_json(out, result_payload(result))
        reporter.line("verdict", f"report written to {out}")


@cli.command()
@scenario_options
@click.option("--trials", type=click.IntRange(1), default=1000, show_default=True)
@click.option("--workers", type=click.IntRange(1), default=1, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), help="Write the trial report here.")
@click.option("--store", "use_store", is_flag=True, help="Also record the report in the results store.")
@click.pass_obj
def montecarlo(
    reporter: Reporter,
    trials: int,
    workers: int,
    out: Optional[Path],
    use_store: bool,
    **params: Any,
) -> None:
    """Run seeded trials of a scenario and compare the success rate with its analytic value."""
    spec = build_spec(trials=trials, **params)
    if expected_success_rate(spec) is None:
        raise click.UsageError(f"{spec.name.value} has no analytic success rate in {spec.resolved_mode().value}")
    report = run_monte_carlo(spec, trials, spec.seed, workers=workers, progress=reporter.progress)
    text = report.model_dump_json(by_alias=True, indent=2)
    if out is None:
        click.echo(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n", encoding="utf-8")
    reporter.event(
        "verdict",
        f"{report.successes}/{report.trials} successes",
        passed=report.passed,
        empirical=report.empirical_rate,
        expected=report.expected_rate,
    )
    if out is not None:
        reporter.line(
            "verdict",
            f"{report.successes}/{report.trials} successes "
            f"(expected {report.expected_rate:.4f}, {'within' if report.passed else 'outside'} "
            f"[{report.interval_low:.4f}, {report.interval_high:.4f}])",
        )
    if use_store:
        report_id = asyncio.run(_store_trial_report(report))
        reporter.line("verdict", f"stored as {report_id}")


async def _store_trial_report(report) -> str:
    async with ResultStore() as store:
        return await store.record_trial_report(report)


@cli.command()
@click.option("--trials", type=click.IntRange(1), default=100, show_default=True)
@click.option("--seed", type=click.IntRange(0), default=0, show_default=True)
@click.option("--mode", "modes", multiple=True, type=click.Choice([m.value for m in ModeId], case_sensitive=False),
              help="Restrict to these modes (repeatable).")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path))
@click.pass_obj
def matrix(reporter: Reporter, trials: int, seed: int, modes: Sequence[str], out: Optional[Path]) -> None:
    """Single-packet prefix truncation against each authenticated-encryption mode."""
    selected = [ModeId.parse(m) for m in modes] or None
    rows = run_mode_matrix(trials, seed, selected)
    for row in rows:
        counts = ", ".join(f"{name} {count}/{row.trials}" for name, count in sorted(row.outcomes.items()))
        if row.verdicts:
            counts += " (" + ", ".join(f"{k}={v}" for k, v in row.verdicts.items()) + ")"
        reporter.emit("verdict", f"{row.mode.value}: {counts}", mode=row.mode.value, outcomes=row.outcomes)
    if out is not None:
        _write_json(out, {
            "schemaVersion": SCHEMA_VERSION,
            "seed": seed,
            "trials": trials,
            "rows": [
                {"mode": r.mode.value, "outcomes": r.outcomes, "verdicts": r.verdicts, "dominant": r.dominant}
                for r in rows
            ],
        })


@cli.command()
@click.option("--ell", type=click.IntRange(8, 1024), default=16, show_default=True,
              help="Ciphertext length of the randomized packet.")
@click.option("--brute-force", is_flag=True, help="Cross-check by decoding every leading byte pair.")
def estimate(ell: int, brute_force: bool) -> None:
    """Exact chance that a randomized first block reads as an evasively corrupt packet."""
    payload: Dict[str, Any] = scenario2_prob(ell).as_dict()
    if brute_force:
        payload["bruteForce"] = brute_force_verdict_count(ell)
    click.echo(json.dumps(payload, indent=2))


@cli.command()
@click.option("--fleet", help="Bundled fleet name (fleet_100, fleet_1000) or a fleet config path.")
@click.option("--targets", "targets_file", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="File with host[:port] per line (live mode).")
@click.option("--live", is_flag=True, help="Probe real TCP targets.")
@click.option("--i-understand-scanning", "acknowledged", is_flag=True,
              help="Confirm you are authorized to probe the listed targets.")
@click.option("--rate", type=click.FloatRange(0.01, 1000), default=10.0, show_default=True,
              help="Connections per second.")
@click.option("--concurrency", type=click.IntRange(1, 256), default=8, show_default=True)
@click.option("--blocklist", type=click.Path(exists=True, dir_okay=False), help="CIDR opt-out list.")
@click.option("--banner", default="sshlab_scanner_1.0 research-scan", show_default=True,
              help="Software part of the probe's version banner.")
@click.option("--timeout", type=click.FloatRange(0.1, 120), default=5.0, show_default=True)
@click.option("--no-handshake", is_flag=True, help="Stop after the server KexInit (live mode).")
@click.option("--seed", type=click.IntRange(0), default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=Path("scan-report"),
              show_default=True)
@click.option("--store", "use_store", is_flag=True, help="Also record the run in the results store.")
@click.pass_obj
def scan(
    reporter: Reporter,
    fleet: Optional[str],
    targets_file: Optional[Path],
    live: bool,
    acknowledged: bool,
    rate: float,
    concurrency: int,
    blocklist: Optional[str],
    banner: str,
    timeout: float,
    no_handshake: bool,
    seed: int,
    out: Path,
    use_store: bool,
) -> None:
    """Classify servers by cipher-mode exposure and write JSON plus CSV tables."""
    if live or targets_file is not None:
        if fleet is not None:
            raise click.UsageError("--fleet cannot be combined with --live/--targets")
        settings = ScanSettings(
            live=live,
            acknowledged=acknowledged,
            rate=rate,
            concurrency=concurrency,
            connect_timeout=timeout,
            read_timeout=timeout,
            blocklist=blocklist,
            software=banner,
            complete_handshake=not no_handshake,
        )
        if not live or not acknowledged:
            raise ScanRefused("live scanning needs --live together with --i-understand-scanning")
        if targets_file is None:
            raise click.UsageError("--live needs --targets")
        targets = read_targets(targets_file)
        reporter.emit("scan", f"probing {len(targets)} live target(s) at {rate:g}/s")
        observations = asyncio.run(scan_targets(targets, settings, seed=seed, progress=reporter.progress))
        source = str(targets_file)
    else:
        config = load_fleet(fleet or "fleet_100")
        reporter.emit("scan", f"probing simulated fleet {config.name} ({config.total} servers)")
        observations = scan_fleet(config, seed=seed, progress=reporter.progress, software=banner)
        source = config.name

    report = aggregate(observations, source=source)
    written = write_report(report, observations, out)
    for row in report.cipher_families:
        reporter.emit("scan", f"{row.name}: preferred {row.preferred_count} ({row.preferred_pct:.2f}%)")
    reporter.emit(
        "scan",
        f"vulnerable support {report.vulnerable_support_count}/{report.total} ({report.vulnerable_support_pct:.2f}%)",
        vulnerableSupportPct=report.vulnerable_support_pct,
    )
    reporter.line("scan", f"report written to {written['report']}")
    if use_store:
        run_id = asyncio.run(_store_scan(report, observations))
        reporter.line("scan", f"stored as run {run_id}")


async def _store_scan(report, observations) -> str:
    async with ResultStore() as store:
        return await store.record_scan(report, observations)


@cli.command("init-db")
@click.option("--data-dir", type=click.Path(file_okay=False, path_type=Path),
              help="Store location (default from SSHLAB_DATA_DIR).")
def init_db_command(data_dir: Optional[Path]) -> None:
    """Create the results store and print its path."""
    click.echo(f"database initialized at {sync_bootstrap(data_dir)}")


# ---------------------------------------------------------------------------
# entry points
# ---------------------------------------------------------------------------

def main(argv: Optional[List[str]] = None) -> int:
    try:
        cli.main(args=argv, prog_name="sshlab", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("Aborted!", err=True)
        return EXIT_USAGE
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except ValidationError as e:
        click.echo(f"Error: invalid parameters\n{e}", err=True)
        return EXIT_USAGE
    except ScanRefused as e:
        click.echo(f"Error: {e}", err=True)
        return EXIT_USAGE
    except LabError as e:
        logger.exception("internal error")
        click.echo(f"Internal error: {e}", err=True)
        return EXIT_INTERNAL
    except (ValueError, FileNotFoundError) as e:
        click.echo(f"Error: {e}", err=True)
        return EXIT_USAGE
    except Exception as e:
        logger.exception("internal error")
        click.echo(f"Internal error: {e}", err=True)
        return EXIT_INTERNAL
    return EXIT_OK


def init_db() -> None:
    """Synchronous entry point for database initialization tooling."""
    path = sync_bootstrap()
    print(f"database initialized at {path}")
