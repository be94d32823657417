from __future__ import annotations

import asyncio
import csv
import json
import socket
from pathlib import Path
from typing import Dict, List

import pytest

from sshlab import scanner
from sshlab.errors import ScanRefused
from sshlab.models import (
    DEFAULT_SERVER_EXTENSIONS,
    ExposureVerdict,
    FleetReport,
    FleetServerProfile,
    PeerConfig,
    ProbeError,
    Role,
    ScanSettings,
    ServerObservation,
)
from sshlab.peer import run_server
from sshlab.scanner import (
    FAMILY_CBC,
    FAMILY_CHACHA,
    FAMILY_CTR,
    FAMILY_GCM,
    FAMILY_OTHER,
    UNKNOWN_BUCKET,
    RateLimiter,
    aggregate,
    cipher_family,
    classify,
    is_blocked,
    load_blocklist,
    load_fleet,
    parse_target,
    probe_simulated,
    read_targets,
    scan_fleet,
    scan_targets,
    write_report,
)

ETM = "hmac-sha2-256-etm@openssh.com"
EAM = "hmac-sha2-256"


def _observation(ciphers: List[str], macs: List[str], target: str = "host") -> ServerObservation:
    return ServerObservation(
        target=target,
        kexinit={"encryption_client_to_server": ciphers, "mac_client_to_server": macs},
    )


def _row(rows, name: str):
    return next(row for row in rows if row.name == name)


class TestClassify:
    @pytest.mark.parametrize(
        ("cipher", "family"),
        [
            ("chacha20-poly1305@openssh.com", FAMILY_CHACHA),
            ("aes256-gcm@openssh.com", FAMILY_GCM),
            ("aes192-ctr", FAMILY_CTR),
            ("aes128-cbc", FAMILY_CBC),
            ("rijndael-cbc@lysator.liu.se", FAMILY_CBC),
            ("3des-cbc", FAMILY_OTHER),
        ],
    )
    def test_cipher_family(self, cipher: str, family: str) -> None:
        assert cipher_family(cipher) == family

    @pytest.mark.parametrize(
        ("ciphers", "macs", "verdict"),
        [
            (["aes128-ctr", "chacha20-poly1305@openssh.com"], [EAM], ExposureVerdict.perfectly_exploitable),
            (["aes128-cbc"], [EAM, ETM], ExposureVerdict.probabilistically_exploitable),
            (["aes128-ctr"], [ETM], ExposureVerdict.vulnerable_not_exploitable),
            (["aes128-gcm@openssh.com", "aes128-cbc"], [EAM], ExposureVerdict.not_vulnerable),
        ],
    )
    def test_verdict(self, ciphers: List[str], macs: List[str], verdict: ExposureVerdict) -> None:
        assert classify(_observation(ciphers, macs)).verdict is verdict

    def test_preferred_mode_uses_first_mac(self) -> None:
        """A CTR server listing an encrypt-and-MAC first prefers CTR-EaM even if it also offers EtM."""
        result = classify(_observation(["aes128-ctr"], [EAM, ETM]))
        assert result.preferred_mode == "CTR-EaM"
        assert not result.prefers_vulnerable
        assert [m.value for m in result.supported_modes] == ["CTR-EaM", "CTR-EtM"]

    def test_missing_kexinit(self) -> None:
        with pytest.raises(ValueError, match="no KexInit"):
            classify(ServerObservation(target="x"))

    def test_empty_cipher_list(self) -> None:
        with pytest.raises(ValueError, match="empty cipher list"):
            classify(_observation([], [EAM]))


class TestSimulatedProbe:
    def test_completes_handshake_and_reads_extensions(self) -> None:
        profile = FleetServerProfile(
            name="probe-me", count=1, extensions={"server-sig-algs": "ssh-ed25519", "ping@openssh.com": "0"}
        )
        observation = probe_simulated(profile, seed=0)
        assert observation.handshake_completed
        assert observation.banner == "SSH-2.0-OpenSSH_9.5"
        assert observation.ext_info_signaled
        assert observation.extensions_offered == ["ping@openssh.com", "server-sig-algs"]
        assert observation.error is None

    def test_silent_server(self) -> None:
        profile = FleetServerProfile(name="tarpit", count=1, kexinit_missing=True)
        observation = probe_simulated(profile, seed=0)
        assert observation.kexinit is None
        assert observation.error is ProbeError.no_kexinit

    def test_load_fleet_by_name(self) -> None:
        fleet = load_fleet("fleet_100")
        assert fleet.total == 100

    def test_load_fleet_missing(self, tmp_path: Path) -> None:
        with pytest.raises(FileNotFoundError):
            load_fleet(tmp_path / "nope.json")


def test_fleet_100_preferred_families() -> None:
    report = aggregate(scan_fleet(load_fleet("fleet_100"), seed=0), source="fleet_100")
    preferred = {row.name: row.preferred_count for row in report.cipher_families}
    assert preferred == {
        FAMILY_CHACHA: 58,
        FAMILY_CTR: 32,
        FAMILY_GCM: 8,
        FAMILY_CBC: 2,
        FAMILY_OTHER: 0,
        UNKNOWN_BUCKET: 0,
    }
    assert report.total == 100


@pytest.fixture(scope="module")
def fleet_1000_report() -> FleetReport:
    return aggregate(scan_fleet(load_fleet("fleet_1000"), seed=0), source="fleet_1000")


class TestFleet1000:
    @pytest.fixture
    def report(self, fleet_1000_report: FleetReport) -> FleetReport:
        return fleet_1000_report

    def test_cipher_families(self, report: FleetReport) -> None:
        assert _row(report.cipher_families, FAMILY_CHACHA).preferred_count == 576
        assert _row(report.cipher_families, FAMILY_OTHER).preferred_count == 30
        assert _row(report.cipher_families, UNKNOWN_BUCKET).preferred_count == 10
        assert _row(report.cipher_families, UNKNOWN_BUCKET).supported_count is None

    def test_supported_counts_are_non_exclusive(self, report: FleetReport) -> None:
        """Every server with a KexInit lists CTR, so CTR support exceeds any preferred count."""
        assert _row(report.cipher_families, FAMILY_CTR).supported_count == 990
        assert sum(row.supported_count or 0 for row in report.cipher_families) > report.total

    def test_vulnerable_modes(self, report: FleetReport) -> None:
        assert report.vulnerable_support_count == 770
        assert report.vulnerable_support_pct == 77.0
        assert report.both_vulnerable_count == 88
        assert report.prefers_vulnerable_count == 576

    def test_extensions(self, report: FleetReport) -> None:
        counts = {row.name: row.count for row in report.extensions}
        assert counts["server-sig-algs"] == 880
        assert counts["publickey-hostbound@openssh.com"] == 488
        assert counts["ping@openssh.com"] == 88
        assert counts["elevation"] == 30
        assert counts["no-flow-control"] == 74
        assert counts["delay-compression"] == 110
        assert counts["global-requests-ok"] == 0
        assert report.ext_info_signaled_count == 910

    def test_verdicts_and_signals(self, report: FleetReport) -> None:
        assert report.verdicts == {
            "not_vulnerable": 220,
            "perfectly_exploitable": 696,
            "probabilistically_exploitable": 74,
        }
        assert report.countermeasure_signals == {"seq-reset-s": 88}

    def test_write_report(self, report: FleetReport, tmp_path: Path) -> None:
        written = write_report(report, [], tmp_path)
        assert set(written) == {"report", "cipher_families", "modes", "extensions"}

        payload = json.loads(written["report"].read_text())
        assert payload["total"] == 1000
        assert payload["vulnerableSupportCount"] == 770

        with written["cipher_families"].open() as handle:
            rows = list(csv.DictReader(handle))
        chacha = next(row for row in rows if row["name"] == FAMILY_CHACHA)
        assert chacha["preferred_count"] == "576"
        assert chacha["preferred_pct"] == "57.60"
        unknown = next(row for row in rows if row["name"] == UNKNOWN_BUCKET)
        assert unknown["supported_count"] == ""


def test_aggregate_needs_observations() -> None:
    with pytest.raises(ValueError, match="at least one"):
        aggregate([])


# ---------------------------------------------------------------------------
# live scanning helpers
# ---------------------------------------------------------------------------

class TestTargets:
    @pytest.mark.parametrize(
        ("target", "expected"),
        [
            ("example.org", ("example.org", 22)),
            ("10.0.0.1:2222", ("10.0.0.1", 2222)),
            ("[::1]:2200", ("::1", 2200)),
            ("[2001:db8::1]", ("2001:db8::1", 22)),
            ("2001:db8::1", ("2001:db8::1", 22)),
        ],
    )
    def test_parse_target(self, target: str, expected) -> None:
        assert parse_target(target) == expected

    @pytest.mark.parametrize("target", ["", "host:0", "host:70000"])
    def test_parse_target_rejects(self, target: str) -> None:
        with pytest.raises(ValueError):
            parse_target(target)

    def test_read_targets_skips_comments(self, tmp_path: Path) -> None:
        path = tmp_path / "targets.txt"
        path.write_text("# lab hosts\n10.0.0.1\n\n10.0.0.2:2222  # jump box\n")
        assert read_targets(path) == ["10.0.0.1", "10.0.0.2:2222"]

    def test_blocklist(self, tmp_path: Path) -> None:
        path = tmp_path / "blocklist.txt"
        path.write_text("10.0.0.0/8\n# documentation range\n2001:db8::/32\n")
        blocklist = load_blocklist(path)
        assert is_blocked(["10.1.2.3"], blocklist)
        assert is_blocked(["192.0.2.1", "2001:db8::5"], blocklist)
        assert not is_blocked(["192.0.2.1"], blocklist)
        assert load_blocklist(None) == []

    def test_blocklist_reports_bad_line(self, tmp_path: Path) -> None:
        path = tmp_path / "blocklist.txt"
        path.write_text("10.0.0.0/8\nnot-a-network\n")
        with pytest.raises(ValueError, match=":2:"):
            load_blocklist(path)


class TestRateLimiter:
    def _acquire(self, rate: float, times: int) -> List[float]:
        now = [0.0]
        slept: List[float] = []

        async def fake_sleep(seconds: float) -> None:
            slept.append(seconds)
            now[0] += seconds

        limiter = RateLimiter(rate, clock=lambda: now[0], sleep=fake_sleep)

        async def run() -> None:
            for _ in range(times):
                await limiter.acquire()

        asyncio.run(run())
        return slept

    def test_waits_once_the_window_is_full(self) -> None:
        assert self._acquire(2.0, 5) == [1.0, 1.0]

    def test_fractional_rate(self) -> None:
        """Half a request per second spaces probes two seconds apart."""
        assert self._acquire(0.5, 3) == [2.0, 2.0]

    def test_rejects_non_positive_rate(self) -> None:
        with pytest.raises(ValueError, match="positive"):
            RateLimiter(0)


class TestScanTargets:
    @pytest.mark.parametrize(
        "settings",
        [ScanSettings(), ScanSettings(live=True), ScanSettings(acknowledged=True)],
    )
    def test_refuses_without_both_flags(self, settings: ScanSettings) -> None:
        with pytest.raises(ScanRefused, match="--i-understand-scanning"):
            asyncio.run(scan_targets(["127.0.0.1"], settings))

    def test_rejects_empty_target_list(self) -> None:
        with pytest.raises(ValueError, match="no targets"):
            asyncio.run(scan_targets([], ScanSettings(live=True, acknowledged=True)))

    def test_blocklisted_target_is_not_contacted(self, tmp_path: Path) -> None:
        blocklist = tmp_path / "blocklist.txt"
        blocklist.write_text("127.0.0.0/8\n")
        settings = ScanSettings(live=True, acknowledged=True, blocklist=str(blocklist))
        [observation] = asyncio.run(scan_targets(["127.0.0.1:1"], settings))
        assert observation.error is ProbeError.blocked

    def test_unresolvable_host_is_not_a_timeout(self, monkeypatch: pytest.MonkeyPatch) -> None:
        async def fail(host: str):
            raise socket.gaierror(socket.EAI_NONAME, "Name or service not known")

        monkeypatch.setattr(scanner, "resolve_addresses", fail)
        settings = ScanSettings(live=True, acknowledged=True)
        [observation] = asyncio.run(scan_targets(["no-such-host.invalid"], settings))
        assert observation.error is ProbeError.unresolved
        assert "resolve failed" in observation.error_detail

    def test_probes_a_loopback_server(self) -> None:
        """The live path reads the KexInit and ExtInfo of a real TCP endpoint."""

        async def scan() -> List[ServerObservation]:
            config = PeerConfig(role=Role.server, extensions=dict(DEFAULT_SERVER_EXTENSIONS))

            async def handle(reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
                await run_server(config, reader, writer, seed=0, read_timeout=2.0)

            server = await asyncio.start_server(handle, "127.0.0.1", 0)
            port = server.sockets[0].getsockname()[1]
            try:
                settings = ScanSettings(live=True, acknowledged=True, rate=100.0, read_timeout=2.0)
                return await scan_targets([f"127.0.0.1:{port}"], settings, seed=1)
            finally:
                server.close()
                await server.wait_closed()

        [observation] = asyncio.run(scan())
        assert observation.error is None
        assert observation.handshake_completed
        assert observation.ext_info_signaled
        assert set(observation.extensions_offered) == set(DEFAULT_SERVER_EXTENSIONS)
        assert classify(observation).verdict is ExposureVerdict.perfectly_exploitable
