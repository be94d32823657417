"""Posture scanner: probe SSH servers, classify their attack exposure and aggregate fleet tables.

Probes only ever send a banner, a KexInit and the key exchange; no service request or
credential leaves the scanner. Simulated fleets run in-process over the fabric; live
targets go over TCP and require an explicit acknowledgement.
"""
from __future__ import annotations

import asyncio
import csv
import ipaddress
import json
import logging
import socket
import time
from collections import Counter
from pathlib import Path
from typing import Awaitable, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

from tqdm import tqdm

from .ciphers import CIPHER_CHACHA, ETM_SUFFIX, ModeId
from .codec import VersionBanner
from .errors import ScanRefused
from .fabric import Fabric
from .models import (
    DEFAULT_CIPHERS,
    DEFAULT_MACS,
    ExposureClassification,
    ExposureVerdict,
    ExtensionRow,
    FleetConfig,
    FleetReport,
    FleetServerProfile,
    IndicatorNames,
    PeerConfig,
    ProbeError,
    Role,
    ScanSettings,
    ServerObservation,
    TableRow,
)
from .peer import ClientPeer, SeedLike, ServerPeer, TerminalCause, as_seed_sequence, drive_stream
from .registry import KNOWN_EXTENSIONS

logger = logging.getLogger(__name__)

FLEET_DIR = Path(__file__).parent / "data"
DEFAULT_SSH_PORT = 22
STRICT_KEX_PREFIX = "kex-strict-"

FAMILY_CHACHA = "ChaCha20-Poly1305"
FAMILY_GCM = "AES-GCM"
FAMILY_CTR = "AES-CTR"
FAMILY_CBC = "AES-CBC"
FAMILY_OTHER = "Other"
UNKNOWN_BUCKET = "Unknown / No KexInit"
FAMILIES = [FAMILY_CHACHA, FAMILY_CTR, FAMILY_GCM, FAMILY_CBC, FAMILY_OTHER]
MODE_ORDER = [
    ModeId.chacha20_poly1305,
    ModeId.ctr_eam,
    ModeId.ctr_etm,
    ModeId.gcm,
    ModeId.cbc_eam,
    ModeId.cbc_etm,
]
VULNERABLE_MODES = (ModeId.chacha20_poly1305, ModeId.cbc_etm)

TABLE_FILES = {
    "cipher_families": "table1_cipher_families.csv",
    "modes": "table2_modes.csv",
    "extensions": "table3_extensions.csv",
}
REPORT_FILE = "fleet_report.json"


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------

def cipher_family(cipher: str) -> str:
    name = cipher.lower()
    if name == CIPHER_CHACHA:
        return FAMILY_CHACHA
    if not name.startswith(("aes", "rijndael")):
        return FAMILY_OTHER
    if "-gcm" in name:
        return FAMILY_GCM
    if name.endswith("-ctr"):
        return FAMILY_CTR
    if name.endswith("-cbc") or name == "rijndael-cbc@lysator.liu.se":
        return FAMILY_CBC
    return FAMILY_OTHER


def mode_for(cipher: str, mac: Optional[str]) -> Optional[ModeId]:
    """Authenticated-encryption mode of a cipher/MAC pair; AEAD ciphers ignore the MAC."""
    family = cipher_family(cipher)
    if family == FAMILY_CHACHA:
        return ModeId.chacha20_poly1305
    if family == FAMILY_GCM:
        return ModeId.gcm
    if family not in (FAMILY_CTR, FAMILY_CBC) or not mac:
        return None
    etm = mac.endswith(ETM_SUFFIX)
    if family == FAMILY_CTR:
        return ModeId.ctr_etm if etm else ModeId.ctr_eam
    return ModeId.cbc_etm if etm else ModeId.cbc_eam


def supported_modes(ciphers: Sequence[str], macs: Sequence[str]) -> List[ModeId]:
    found = set()
    for cipher in ciphers:
        family = cipher_family(cipher)
        if family in (FAMILY_CHACHA, FAMILY_GCM):
            found.add(mode_for(cipher, None))
            continue
        for mac in macs:
            mode = mode_for(cipher, mac)
            if mode is not None:
                found.add(mode)
    return [mode for mode in MODE_ORDER if mode in found]


def exposure_verdict(modes: Iterable[ModeId]) -> ExposureVerdict:
    modes = set(modes)
    if ModeId.chacha20_poly1305 in modes:
        return ExposureVerdict.perfectly_exploitable
    if ModeId.cbc_etm in modes:
        return ExposureVerdict.probabilistically_exploitable
    if ModeId.ctr_etm in modes:
        return ExposureVerdict.vulnerable_not_exploitable
    return ExposureVerdict.not_vulnerable


def classify(observation: ServerObservation) -> ExposureClassification:
    """Exposure of one server, judged from its client-to-server algorithm lists."""
    if observation.kexinit is None:
        raise ValueError(f"{observation.target}: no KexInit captured")
    ciphers = observation.kexinit.get("encryption_client_to_server", [])
    macs = observation.kexinit.get("mac_client_to_server", [])
    if not ciphers:
        raise ValueError(f"{observation.target}: empty cipher list")

    preferred_cipher = ciphers[0]
    preferred_family = cipher_family(preferred_cipher)
    preferred = mode_for(preferred_cipher, macs[0] if macs else None)
    modes = supported_modes(ciphers, macs)
    families = {cipher_family(c) for c in ciphers}
    return ExposureClassification(
        target=observation.target,
        preferred_family=preferred_family,
        preferred_mode=preferred.value if preferred else FAMILY_OTHER,
        supported_families=[f for f in FAMILIES if f in families],
        supported_modes=modes,
        verdict=exposure_verdict(modes),
        prefers_vulnerable=preferred in VULNERABLE_MODES,
    )


# ---------------------------------------------------------------------------
# probing
# ---------------------------------------------------------------------------

def probe_config(software: str = "sshlab_scanner_1.0") -> PeerConfig:
    """Anonymous probe client: full algorithm lists, no countermeasures, stops at the channel."""
    return PeerConfig(
        role=Role.client,
        software=software,
        ciphers=list(DEFAULT_CIPHERS),
        macs=list(DEFAULT_MACS),
        probe_only=True,
    )


def observe(target: str, client: ClientPeer) -> ServerObservation:
    """Reduce a finished probe client to the wire facts the scanner reports."""
    session = client.session
    banner = session.peer_banner.text.decode("ascii", errors="replace") if session.peer_banner else None
    kex = session.peer_kexinit
    if kex is None:
        timed_out = session.terminal is TerminalCause.timeout
        return ServerObservation(
            target=target,
            banner=banner,
            error=ProbeError.timeout if timed_out else ProbeError.no_kexinit,
            error_detail=session.terminal_detail or "server sent no KexInit",
        )

    names = IndicatorNames()
    signals = set(names.countermeasure_names())
    completed = client.channel_entered
    observation = ServerObservation(
        target=target,
        banner=banner,
        kexinit=kex.lists(),
        ext_info_signaled=names.ext_info_server in kex.kex_algorithms,
        extensions_offered=sorted(session.received_extensions) if completed else [],
        handshake_completed=completed,
        countermeasure_signals=[
            name for name in kex.kex_algorithms if name in signals or name.startswith(STRICT_KEX_PREFIX)
        ],
    )
    if session.failed:
        observation.error_detail = f"{session.terminal.value}: {session.terminal_detail}"
    return observation


class SilentServer:
    """Fabric endpoint that sends its banner and never a KexInit."""

    def __init__(self, software: str) -> None:
        self.software = software
        self.closed = False
        self._output: List[bytes] = []

    def start(self) -> None:
        self._output.append(VersionBanner.for_software(self.software).to_line())

    def receive_data(self, data: bytes) -> None:
        pass

    def drain_output(self) -> List[bytes]:
        out, self._output = self._output, []
        return out


def server_config(profile: FleetServerProfile) -> PeerConfig:
    return PeerConfig(
        role=Role.server,
        software=profile.software,
        ciphers=list(profile.ciphers),
        macs=list(profile.macs),
        signal_ext_info=profile.signal_ext_info,
        extensions=dict(profile.extensions),
        countermeasures=profile.countermeasures,
    )


def probe_simulated(
    profile: FleetServerProfile,
    target: Optional[str] = None,
    seed: SeedLike = None,
    software: str = "sshlab_scanner_1.0",
) -> ServerObservation:
    """Probe one in-process server built from a fleet profile."""
    target = target or profile.name
    client_seed, server_seed = as_seed_sequence(seed).spawn(2)
    client = ClientPeer(probe_config(software), client_seed)
    if profile.kexinit_missing:
        server = SilentServer(profile.software)
    else:
        server = ServerPeer(server_config(profile), server_seed)
    Fabric(client, server).run()
    return observe(target, client)


def load_fleet(source: Union[str, Path]) -> FleetConfig:
    """Fleet config from a path, or by bundled name such as ``fleet_100``."""
    path = Path(source)
    if not path.exists():
        bundled = FLEET_DIR / f"{Path(str(source)).stem}.json"
        if not bundled.exists():
            raise FileNotFoundError(f"no fleet config at {source}")
        path = bundled
    return FleetConfig.model_validate_json(path.read_text(encoding="utf-8"))


def scan_fleet(
    fleet: FleetConfig,
    *,
    seed: int = 0,
    progress: bool = False,
    software: str = "sshlab_scanner_1.0",
) -> List[ServerObservation]:
    """Probe every simulated server in ``fleet``; server i uses the seed pair (seed, i)."""
    observations: List[ServerObservation] = []
    targets = [
        (profile, f"{profile.name}-{k:04d}")
        for profile in fleet.servers
        for k in range(profile.count)
    ]
    logger.info("scanning simulated fleet %s (%d servers)", fleet.name, len(targets))
    for index, (profile, target) in enumerate(tqdm(targets, desc=f"scan {fleet.name}", disable=not progress)):
        observations.append(probe_simulated(profile, target, (seed, index), software))
    return observations


# ---------------------------------------------------------------------------
# live probing
# ---------------------------------------------------------------------------

Network = Union[ipaddress.IPv4Network, ipaddress.IPv6Network]


def parse_target(target: str) -> Tuple[str, int]:
    """Split ``host[:port]``; IPv6 literals use ``[addr]:port``."""
    text = target.strip()
    if not text:
        raise ValueError("empty target")
    if text.startswith("["):
        host, _, rest = text[1:].partition("]")
        port = rest[1:] if rest.startswith(":") else ""
    elif text.count(":") == 1:
        host, port = text.split(":")
    else:
        host, port = text, ""
    if not port:
        return host, DEFAULT_SSH_PORT
    value = int(port)
    if not 0 < value < 65536:
        raise ValueError(f"port out of range in {target!r}")
    return host, value


def read_targets(path: Union[str, Path]) -> List[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    targets = [line.split("#", 1)[0].strip() for line in lines]
    return [t for t in targets if t]


def load_blocklist(path: Optional[Union[str, Path]]) -> List[Network]:
    """CIDR networks, one per line; ``#`` starts a comment."""
    if path is None:
        return []
    networks: List[Network] = []
    for number, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        entry = line.split("#", 1)[0].strip()
        if not entry:
            continue
        try:
            networks.append(ipaddress.ip_network(entry, strict=False))
        except ValueError as e:
            raise ValueError(f"{path}:{number}: {e}") from e
    return networks


async def resolve_addresses(host: str) -> List[str]:
    try:
        return [str(ipaddress.ip_address(host))]
    except ValueError:
        pass
    infos = await asyncio.get_running_loop().getaddrinfo(host, None, type=socket.SOCK_STREAM)
    return sorted({info[4][0] for info in infos})


def is_blocked(addresses: Iterable[str], blocklist: Sequence[Network]) -> bool:
    for address in addresses:
        ip = ipaddress.ip_address(address)
        if any(ip.version == net.version and ip in net for net in blocklist):
            return True
    return False


class RateLimiter:
    """Windowed request counter shared by all probe workers; callers wait instead of failing."""

    def __init__(
        self,
        rate: float,
        *,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], Awaitable[None]] = asyncio.sleep,
    ) -> None:
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.max_requests = max(1, int(rate))
        self.window = self.max_requests / rate
        self._clock = clock
        self._sleep = sleep
        # (request_count, window_start)
        self._state: Tuple[int, float] = (0, float("-inf"))
        self._lock = asyncio.Lock()

    async def acquire(self) -> None:
        async with self._lock:
            while True:
                now = self._clock()
                count, window_start = self._state
                if now - window_start >= self.window:
                    self._state = (1, now)
                    return
                if count < self.max_requests:
                    self._state = (count + 1, window_start)
                    return
                await self._sleep(self.window - (now - window_start))


async def probe_live(
    target: str,
    settings: ScanSettings,
    *,
    limiter: RateLimiter,
    blocklist: Sequence[Network] = (),
    seed: SeedLike = None,
) -> ServerObservation:
    host, port = parse_target(target)
    try:
        addresses = await resolve_addresses(host)
    except OSError as e:
        return ServerObservation(target=target, error=ProbeError.unresolved, error_detail=f"resolve failed: {e}")
    if is_blocked(addresses, blocklist):
        logger.info("skipping blocklisted target %s", target)
        return ServerObservation(target=target, error=ProbeError.blocked, error_detail="address is blocklisted")

    await limiter.acquire()
    try:
        reader, writer = await asyncio.wait_for(
            asyncio.open_connection(addresses[0], port), timeout=settings.connect_timeout
        )
    except asyncio.TimeoutError:
        return ServerObservation(
            target=target, error=ProbeError.timeout, error_detail=f"connect timed out after {settings.connect_timeout}s"
        )
    except OSError as e:
        return ServerObservation(target=target, error=ProbeError.timeout, error_detail=f"connect failed: {e}")

    client = ClientPeer(probe_config(settings.software), seed)
    if settings.complete_handshake:
        until = lambda peer: peer.probe_done  # noqa: E731
    else:
        until = lambda peer: peer.session.peer_kexinit is not None  # noqa: E731
    try:
        await drive_stream(client, reader, writer, read_timeout=settings.read_timeout, until=until)
    except (ConnectionError, OSError) as e:
        logger.debug("%s: connection error %s", target, e)
    return observe(target, client)


async def scan_targets(
    targets: Sequence[str],
    settings: ScanSettings,
    *,
    seed: int = 0,
    progress: bool = False,
) -> List[ServerObservation]:
    """Probe live TCP targets with bounded concurrency and a global rate limit."""
    if not settings.live or not settings.acknowledged:
        raise ScanRefused("live scanning needs --live together with --i-understand-scanning")
    if not targets:
        raise ValueError("no targets to scan")
    for target in targets:
        parse_target(target)

    blocklist = load_blocklist(settings.blocklist)
    limiter = RateLimiter(settings.rate)
    semaphore = asyncio.Semaphore(settings.concurrency)
    bar = tqdm(total=len(targets), desc="scan", disable=not progress)

    async def worker(index: int, target: str) -> ServerObservation:
        async with semaphore:
            observation = await probe_live(
                target, settings, limiter=limiter, blocklist=blocklist, seed=(seed, index)
            )
        bar.update(1)
        return observation

    logger.info("scanning %d live targets (rate %.1f/s, concurrency %d)", len(targets), settings.rate, settings.concurrency)
    try:
        return list(await asyncio.gather(*(worker(i, t) for i, t in enumerate(targets))))
    finally:
        bar.close()


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def _pct(count: int, total: int) -> float:
    return round(100 * count / total, 2)


def aggregate(observations: Sequence[ServerObservation], source: str = "fleet") -> FleetReport:
    """Fold observations into the cipher-family, mode and extension tables."""
    if not observations:
        raise ValueError("aggregate needs at least one observation")
    total = len(observations)
    preferred_family: Counter = Counter()
    supported_family: Counter = Counter()
    preferred_mode: Counter = Counter()
    supported_mode: Counter = Counter()
    extensions: Counter = Counter()
    verdicts: Counter = Counter()
    signals: Counter = Counter()
    vulnerable = both = prefers = signaled = 0

    for observation in observations:
        for name in observation.extensions_offered:
            extensions[name] += 1
        for name in observation.countermeasure_signals:
            signals[name] += 1
        signaled += int(observation.ext_info_signaled)
        if observation.kexinit is None or not observation.kexinit.get("encryption_client_to_server"):
            preferred_family[UNKNOWN_BUCKET] += 1
            preferred_mode[UNKNOWN_BUCKET] += 1
            continue
        result = classify(observation)
        preferred_family[result.preferred_family] += 1
        preferred_mode[result.preferred_mode] += 1
        supported_family.update(result.supported_families)
        supported_mode.update(mode.value for mode in result.supported_modes)
        verdicts[result.verdict.value] += 1
        present = [mode for mode in VULNERABLE_MODES if mode in result.supported_modes]
        vulnerable += int(bool(present))
        both += int(len(present) == len(VULNERABLE_MODES))
        prefers += int(result.prefers_vulnerable)

    def rows(names: Sequence[str], preferred: Counter, supported: Counter) -> List[TableRow]:
        table = [
            TableRow(
                name=name,
                preferred_count=preferred[name],
                preferred_pct=_pct(preferred[name], total),
                supported_count=supported[name],
                supported_pct=_pct(supported[name], total),
            )
            for name in names
        ]
        table.append(TableRow(
            name=UNKNOWN_BUCKET,
            preferred_count=preferred[UNKNOWN_BUCKET],
            preferred_pct=_pct(preferred[UNKNOWN_BUCKET], total),
        ))
        return table

    mode_names = [mode.value for mode in MODE_ORDER] + [FAMILY_OTHER]
    extension_names = KNOWN_EXTENSIONS + sorted(set(extensions) - set(KNOWN_EXTENSIONS))
    return FleetReport(
        source=source,
        total=total,
        cipher_families=rows(FAMILIES, preferred_family, supported_family),
        modes=rows(mode_names, preferred_mode, supported_mode),
        extensions=[ExtensionRow(name=n, count=extensions[n], pct=_pct(extensions[n], total)) for n in extension_names],
        vulnerable_support_count=vulnerable,
        vulnerable_support_pct=_pct(vulnerable, total),
        both_vulnerable_count=both,
        both_vulnerable_pct=_pct(both, total),
        prefers_vulnerable_count=prefers,
        prefers_vulnerable_pct=_pct(prefers, total),
        ext_info_signaled_count=signaled,
        verdicts=dict(sorted(verdicts.items())),
        countermeasure_signals=dict(sorted(signals.items())),
        notes=[
            "supported counts are non-exclusive: a server supporting several families or modes counts in each",
            f"vulnerable support means {ModeId.chacha20_poly1305.value} or {ModeId.cbc_etm.value} is offered",
        ],
    )


def write_report(report: FleetReport, observations: Sequence[ServerObservation], out_dir: Union[str, Path]) -> Dict[str, Path]:
    """Write the JSON report and the three CSV tables; returns the written paths by kind."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: Dict[str, Path] = {}

    report_path = out / REPORT_FILE
    payload = report.model_dump(mode="json", by_alias=True)
    payload["observations"] = [o.model_dump(mode="json", by_alias=True) for o in observations]
    report_path.write_text(json.dumps(payload, indent=2, sort_keys=False) + "\n", encoding="utf-8")
    written["report"] = report_path

    header = ["name", "preferred_count", "preferred_pct", "supported_count", "supported_pct"]
    for kind in ("cipher_families", "modes"):
        path = out / TABLE_FILES[kind]
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(header)
            for row in getattr(report, kind):
                writer.writerow([
                    row.name,
                    row.preferred_count,
                    f"{row.preferred_pct:.2f}",
                    "" if row.supported_count is None else row.supported_count,
                    "" if row.supported_pct is None else f"{row.supported_pct:.2f}",
                ])
        written[kind] = path

    path = out / TABLE_FILES["extensions"]
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["name", "count", "pct"])
        for ext in report.extensions:
            writer.writerow([ext.name, ext.count, f"{ext.pct:.2f}"])
    written["extensions"] = path
    return written
