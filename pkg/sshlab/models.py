from __future__ import annotations

from enum import Enum
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic.alias_generators import to_camel

from .ciphers import (
    CIPHER_CBC,
    CIPHER_CHACHA,
    CIPHER_CTR,
    CIPHER_GCM,
    MAC_EAM,
    MAC_ETM,
    ModeId,
)

SCHEMA_VERSION = "1.0"

# Input limits
MAX_TRIALS = 1_000_000
MAX_NAME_LENGTH = 64
MAX_SECRET_LENGTH = 1024
MAX_WORKLOAD_ITEMS = 1000
MAX_PREFIX_DELETIONS = 64

KEX_DH_GROUP14 = "diffie-hellman-group14-sha256"
HOST_KEY_ED25519 = "ssh-ed25519"
DEFAULT_CIPHERS = [CIPHER_CHACHA, CIPHER_GCM, CIPHER_CTR, CIPHER_CBC]
DEFAULT_MACS = [MAC_ETM, MAC_EAM]
TEST_HOST_KEY_SEED = "5d1e6c3bb0f2a7d49e8c17f06a3b2c9d4e5f60718293a4b5c6d7e8f90a1b2c3d"

DEFAULT_SERVER_EXTENSIONS: Dict[str, str] = {
    "server-sig-algs": "ssh-ed25519,rsa-sha2-512,rsa-sha2-256",
    "publickey-hostbound@openssh.com": "0",
    "ping@openssh.com": "0",
}


class CamelModel(BaseModel):
    """Base model that serializes fields using camelCase."""

    model_config = ConfigDict(populate_by_name=True, alias_generator=to_camel)


class Role(str, Enum):
    client = "client"
    server = "server"

    @property
    def other(self) -> "Role":
        return Role.server if self is Role.client else Role.client


# ---------------------------------------------------------------------------
# peer configuration
# ---------------------------------------------------------------------------

class StrictnessProfile(CamelModel):
    name: str = "strict"
    accept_empty_service_accept: bool = False
    respond_unimplemented_to_unknown: bool = True
    accept_early_ext_info: bool = False
    accept_early_userauth: bool = False
    ignore_extra_userauth_after_success: bool = False
    detect_seqno_rollover: bool = True

    @classmethod
    def preset(cls, name: str) -> "StrictnessProfile":
        try:
            flags = PROFILE_PRESETS[name]
        except KeyError:
            raise ValueError(
                f"unknown profile {name!r}; expected one of {', '.join(sorted(PROFILE_PRESETS))}"
            ) from None
        return cls(name=name, **flags)


PROFILE_PRESETS: Dict[str, Dict[str, bool]] = {
    "strict": {},
    "lenient": {"accept_empty_service_accept": True},
    "openssh": {"accept_empty_service_accept": True},
    "putty": {"accept_empty_service_accept": True, "detect_seqno_rollover": False},
    "dropbear": {"respond_unimplemented_to_unknown": False, "detect_seqno_rollover": False},
    "asyncssh": {
        "accept_early_ext_info": True,
        "accept_early_userauth": True,
        "ignore_extra_userauth_after_success": True,
        "detect_seqno_rollover": False,
    },
}


class IndicatorNames(CamelModel):
    """Pseudo-algorithm names placed in the kex list to signal optional features."""

    ext_info_client: str = "ext-info-c"
    ext_info_server: str = "ext-info-s"
    seq_reset_client: str = "seq-reset-c"
    seq_reset_server: str = "seq-reset-s"
    transcript_mac_client: str = "xmac-c"
    transcript_mac_server: str = "xmac-s"

    def all_names(self) -> List[str]:
        return [
            self.ext_info_client,
            self.ext_info_server,
            self.seq_reset_client,
            self.seq_reset_server,
            self.transcript_mac_client,
            self.transcript_mac_server,
        ]

    def countermeasure_names(self) -> List[str]:
        return [
            self.seq_reset_client,
            self.seq_reset_server,
            self.transcript_mac_client,
            self.transcript_mac_server,
        ]


class CountermeasureSettings(CamelModel):
    seq_reset: bool = False
    transcript_mac: bool = False


class Countermeasure(str, Enum):
    none = "none"
    seq_reset = "seq-reset"
    transcript_mac = "transcript-mac"
    both = "both"

    def settings(self) -> CountermeasureSettings:
        return CountermeasureSettings(
            seq_reset=self in (Countermeasure.seq_reset, Countermeasure.both),
            transcript_mac=self in (Countermeasure.transcript_mac, Countermeasure.both),
        )


class Credentials(CamelModel):
    user: str = Field(..., min_length=1, max_length=MAX_NAME_LENGTH)
    password: str = Field(..., max_length=MAX_SECRET_LENGTH)
    method: Literal["password", "publickey"] = "password"


def _check_algorithm_names(names: List[str]) -> List[str]:
    for name in names:
        if not name or "," in name or not name.isascii():
            raise ValueError(f"invalid algorithm name {name!r}")
    return names


class PeerConfig(CamelModel):
    role: Role
    software: str = Field("sshlab_1.0", min_length=1, max_length=200)
    kex_algorithms: List[str] = Field(default_factory=lambda: [KEX_DH_GROUP14])
    host_key_algorithms: List[str] = Field(default_factory=lambda: [HOST_KEY_ED25519])
    ciphers: List[str] = Field(default_factory=lambda: list(DEFAULT_CIPHERS), min_length=1)
    macs: List[str] = Field(default_factory=lambda: list(DEFAULT_MACS))
    signal_ext_info: bool = True
    extensions: Dict[str, str] = Field(default_factory=dict)
    second_extensions: Optional[Dict[str, str]] = None
    profile: StrictnessProfile = Field(default_factory=StrictnessProfile)
    countermeasures: CountermeasureSettings = Field(default_factory=CountermeasureSettings)
    indicator_names: IndicatorNames = Field(default_factory=IndicatorNames)
    seq_modulus_bits: Literal[16, 32] = 32
    credentials: Optional[Credentials] = None
    accounts: Dict[str, str] = Field(default_factory=dict)
    host_key_seed: str = TEST_HOST_KEY_SEED
    dh_exponent_bits: int = Field(256, ge=160, le=2048)
    workload: List[bytes] = Field(default_factory=list, max_length=MAX_WORKLOAD_ITEMS)
    probe_only: bool = False
    disconnect_when_done: bool = False

    @field_validator("kex_algorithms", "host_key_algorithms", "ciphers", "macs")
    @classmethod
    def _names(cls, value: List[str]) -> List[str]:
        return _check_algorithm_names(value)

    @field_validator("host_key_seed")
    @classmethod
    def _seed(cls, value: str) -> str:
        try:
            raw = bytes.fromhex(value)
        except ValueError:
            raise ValueError("host_key_seed must be hex") from None
        if len(raw) != 32:
            raise ValueError("host_key_seed must encode 32 bytes")
        return value

    @classmethod
    def for_mode(cls, role: Role, mode: ModeId, **overrides: Any) -> "PeerConfig":
        """Config that can only negotiate ``mode``."""
        macs = [mode.mac_name] if mode.mac_name else list(DEFAULT_MACS)
        return cls(role=role, ciphers=[mode.cipher_name], macs=macs, **overrides)

    @property
    def ping_supported(self) -> bool:
        return "ping@openssh.com" in self.extensions


# ---------------------------------------------------------------------------
# scenarios and trial reports
# ---------------------------------------------------------------------------

class ScenarioName(str, Enum):
    baseline = "baseline"
    prefix_truncate = "prefix-truncate"
    ext_downgrade_chacha = "ext-downgrade-chacha"
    ext_downgrade_cbc_etm = "ext-downgrade-cbc-etm"
    rogue_extension = "rogue-extension"
    rogue_session = "rogue-session"
    suffix_truncate = "suffix-truncate"
    technique_rcv_inc = "technique-rcv-inc"
    technique_rcv_dec = "technique-rcv-dec"
    technique_snd_inc = "technique-snd-inc"
    technique_snd_dec = "technique-snd-dec"

    @property
    def is_technique(self) -> bool:
        return self.value.startswith("technique-")


class CountermeasurePeers(str, Enum):
    both = "both"
    client = "client"
    server = "server"


class ScenarioSpec(CamelModel):
    """One named scenario plus its parameters; unset fields fall back to per-scenario defaults."""

    name: ScenarioName
    mode: Optional[ModeId] = None
    n_s: int = Field(1, ge=0, le=MAX_PREFIX_DELETIONS)
    n_c: int = Field(0, ge=0, le=MAX_PREFIX_DELETIONS)
    n: int = Field(1, ge=0)
    target: Role = Role.client
    use_ping: bool = False
    strategy: Literal[1, 2] = 1
    profile: Optional[str] = None
    seed: int = Field(0, ge=0)
    trials: int = Field(1, ge=1, le=MAX_TRIALS)
    seq_modulus_bits: Optional[Literal[16, 32]] = None
    countermeasure: Countermeasure = Countermeasure.none
    countermeasure_peers: CountermeasurePeers = CountermeasurePeers.both
    suffix_after: int = Field(3, ge=0)
    attacker: Credentials = Field(
        default_factory=lambda: Credentials(user="mallory", password="mallory-password")
    )
    rogue_extensions: Dict[str, str] = Field(default_factory=lambda: {"server-sig-algs": "ssh-rsa"})
    guess_lengths: List[int] = Field(default_factory=list)

    @field_validator("profile")
    @classmethod
    def _known_profile(cls, value: Optional[str]) -> Optional[str]:
        if value is not None and value not in PROFILE_PRESETS:
            raise ValueError(f"unknown profile {value!r}; expected one of {', '.join(sorted(PROFILE_PRESETS))}")
        return value

    @field_validator("guess_lengths")
    @classmethod
    def _positive_guesses(cls, value: List[int]) -> List[int]:
        if any(length <= 0 for length in value):
            raise ValueError("guessed lengths must be positive")
        return value

    @model_validator(mode="after")
    def _technique_fits_modulus(self) -> "ScenarioSpec":
        if self.name.is_technique and self.n >= 1 << self.resolved_modulus_bits():
            raise ValueError(f"n={self.n} does not fit a 2^{self.resolved_modulus_bits()} sequence space")
        if self.name is ScenarioName.ext_downgrade_chacha and self.mode not in (None, ModeId.chacha20_poly1305):
            raise ValueError("ext-downgrade-chacha runs on ChaCha20-Poly1305 only")
        if self.name is ScenarioName.ext_downgrade_cbc_etm and self.mode not in (None, ModeId.cbc_etm):
            raise ValueError("ext-downgrade-cbc-etm runs on CBC-EtM only")
        return self

    def resolved_mode(self) -> ModeId:
        if self.mode is not None:
            return self.mode
        if self.name is ScenarioName.ext_downgrade_cbc_etm:
            return ModeId.cbc_etm
        return ModeId.chacha20_poly1305

    def resolved_profile(self) -> StrictnessProfile:
        if self.profile is not None:
            return StrictnessProfile.preset(self.profile)
        return StrictnessProfile.preset(DEFAULT_SCENARIO_PROFILES.get(self.name, "strict"))

    def resolved_modulus_bits(self) -> int:
        if self.seq_modulus_bits is not None:
            return self.seq_modulus_bits
        return 16 if self.name.is_technique else 32


DEFAULT_SCENARIO_PROFILES: Dict[ScenarioName, str] = {
    ScenarioName.ext_downgrade_chacha: "lenient",
    ScenarioName.ext_downgrade_cbc_etm: "lenient",
    ScenarioName.rogue_extension: "asyncssh",
    ScenarioName.rogue_session: "asyncssh",
    ScenarioName.technique_rcv_inc: "putty",
    ScenarioName.technique_rcv_dec: "putty",
    ScenarioName.technique_snd_inc: "putty",
    ScenarioName.technique_snd_dec: "putty",
}


class TrialReport(CamelModel):
    schema_version: str = SCHEMA_VERSION
    scenario: str
    parameters: Dict[str, Any] = Field(default_factory=dict)
    seed: int
    trials: int = Field(..., ge=1)
    successes: int = Field(..., ge=0)
    empirical_rate: float = Field(..., ge=0.0, le=1.0)
    expected_rate: float = Field(..., ge=0.0, le=1.0)
    expected_exact: Optional[str] = None
    sigma: float = Field(..., ge=0.0)
    interval_low: float = Field(..., ge=0.0, le=1.0)
    interval_high: float = Field(..., ge=0.0, le=1.0)
    p_value: float = Field(..., ge=0.0, le=1.0)
    passed: bool
    outcomes: Dict[str, int] = Field(default_factory=dict)


# ---------------------------------------------------------------------------
# scanner
# ---------------------------------------------------------------------------

class ProbeError(str, Enum):
    timeout = "timeout"
    unresolved = "unresolved"
    no_kexinit = "no_kexinit"
    blocked = "blocked"


class ServerObservation(CamelModel):
    target: str
    banner: Optional[str] = None
    kexinit: Optional[Dict[str, List[str]]] = None
    ext_info_signaled: bool = False
    extensions_offered: List[str] = Field(default_factory=list)
    handshake_completed: bool = False
    countermeasure_signals: List[str] = Field(default_factory=list)
    error: Optional[ProbeError] = None
    error_detail: Optional[str] = None


class ExposureVerdict(str, Enum):
    perfectly_exploitable = "perfectly_exploitable"
    probabilistically_exploitable = "probabilistically_exploitable"
    vulnerable_not_exploitable = "vulnerable_not_exploitable"
    not_vulnerable = "not_vulnerable"


class ExposureClassification(CamelModel):
    target: str
    preferred_family: str
    preferred_mode: str
    supported_families: List[str] = Field(default_factory=list)
    supported_modes: List[ModeId] = Field(default_factory=list)
    verdict: ExposureVerdict
    prefers_vulnerable: bool


class TableRow(CamelModel):
    name: str
    preferred_count: int
    preferred_pct: float
    supported_count: Optional[int] = None
    supported_pct: Optional[float] = None


class ExtensionRow(CamelModel):
    name: str
    count: int
    pct: float


class FleetReport(CamelModel):
    schema_version: str = SCHEMA_VERSION
    source: str
    total: int = Field(..., ge=1)
    cipher_families: List[TableRow]
    modes: List[TableRow]
    extensions: List[ExtensionRow]
    vulnerable_support_count: int
    vulnerable_support_pct: float
    both_vulnerable_count: int
    both_vulnerable_pct: float
    prefers_vulnerable_count: int
    prefers_vulnerable_pct: float
    ext_info_signaled_count: int
    verdicts: Dict[str, int] = Field(default_factory=dict)
    countermeasure_signals: Dict[str, int] = Field(default_factory=dict)
    notes: List[str] = Field(default_factory=list)


class FleetServerProfile(CamelModel):
    name: str = Field(..., min_length=1, max_length=MAX_NAME_LENGTH)
    count: int = Field(..., ge=0)
    software: str = "OpenSSH_9.5"
    ciphers: List[str] = Field(default_factory=lambda: list(DEFAULT_CIPHERS))
    macs: List[str] = Field(default_factory=lambda: list(DEFAULT_MACS))
    signal_ext_info: bool = True
    extensions: Dict[str, str] = Field(default_factory=dict)
    countermeasures: CountermeasureSettings = Field(default_factory=CountermeasureSettings)
    kexinit_missing: bool = False

    @field_validator("ciphers", "macs")
    @classmethod
    def _names(cls, value: List[str]) -> List[str]:
        return _check_algorithm_names(value)


class FleetConfig(CamelModel):
    name: str
    servers: List[FleetServerProfile] = Field(..., min_length=1)

    @property
    def total(self) -> int:
        return sum(profile.count for profile in self.servers)


class ScanSettings(CamelModel):
    live: bool = False
    acknowledged: bool = False
    rate: float = Field(10.0, gt=0.0, le=1000.0)
    concurrency: int = Field(8, ge=1, le=256)
    connect_timeout: float = Field(5.0, gt=0.0, le=120.0)
    read_timeout: float = Field(5.0, gt=0.0, le=120.0)
    blocklist: Optional[str] = None
    software: str = "sshlab_scanner_1.0 research-scan"
    complete_handshake: bool = True
