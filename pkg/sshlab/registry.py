from __future__ import annotations

import json
import os
from functools import lru_cache
from pathlib import Path
from typing import FrozenSet, Iterable, List, Optional

from pydantic import BaseModel, ConfigDict, field_validator

REGISTRY_ENV = "SSHLAB_REGISTRY"
DEFAULT_REGISTRY_PATH = Path(__file__).parent / "data" / "registry.json"

# Extension names the simulated peers and the scanner know about.
KNOWN_EXTENSIONS: List[str] = [
    "server-sig-algs",
    "publickey-hostbound@openssh.com",
    "ping@openssh.com",
    "delay-compression",
    "no-flow-control",
    "global-requests-ok",
    "elevation",
]


class MessageIdRegistry(BaseModel):
    """Set of message IDs a peer recognizes; everything else is answered with Unimplemented."""

    model_config = ConfigDict(frozen=True)

    name: str = "custom"
    known_ids: FrozenSet[int]

    @field_validator("known_ids")
    @classmethod
    def _check_range(cls, value: FrozenSet[int]) -> FrozenSet[int]:
        bad = sorted(i for i in value if not 0 <= i <= 255)
        if bad:
            raise ValueError(f"message ids must be in [0, 255], got {bad}")
        return value

    @classmethod
    def from_ids(cls, ids: Iterable[int], name: str = "custom") -> "MessageIdRegistry":
        return cls(name=name, known_ids=frozenset(ids))

    @classmethod
    def load(cls, path: Path) -> "MessageIdRegistry":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        ids: set[int] = set(raw.get("knownIds", []))
        for group in raw.get("groups", {}).values():
            ids.update(group)
        return cls(name=raw.get("name", Path(path).stem), known_ids=frozenset(ids))

    def is_known(self, message_id: int) -> bool:
        return message_id in self.known_ids

    @property
    def unknown_count(self) -> int:
        return 256 - len(self.known_ids)

    def unknown_ids(self) -> List[int]:
        return [i for i in range(256) if i not in self.known_ids]


@lru_cache(maxsize=8)
def _load_cached(path: str) -> MessageIdRegistry:
    return MessageIdRegistry.load(Path(path))


def load_registry(path: Optional[Path] = None) -> MessageIdRegistry:
    """Load a registry file, honouring ``SSHLAB_REGISTRY`` when no path is given."""
    if path is None:
        override = os.getenv(REGISTRY_ENV)
        path = Path(override).expanduser() if override else DEFAULT_REGISTRY_PATH
    return _load_cached(str(path))


def default_registry() -> MessageIdRegistry:
    return load_registry()
