"""Results store: scan runs, their observations and Monte-Carlo trial reports in SQLite."""
from __future__ import annotations

import asyncio
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence
from uuid import uuid4

import aiosqlite

from .migrations import MigrationManager
from .models import FleetReport, ServerObservation, TrialReport

logger = logging.getLogger(__name__)

DATA_DIR_ENV = "SSHLAB_DATA_DIR"
DB_FILENAME = "results.sqlite"


def default_data_dir() -> Path:
    override = os.getenv(DATA_DIR_ENV)
    if override:
        return Path(override).expanduser()

    if sys.platform == "win32":
        base = os.getenv("LOCALAPPDATA")
        root = Path(base) if base else Path.home() / "AppData" / "Local"
    elif sys.platform == "darwin":
        root = Path.home() / "Library" / "Application Support"
    else:
        base = os.getenv("XDG_DATA_HOME")
        root = Path(base) if base else Path.home() / ".local" / "share"

    return root / "sshlab"


SCHEMA = """
PRAGMA journal_mode = WAL;
PRAGMA foreign_keys = ON;

CREATE TABLE IF NOT EXISTS scan_runs (
    id TEXT PRIMARY KEY,
    source TEXT NOT NULL,
    total INTEGER NOT NULL,
    vulnerable_support_pct REAL NOT NULL,
    report TEXT NOT NULL,
    created_at TEXT NOT NULL DEFAULT (datetime('now'))
);

CREATE TABLE IF NOT EXISTS observations (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    run_id TEXT NOT NULL REFERENCES scan_runs(id) ON DELETE CASCADE,
    target TEXT NOT NULL,
    error TEXT,
    payload TEXT NOT NULL
);

CREATE TABLE IF NOT EXISTS trial_reports (
    id TEXT PRIMARY KEY,
    scenario TEXT NOT NULL,
    seed INTEGER NOT NULL,
    trials INTEGER NOT NULL,
    successes INTEGER NOT NULL,
    passed INTEGER NOT NULL,
    report TEXT NOT NULL,
    created_at TEXT NOT NULL DEFAULT (datetime('now'))
);
"""


class ResultStore:
    """Lazily opened aiosqlite store; ``initialize`` is idempotent and safe to race."""

    def __init__(self, data_dir: Optional[Path] = None) -> None:
        self.data_dir = Path(data_dir) if data_dir is not None else default_data_dir()
        self._connection: Optional[aiosqlite.Connection] = None
        self._state: str = "cold"
        self._init_lock: Optional[asyncio.Lock] = None

    async def initialize(self) -> None:
        # created lazily so the store can be built outside a running loop
        if self._init_lock is None:
            self._init_lock = asyncio.Lock()

        async with self._init_lock:
            if self._state in ("ready", "initializing"):
                return

            self._state = "initializing"
            try:
                self.data_dir.mkdir(parents=True, exist_ok=True)
                self._connection = await aiosqlite.connect(self.path)
                self._connection.row_factory = aiosqlite.Row
                await self._connection.executescript(SCHEMA)
                await self._connection.commit()

                applied = await MigrationManager(self.path).run_migrations(self._connection)
                if applied:
                    logger.info("applied migrations: %s", ", ".join(applied))
                await self._connection.commit()
            except Exception:
                self._state = "error"
                raise
            else:
                self._state = "ready"

    async def close(self) -> None:
        if self._connection is not None:
            await self._connection.close()
            self._connection = None
        if self._state != "error":
            self._state = "closed"

    async def __aenter__(self) -> "ResultStore":
        await self.initialize()
        return self

    async def __aexit__(self, *exc: Any) -> None:
        await self.close()

    @property
    def path(self) -> Path:
        return self.data_dir / DB_FILENAME

    @property
    def state(self) -> str:
        return self._state

    def _require_connection(self) -> aiosqlite.Connection:
        if self._connection is None:
            raise RuntimeError("result store not initialized")
        return self._connection

    async def record_scan(self, report: FleetReport, observations: Sequence[ServerObservation]) -> str:
        """Persist one fleet report with its observations; returns the run id."""
        conn = self._require_connection()
        run_id = str(uuid4())
        await conn.execute(
            """
            INSERT INTO scan_runs (id, source, total, vulnerable_support_pct, report, created_at)
            VALUES (?, ?, ?, ?, ?, ?)
            """,
            (
                run_id,
                report.source,
                report.total,
                report.vulnerable_support_pct,
                report.model_dump_json(by_alias=True),
                _utc_now(),
            ),
        )
        await conn.executemany(
            "INSERT INTO observations (run_id, target, error, payload) VALUES (?, ?, ?, ?)",
            [
                (run_id, o.target, o.error.value if o.error else None, o.model_dump_json(by_alias=True))
                for o in observations
            ],
        )
        await conn.commit()
        logger.info("recorded scan run %s (%d observations)", run_id, len(observations))
        return run_id

    async def list_scans(self, limit: int = 50) -> List[Dict[str, Any]]:
        conn = self._require_connection()
        cursor = await conn.execute(
            """
            SELECT r.id, r.source, r.total, r.vulnerable_support_pct, r.created_at,
                   COUNT(o.id) AS observation_count
            FROM scan_runs AS r
            LEFT JOIN observations AS o ON o.run_id = r.id
            GROUP BY r.id
            ORDER BY datetime(r.created_at) DESC, r.id DESC
            LIMIT ?
            """,
            (limit,),
        )
        rows = await cursor.fetchall()
        return [
            {
                "id": row["id"],
                "source": row["source"],
                "total": row["total"],
                "vulnerableSupportPct": row["vulnerable_support_pct"],
                "observations": row["observation_count"],
                "createdAt": row["created_at"],
            }
            for row in rows
        ]

    async def get_scan(self, run_id: str) -> Optional[FleetReport]:
        conn = self._require_connection()
        cursor = await conn.execute("SELECT report FROM scan_runs WHERE id = ?", (run_id,))
        row = await cursor.fetchone()
        if row is None:
            return None
        return FleetReport.model_validate_json(row["report"])

    async def list_observations(self, run_id: str) -> List[ServerObservation]:
        conn = self._require_connection()
        cursor = await conn.execute(
            "SELECT payload FROM observations WHERE run_id = ? ORDER BY id", (run_id,)
        )
        return [ServerObservation.model_validate_json(row["payload"]) for row in await cursor.fetchall()]

    async def record_trial_report(self, report: TrialReport) -> str:
        conn = self._require_connection()
        report_id = str(uuid4())
        await conn.execute(
            """
            INSERT INTO trial_reports (id, scenario, seed, trials, successes, passed, report, created_at)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?)
            """,
            (
                report_id,
                report.scenario,
                report.seed,
                report.trials,
                report.successes,
                int(report.passed),
                report.model_dump_json(by_alias=True),
                _utc_now(),
            ),
        )
        await conn.commit()
        return report_id

    async def list_trial_reports(self, scenario: Optional[str] = None, limit: int = 50) -> List[TrialReport]:
        conn = self._require_connection()
        if scenario is None:
            cursor = await conn.execute(
                "SELECT report FROM trial_reports ORDER BY datetime(created_at) DESC, id DESC LIMIT ?",
                (limit,),
            )
        else:
            cursor = await conn.execute(
                """
                SELECT report FROM trial_reports WHERE scenario = ?
                ORDER BY datetime(created_at) DESC, id DESC LIMIT ?
                """,
                (scenario, limit),
            )
        return [TrialReport.model_validate_json(row["report"]) for row in await cursor.fetchall()]


async def bootstrap(data_dir: Optional[Path] = None) -> Path:
    store = ResultStore(data_dir)
    await store.initialize()
    await store.close()
    return store.path


def sync_bootstrap(data_dir: Optional[Path] = None) -> Path:
    return asyncio.run(bootstrap(data_dir))


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()
