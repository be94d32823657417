"""Schema migrations for the results store."""
from __future__ import annotations

import logging
import shutil
from datetime import datetime, timezone
from pathlib import Path
from typing import Awaitable, Callable, List, Optional

import aiosqlite

logger = logging.getLogger(__name__)

# Increment when adding a migration below
CURRENT_SCHEMA_VERSION = 2
BACKUP_PREFIX = "results_backup_"
KEEP_BACKUPS = 10

MigrationStep = Callable[[aiosqlite.Connection], Awaitable[None]]


class Migration:
    """A single schema step."""

    def __init__(
        self,
        version: int,
        description: str,
        up: MigrationStep,
    ):
        self.version = version
        self.description = description
        self.up = up


async def _baseline(conn: aiosqlite.Connection) -> None:
    # tables come from the store's base schema
    return None


async def _lookup_indexes(conn: aiosqlite.Connection) -> None:
    await conn.execute("CREATE INDEX IF NOT EXISTS idx_observations_run ON observations(run_id)")
    await conn.execute("CREATE INDEX IF NOT EXISTS idx_trial_reports_scenario ON trial_reports(scenario)")


MIGRATIONS: List[Migration] = [
    Migration(version=1, description="Initial schema - baseline migration", up=_baseline),
    Migration(
        version=2,
        description="Indexes for per-run observations and per-scenario reports",
        up=_lookup_indexes,
    ),
]


class MigrationManager:
    """Applies pending migrations, backing the database file up first."""

    def __init__(self, db_path: Path, migrations: Optional[List[Migration]] = None):
        self.db_path = Path(db_path)
        self.backup_dir = self.db_path.parent / "backups"
        self.migrations = MIGRATIONS if migrations is None else migrations

    async def initialize_version_table(self, conn: aiosqlite.Connection) -> None:
        await conn.execute("""
            CREATE TABLE IF NOT EXISTS schema_version (
                version INTEGER PRIMARY KEY,
                description TEXT NOT NULL,
                applied_at TEXT NOT NULL
            )
        """)
        await conn.commit()

    async def get_current_version(self, conn: aiosqlite.Connection) -> int:
        cursor = await conn.execute("SELECT MAX(version) FROM schema_version")
        row = await cursor.fetchone()
        return row[0] if row and row[0] is not None else 0

    async def create_backup(self) -> Path:
        """Copy the database (and its WAL/SHM side files) into ``backups/``."""
        if not self.db_path.exists():
            raise FileNotFoundError(f"Database not found: {self.db_path}")

        self.backup_dir.mkdir(parents=True, exist_ok=True)
        timestamp = datetime.now(timezone.utc).strftime("%Y%m%d_%H%M%S_%f")
        backup_path = self.backup_dir / f"{BACKUP_PREFIX}{timestamp}.sqlite"
        shutil.copy2(self.db_path, backup_path)

        for suffix in ("-wal", "-shm"):
            side = Path(str(self.db_path) + suffix)
            if side.exists():
                shutil.copy2(side, Path(str(backup_path) + suffix))

        await self._cleanup_old_backups(keep=KEEP_BACKUPS)
        return backup_path

    async def _cleanup_old_backups(self, keep: int = KEEP_BACKUPS) -> None:
        if not self.backup_dir.exists():
            return
        backups = sorted(
            self.backup_dir.glob(f"{BACKUP_PREFIX}*.sqlite"),
            key=lambda p: p.stat().st_mtime,
            reverse=True,
        )
        for backup in backups[keep:]:
            try:
                backup.unlink()
                for suffix in ("-wal", "-shm"):
                    side = Path(str(backup) + suffix)
                    if side.exists():
                        side.unlink()
            except OSError:
                logger.debug("could not remove old backup %s", backup)

    async def run_migrations(self, conn: aiosqlite.Connection) -> List[str]:
        """Run every pending migration; returns ``vN: description`` for each one applied."""
        await self.initialize_version_table(conn)
        current_version = await self.get_current_version(conn)
        pending = [m for m in self.migrations if m.version > current_version]
        if not pending:
            return []

        backup_path = await self.create_backup()
        applied: List[str] = []
        try:
            for migration in sorted(pending, key=lambda m: m.version):
                await migration.up(conn)
                await conn.execute(
                    "INSERT INTO schema_version (version, description, applied_at) VALUES (?, ?, ?)",
                    (migration.version, migration.description, datetime.now(timezone.utc).isoformat()),
                )
                await conn.commit()
                applied.append(f"v{migration.version}: {migration.description}")
                logger.info("applied migration v%d", migration.version)
            return applied
        except Exception as e:
            raise RuntimeError(
                f"Migration failed: {e}. Database backup available at: {backup_path}"
            ) from e

    async def get_migration_history(self, conn: aiosqlite.Connection) -> List[dict]:
        await self.initialize_version_table(conn)
        cursor = await conn.execute(
            "SELECT version, description, applied_at FROM schema_version ORDER BY version"
        )
        rows = await cursor.fetchall()
        return [{"version": row[0], "description": row[1], "applied_at": row[2]} for row in rows]
