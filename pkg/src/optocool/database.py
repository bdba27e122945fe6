"""Run catalog: records every scenario run, its artifacts and headline numbers."""

import uuid
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional

import duckdb
from duckdb import DuckDBPyConnection
from pydantic import BaseModel, Field


def _utcnow() -> datetime:
    return datetime.now(timezone.utc).replace(tzinfo=None)


class RunRecord(BaseModel):
    id: str = Field(default_factory=lambda: uuid.uuid4().hex)
    scenario: str
    mode: str
    config_sha256: str
    seed: Optional[int] = None
    status: str = "running"
    exit_code: Optional[int] = None
    started_at: datetime = Field(default_factory=_utcnow)
    finished_at: Optional[datetime] = None
    out_dir: str = ""
    message: str = ""


class ArtifactRecord(BaseModel):
    run_id: str
    path: str
    sha256: str
    bytes: int = Field(..., ge=0)


class RunCatalog:
    """Manages the DuckDB run catalog (in-memory unless a path is given)."""

    def __init__(self, db_path: Optional[str] = None):
        self.db_path = db_path or ":memory:"
        self.connection: DuckDBPyConnection = duckdb.connect(self.db_path)
        self._create_tables()

    def _create_tables(self) -> None:
        self.connection.execute(
            """
            CREATE TABLE IF NOT EXISTS runs (
                id VARCHAR PRIMARY KEY,
                scenario VARCHAR NOT NULL,
                mode VARCHAR NOT NULL,
                config_sha256 VARCHAR NOT NULL,
                seed UBIGINT,
                status VARCHAR NOT NULL,
                exit_code INTEGER,
                started_at TIMESTAMP NOT NULL,
                finished_at TIMESTAMP,
                out_dir VARCHAR NOT NULL,
                message VARCHAR NOT NULL DEFAULT ''
            )
        """
        )

        self.connection.execute(
            """
            CREATE TABLE IF NOT EXISTS artifacts (
                run_id VARCHAR NOT NULL,
                path VARCHAR NOT NULL,
                sha256 VARCHAR NOT NULL,
                bytes BIGINT NOT NULL,
                PRIMARY KEY (run_id, path)
            )
        """
        )

        self.connection.execute(
            """
            CREATE TABLE IF NOT EXISTS metrics (
                run_id VARCHAR NOT NULL,
                name VARCHAR NOT NULL,
                value DOUBLE,
                PRIMARY KEY (run_id, name)
            )
        """
        )

    def start_run(self, record: RunRecord) -> None:
        self.connection.execute(
            """
            INSERT OR REPLACE INTO runs
            (id, scenario, mode, config_sha256, seed, status, exit_code,
             started_at, finished_at, out_dir, message)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
        """,
            (
                record.id,
                record.scenario,
                record.mode,
                record.config_sha256,
                record.seed,
                record.status,
                record.exit_code,
                record.started_at,
                record.finished_at,
                record.out_dir,
                record.message,
            ),
        )

    def finish_run(self, run_id: str, exit_code: int, message: str = "") -> None:
        """Marks a run finished; status is "ok" for exit code 0, else "failed"."""
        self.connection.execute(
            """
            UPDATE runs
            SET status = ?, exit_code = ?, finished_at = ?, message = ?
            WHERE id = ?
            """,
            (
                "ok" if exit_code == 0 else "failed",
                exit_code,
                _utcnow(),
                message,
                run_id,
            ),
        )

    def add_artifact(self, artifact: ArtifactRecord) -> None:
        self.connection.execute(
            """
            INSERT OR REPLACE INTO artifacts (run_id, path, sha256, bytes)
            VALUES (?, ?, ?, ?)
        """,
            (artifact.run_id, artifact.path, artifact.sha256, artifact.bytes),
        )

    def add_metrics(self, run_id: str, metrics: Dict[str, float]) -> None:
        for name, value in metrics.items():
            self.connection.execute(
                """
                INSERT OR REPLACE INTO metrics (run_id, name, value)
                VALUES (?, ?, ?)
            """,
                (run_id, name, float(value)),
            )

    def get_run(self, run_id: str) -> Optional[RunRecord]:
        result = self.connection.execute(
            """
            SELECT id, scenario, mode, config_sha256, seed, status, exit_code,
                   started_at, finished_at, out_dir, message
            FROM runs WHERE id = ?
        """,
            (run_id,),
        ).fetchone()

        if result:
            return self._to_record(result)
        return None

    def match_run_ids(self, prefix: str) -> List[str]:
        """Run ids starting with ``prefix``, as printed by the short listing."""
        results = self.connection.execute(
            "SELECT id FROM runs WHERE starts_with(id, ?) ORDER BY id", (prefix,)
        ).fetchall()
        return [r[0] for r in results]

    def list_runs(self, scenario: Optional[str] = None, limit: int = 20) -> List[RunRecord]:
        if scenario:
            results = self.connection.execute(
                """
                SELECT id, scenario, mode, config_sha256, seed, status, exit_code,
                       started_at, finished_at, out_dir, message
                FROM runs WHERE scenario = ?
                ORDER BY started_at DESC LIMIT ?
            """,
                (scenario, limit),
            ).fetchall()
        else:
            results = self.connection.execute(
                """
                SELECT id, scenario, mode, config_sha256, seed, status, exit_code,
                       started_at, finished_at, out_dir, message
                FROM runs ORDER BY started_at DESC LIMIT ?
            """,
                (limit,),
            ).fetchall()

        return [self._to_record(result) for result in results]

    def get_artifacts(self, run_id: str) -> List[ArtifactRecord]:
        results = self.connection.execute(
            """
            SELECT run_id, path, sha256, bytes FROM artifacts
            WHERE run_id = ? ORDER BY path
        """,
            (run_id,),
        ).fetchall()

        return [
            ArtifactRecord(run_id=r[0], path=r[1], sha256=r[2], bytes=r[3])
            for r in results
        ]

    def get_metrics(self, run_id: str) -> Dict[str, float]:
        results = self.connection.execute(
            """
            SELECT name, value FROM metrics WHERE run_id = ? ORDER BY name
        """,
            (run_id,),
        ).fetchall()

        return {name: value for name, value in results}

    def get_catalog_stats(self) -> Dict[str, Any]:
        total_runs = self.connection.execute("SELECT COUNT(*) FROM runs").fetchone()[0]
        failed_runs = self.connection.execute(
            "SELECT COUNT(*) FROM runs WHERE status = 'failed'"
        ).fetchone()[0]
        total_artifacts = self.connection.execute(
            "SELECT COUNT(*) FROM artifacts"
        ).fetchone()[0]

        return {
            "total_runs": total_runs,
            "failed_runs": failed_runs,
            "total_artifacts": total_artifacts,
        }

    @staticmethod
    def _to_record(result: Any) -> RunRecord:
        return RunRecord(
            id=result[0],
            scenario=result[1],
            mode=result[2],
            config_sha256=result[3],
            seed=result[4],
            status=result[5],
            exit_code=result[6],
            started_at=result[7],
            finished_at=result[8],
            out_dir=result[9],
            message=result[10],
        )

    def close(self) -> None:
        self.connection.close()

    def __enter__(self) -> "RunCatalog":
        return self

    def __exit__(self, exc_type: Any, exc_val: Any, exc_tb: Any) -> None:
        self.close()
