import json
import logging
import sqlite3
import time
from dataclasses import dataclass
from pathlib import Path

logger = logging.getLogger(__name__)


@dataclass
class RunRecord:
    id: str
    command: str
    config_json: str
    dataset: str
    status: str = "running"
    checkpoint: str = ""


@dataclass
class EpochLoss:
    run_id: str
    phase: str
    epoch: int
    total: float
    reconstruction: float = 0.0
    codebook: float = 0.0
    contact_map: float = 0.0
    contact: float = 0.0
    penetration: float = 0.0
    posture: float = 0.0
    position: float = 0.0
    vertices: float = 0.0
    learning_rate: float = 0.0


@dataclass
class GraspMetricRow:
    run_id: str
    grasp: str
    object: str
    in_contact: bool
    penetration_cm3: float
    displacement_cm: float
    quality: float


class Database:
    """学習・評価の実行記録(runs.db)

    実行ごとのエポック損失、把持ごとの評価値、コードブック使用頻度を保持する。
    """

    def __init__(self, db_path: str | Path, retries: int = 3):
        self.db_path = Path(db_path)
        self.retries = retries
        self.conn: sqlite3.Connection | None = None

    def __enter__(self) -> "Database":
        """WALモードで接続(学習と評価の同時実行でロック中なら再試行)"""
        for attempt in range(1, self.retries + 1):
            try:
                self.conn = sqlite3.connect(self.db_path, timeout=30.0)
                self.conn.execute("PRAGMA journal_mode=WAL")
                self.conn.row_factory = sqlite3.Row
                return self
            except sqlite3.OperationalError as e:
                if "locked" in str(e) and attempt < self.retries:
                    logger.warning(
                        "Run database %s is locked (attempt %d)", self.db_path, attempt
                    )
                    time.sleep(0.1 * attempt)
                    continue
                raise
        error_msg = f"Run database {self.db_path} needs at least one connection attempt"
        raise ValueError(error_msg)

    def __exit__(self, exc_type, exc_val, exc_tb):
        """接続を閉じる(書き込みは各メソッドのトランザクションで確定済み)"""
        if self.conn:
            self.conn.close()
            self.conn = None

    def init_db(self):
        """データベースの初期化"""
        with self.conn:
            self.conn.execute("""
                CREATE TABLE IF NOT EXISTS runs (
                    id TEXT PRIMARY KEY,
                    command TEXT NOT NULL,
                    config_json TEXT NOT NULL,
                    dataset TEXT,
                    status TEXT NOT NULL,
                    checkpoint TEXT,
                    created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
                    updated_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
                )
            """)

            self.conn.execute("""
                CREATE TABLE IF NOT EXISTS epoch_losses (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    run_id TEXT NOT NULL,
                    phase TEXT NOT NULL,
                    epoch INTEGER NOT NULL,
                    total REAL NOT NULL,
                    reconstruction REAL,
                    codebook REAL,
                    contact_map REAL,
                    contact REAL,
                    penetration REAL,
                    posture REAL,
                    position REAL,
                    vertices REAL,
                    learning_rate REAL,
                    FOREIGN KEY (run_id) REFERENCES runs(id),
                    UNIQUE(run_id, phase, epoch)
                )
            """)

            self.conn.execute("""
                CREATE TABLE IF NOT EXISTS grasp_metrics (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    run_id TEXT NOT NULL,
                    grasp TEXT NOT NULL,
                    object TEXT NOT NULL,
                    in_contact INTEGER NOT NULL,
                    penetration_cm3 REAL NOT NULL,
                    displacement_cm REAL NOT NULL,
                    quality REAL NOT NULL,
                    UNIQUE(run_id, grasp)
                )
            """)

            self.conn.execute("""
                CREATE TABLE IF NOT EXISTS codebook_usage (
                    run_id TEXT NOT NULL,
                    book TEXT NOT NULL,
                    idx INTEGER NOT NULL,
                    count INTEGER NOT NULL,
                    PRIMARY KEY (run_id, book, idx)
                )
            """)

            self.conn.execute("""
                CREATE INDEX IF NOT EXISTS idx_epoch_losses_run
                ON epoch_losses(run_id, phase, epoch)
            """)

    def start_run(self, run: RunRecord):
        """実行記録の新規追加(同じIDなら状態を更新)"""
        with self.conn:
            self.conn.execute(
                """
                INSERT INTO runs (id, command, config_json, dataset, status, checkpoint)
                VALUES (?, ?, ?, ?, ?, ?)
                ON CONFLICT(id) DO UPDATE SET
                    status = excluded.status,
                    updated_at = CURRENT_TIMESTAMP
                """,
                (
                    run.id,
                    run.command,
                    run.config_json,
                    run.dataset,
                    run.status,
                    run.checkpoint,
                ),
            )

    def finish_run(self, run_id: str, status: str, checkpoint: str = ""):
        with self.conn:
            self.conn.execute(
                """
                UPDATE runs
                SET status = ?, checkpoint = ?, updated_at = CURRENT_TIMESTAMP
                WHERE id = ?
                """,
                (status, checkpoint, run_id),
            )

    def get_run(self, run_id: str) -> RunRecord | None:
        row = self.conn.execute(
            """
            SELECT id, command, config_json, dataset, status, checkpoint
            FROM runs WHERE id = ?
            """,
            (run_id,),
        ).fetchone()
        return RunRecord(**dict(row)) if row else None

    def save_epoch_loss(self, loss: EpochLoss):
        """エポックごとの損失を保存(再開時は上書き)"""
        with self.conn:
            self.conn.execute(
                """
                INSERT OR REPLACE INTO epoch_losses
                (run_id, phase, epoch, total, reconstruction, codebook,
                 contact_map, contact, penetration, posture, position,
                 vertices, learning_rate)
                VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
                """,
                (
                    loss.run_id,
                    loss.phase,
                    loss.epoch,
                    loss.total,
                    loss.reconstruction,
                    loss.codebook,
                    loss.contact_map,
                    loss.contact,
                    loss.penetration,
                    loss.posture,
                    loss.position,
                    loss.vertices,
                    loss.learning_rate,
                ),
            )

    def get_epoch_losses(self, run_id: str, phase: str = "main") -> list[EpochLoss]:
        rows = self.conn.execute(
            """
            SELECT run_id, phase, epoch, total, reconstruction, codebook,
                   contact_map, contact, penetration, posture, position,
                   vertices, learning_rate
            FROM epoch_losses
            WHERE run_id = ? AND phase = ?
            ORDER BY epoch
            """,
            (run_id, phase),
        ).fetchall()
        return [EpochLoss(**dict(row)) for row in rows]

    def save_grasp_metrics(self, rows: list[GraspMetricRow]):
        """把持ごとの評価指標を保存"""
        with self.conn:
            for row in rows:
                self.conn.execute(
                    """
                    INSERT OR REPLACE INTO grasp_metrics
                    (run_id, grasp, object, in_contact, penetration_cm3,
                     displacement_cm, quality)
                    VALUES (?, ?, ?, ?, ?, ?, ?)
                    """,
                    (
                        row.run_id,
                        row.grasp,
                        row.object,
                        int(row.in_contact),
                        row.penetration_cm3,
                        row.displacement_cm,
                        row.quality,
                    ),
                )

    def get_grasp_metrics(self, run_id: str) -> list[GraspMetricRow]:
        rows = self.conn.execute(
            """
            SELECT run_id, grasp, object, in_contact, penetration_cm3,
                   displacement_cm, quality
            FROM grasp_metrics WHERE run_id = ? ORDER BY grasp
            """,
            (run_id,),
        ).fetchall()
        return [
            GraspMetricRow(**{**dict(row), "in_contact": bool(row["in_contact"])})
            for row in rows
        ]

    def save_codebook_usage(self, run_id: str, usage: dict[str, list[int]]):
        """コードブック使用頻度を保存"""
        with self.conn:
            self.conn.execute("DELETE FROM codebook_usage WHERE run_id = ?", (run_id,))
            for book, counts in usage.items():
                self.conn.executemany(
                    """
                    INSERT INTO codebook_usage (run_id, book, idx, count)
                    VALUES (?, ?, ?, ?)
                    """,
                    [(run_id, book, i, int(c)) for i, c in enumerate(counts)],
                )

    def get_codebook_usage(self, run_id: str) -> dict[str, list[int]]:
        rows = self.conn.execute(
            """
            SELECT book, idx, count FROM codebook_usage
            WHERE run_id = ? ORDER BY book, idx
            """,
            (run_id,),
        ).fetchall()
        usage: dict[str, list[int]] = {}
        for row in rows:
            usage.setdefault(row["book"], []).append(row["count"])
        return usage

    def get_run_config(self, run_id: str) -> dict:
        run = self.get_run(run_id)
        return json.loads(run.config_json) if run else {}
