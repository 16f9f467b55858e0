import logging
import os
import sqlite3
from contextlib import closing

from configs import settings

SCHEMA = """
CREATE TABLE IF NOT EXISTS ablation_runs (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    batch TEXT NOT NULL,
    label TEXT NOT NULL,
    mode TEXT NOT NULL CHECK (mode IN ('classical_ema', 'tmr', 'tmr_rd')),
    cascade_enabled INTEGER NOT NULL,
    uncertainty_enabled INTEGER NOT NULL,
    status TEXT NOT NULL CHECK (status IN ('OK', 'FAILED')),
    sup_map REAL,
    ap50 REAL,
    map REAL,
    error TEXT,
    config TEXT,
    created_at TEXT DEFAULT (datetime('now')),
    UNIQUE (batch, label)
);

CREATE INDEX IF NOT EXISTS idx_ablation_runs_batch ON ablation_runs(batch);
"""


class Database:
    """Connection factory for the results ledger.

    ``path`` overrides TMRD_RESULTS_DB (tests point it at a temporary file).
    """

    path = None

    @classmethod
    def connect(cls):
        path = cls.path or settings.results_db()
        folder = os.path.dirname(path)
        if folder and not os.path.exists(folder):
            os.makedirs(folder)
        conn = sqlite3.connect(path)
        conn.row_factory = sqlite3.Row
        conn.executescript(SCHEMA)
        return conn


class AblationRecord:
    def __init__(self, **kwargs):
        self.id = kwargs.get("id")
        self.batch = kwargs.get("batch")
        self.label = kwargs.get("label")
        self.mode = kwargs.get("mode")
        self.cascade_enabled = bool(kwargs.get("cascade_enabled"))
        self.uncertainty_enabled = bool(kwargs.get("uncertainty_enabled"))
        self.status = kwargs.get("status")
        self.sup_map = kwargs.get("sup_map")
        self.ap50 = kwargs.get("ap50")
        self.map = kwargs.get("map")
        self.error = kwargs.get("error")
        self.config = kwargs.get("config")
        self.created_at = kwargs.get("created_at")

    @property
    def failed(self):
        return self.status == "FAILED"

    @staticmethod
    def create(batch, label, mode, cascade_enabled, uncertainty_enabled, status,
               sup_map=None, ap50=None, map=None, error=None, config=None):
        """Store one ablation member's outcome.

        Returns:
            AblationRecord: The stored record.

        Raises:
            sqlite3.IntegrityError: The label already exists in this batch.
        """
        with closing(Database.connect()) as conn:
            with conn:
                conn.execute(
                    "INSERT INTO ablation_runs (batch, label, mode, cascade_enabled, uncertainty_enabled, "
                    "status, sup_map, ap50, map, error, config) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)",
                    (batch, label, mode, int(cascade_enabled), int(uncertainty_enabled), status,
                     sup_map, ap50, map, error, config),
                )
        logging.info(f"Recorded ablation member {label} of batch {batch}: {status}.")
        return AblationRecord.get(batch, label)

    @staticmethod
    def get(batch, label):
        with closing(Database.connect()) as conn:
            row = conn.execute(
                "SELECT * FROM ablation_runs WHERE batch = ? AND label = ?", (batch, label)
            ).fetchone()
        return AblationRecord(**dict(row)) if row else None

    @staticmethod
    def get_by_batch(batch):
        """All members of one ablation batch, in insertion order."""
        with closing(Database.connect()) as conn:
            rows = conn.execute(
                "SELECT * FROM ablation_runs WHERE batch = ? ORDER BY id", (batch,)
            ).fetchall()
        return [AblationRecord(**dict(row)) for row in rows]
