"""
tagtriplet Cache Manager
Persistent sweep-row cache in SQLite, keyed by a digest of the cell's config
subset and input file digests.
"""

import json
import logging
from pathlib import Path
from typing import List, Optional, Union

from sqlalchemy import create_engine, text

from .evaluation import ReportRow

logger = logging.getLogger(__name__)


class SweepCache:
    """Stores finished sweep rows so an interrupted or repeated sweep resumes"""

    def __init__(self, db_path: Union[str, Path]):
        self.db_path = Path(db_path)
        self.db_path.parent.mkdir(parents=True, exist_ok=True)
        self.engine = create_engine(f"sqlite:///{self.db_path}")
        with self.engine.begin() as conn:
            conn.execute(text("""
                CREATE TABLE IF NOT EXISTS sweep_rows (
                    cell_key TEXT PRIMARY KEY,
                    tag_set TEXT NOT NULL,
                    lsi_topics INTEGER NOT NULL,
                    k INTEGER NOT NULL,
                    payload TEXT NOT NULL,
                    created_at DATETIME DEFAULT CURRENT_TIMESTAMP
                )
            """))
        logger.info(f"Sweep cache initialized: {self.db_path}")

    def get(self, cell_key: str) -> Optional[ReportRow]:
        with self.engine.connect() as conn:
            row = conn.execute(
                text("SELECT tag_set, lsi_topics, k, payload FROM sweep_rows WHERE cell_key = :key"),
                {"key": cell_key},
            ).fetchone()
        if row is None:
            return None
        payload = json.loads(row[3])
        return ReportRow(
            tag_set=row[0],
            lsi_topics=int(row[1]),
            precisions={t: float(v) for t, v in payload["precisions"].items()},
            query_counts=payload["query_counts"],
            excluded=payload["excluded"],
            k=int(row[2]),
        )

    def put(self, cell_key: str, row: ReportRow):
        """Only successful rows are cached; failed cells are retried on the next sweep"""
        if row.status != "ok":
            return
        payload = json.dumps({
            "precisions": row.precisions,
            "query_counts": row.query_counts,
            "excluded": row.excluded,
        }, sort_keys=True)
        with self.engine.begin() as conn:
            conn.execute(
                text("INSERT OR REPLACE INTO sweep_rows (cell_key, tag_set, lsi_topics, k, payload) "
                     "VALUES (:key, :tag_set, :lsi_topics, :k, :payload)"),
                {"key": cell_key, "tag_set": row.tag_set, "lsi_topics": row.lsi_topics,
                 "k": row.k, "payload": payload},
            )

    def forget(self, cell_key: str) -> bool:
        with self.engine.begin() as conn:
            result = conn.execute(text("DELETE FROM sweep_rows WHERE cell_key = :key"), {"key": cell_key})
        return result.rowcount > 0

    def keys(self) -> List[str]:
        with self.engine.connect() as conn:
            return [r[0] for r in conn.execute(text("SELECT cell_key FROM sweep_rows ORDER BY cell_key"))]

    def close(self):
        self.engine.dispose()
        logger.debug("Sweep cache closed")
