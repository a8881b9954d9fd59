import csv
import json
import logging
import time
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

from prunetape.constants import CATALOG_DB_NAME, CATALOG_DIR_NAME, RECORDER_BATCH_SIZE
from prunetape.database import CatalogSession
from prunetape.models import MetricsRecord, Run, RunMetadata
from prunetape.schemas import MetricsRow

logger = logging.getLogger(__name__)

SCALAR_COLUMNS = ("step", "phase", "lambda", "lr", "task_loss", "surrogate", "exact_flops")


def catalog_path(directory: Union[str, Path]) -> Path:
    return Path(directory) / CATALOG_DIR_NAME / CATALOG_DB_NAME


def history_to_csv(rows: Sequence[Mapping[str, Any]], path: Union[str, Path]) -> Path:
    """Write flat metric rows with a header; every row must have the header's columns."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns: List[str] = list(rows[0].keys()) if rows else list(SCALAR_COLUMNS)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for i, row in enumerate(rows):
            if list(row.keys()) != columns:
                raise ValueError(f"Row {i} of {path.name} has columns {list(row.keys())}, expected {columns}")
            writer.writerow([row[c] for c in columns])
    return path


class HistoryRecorder:
    """
    Streams MetricsRows of one run into the directory's run catalog.

    Rows are buffered and inserted in batches; `close` flushes the buffer and
    stores the summary key/values.
    """

    def __init__(
        self,
        directory: Union[str, Path],
        run_name: str,
        initial_checksum: str = "",
        metadata: Optional[Mapping[str, Any]] = None,
        overwrite: bool = True,
    ):
        self.directory = Path(directory)
        self.db_path = catalog_path(self.directory)
        self.db_path.parent.mkdir(parents=True, exist_ok=True)
        self.session = CatalogSession(self.db_path)
        self.db = self.session.open()

        existing = Run.get_or_none(Run.name == run_name)
        if existing is not None:
            if not overwrite:
                self.session.close()
                raise FileExistsError(f"Run '{run_name}' already recorded in {self.db_path}")
            existing.delete_instance(recursive=True)

        self.run = Run.create(name=run_name, initial_checksum=initial_checksum, created_at=int(time.time()))
        self._buffer: List[Dict[str, Any]] = []
        self._batch_size = RECORDER_BATCH_SIZE
        self.rows_written = 0
        if metadata:
            self.set_metadata(metadata)

    def append(self, row: MetricsRow) -> None:
        flat = row.as_flat_dict()
        extra = {k: v for k, v in flat.items() if k not in SCALAR_COLUMNS}
        self._buffer.append(
            {
                "run": self.run.id,
                "step": row.step,
                "phase": row.phase.value,
                "lam": row.lam,
                "lr": row.lr,
                "task_loss": row.task_loss,
                "surrogate": row.surrogate,
                "exact_flops": row.exact_flops,
                "extra": json.dumps(extra),
            }
        )
        if len(self._buffer) >= self._batch_size:
            self._flush_buffer()

    def _flush_buffer(self) -> None:
        if not self._buffer:
            return
        with self.db.atomic():
            MetricsRecord.insert_many(self._buffer).execute()
        self.rows_written += len(self._buffer)
        logger.debug(f"Flushed {len(self._buffer)} row(s) of run '{self.run.name}'")
        self._buffer = []

    def set_metadata(self, values: Mapping[str, Any]) -> None:
        with self.db.atomic():
            for key, value in values.items():
                text = value if isinstance(value, str) else json.dumps(value)
                (
                    RunMetadata.insert(run=self.run.id, key=key, value=text)
                    .on_conflict(conflict_target=[RunMetadata.run, RunMetadata.key], update={RunMetadata.value: text})
                    .execute()
                )

    def close(self, summary: Optional[Mapping[str, Any]] = None) -> None:
        try:
            self._flush_buffer()
            if summary:
                self.set_metadata(summary)
        finally:
            self.session.close()
        logger.info(f"Run '{self.run.name}': {self.rows_written} row(s) recorded in {self.db_path}")

    def __enter__(self) -> "HistoryRecorder":
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()
