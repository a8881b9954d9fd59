import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from prunetape.database import CatalogSession
from prunetape.exceptions import CatalogNotFoundError
from prunetape.models import MetricsRecord, Run, RunMetadata
from prunetape.recorder import catalog_path, history_to_csv

logger = logging.getLogger(__name__)


def discover(directory: Union[str, Path]) -> Optional[Path]:
    """Path of the run catalog under `directory`, or None."""
    target_dir = Path(directory)
    if not target_dir.is_dir():
        raise NotADirectoryError(f"{directory} is not a valid directory.")
    candidate = catalog_path(target_dir)
    if candidate.is_file():
        return candidate
    return None


class RunCatalog:
    """Read side of the run catalog: runs, their metadata and their metric rows."""

    def __init__(self, db_path: Union[str, Path]):
        self.path = Path(db_path)
        self.db_session = CatalogSession(self.path, read_only=True)

    @classmethod
    def from_directory(cls, directory: Union[str, Path]) -> "RunCatalog":
        db_path = discover(directory)
        if not db_path:
            raise CatalogNotFoundError(f"No run catalog found in: {directory}")
        return cls(db_path)

    def run_names(self) -> List[str]:
        return [run.name for run in Run.select().order_by(Run.name)]

    def _run(self, name: str) -> Run:
        run = Run.get_or_none(Run.name == name)
        if run is None:
            raise KeyError(f"Run '{name}' is not in {self.path}")
        return run

    def metadata(self, name: str) -> Dict[str, Any]:
        out: Dict[str, Any] = {}
        for item in RunMetadata.select().where(RunMetadata.run == self._run(name)).order_by(RunMetadata.key):
            try:
                out[item.key] = json.loads(item.value)
            except json.JSONDecodeError:
                out[item.key] = item.value
        return out

    def history(self, name: str) -> List[Dict[str, Any]]:
        query = MetricsRecord.select().where(MetricsRecord.run == self._run(name)).order_by(MetricsRecord.step)
        return [record.to_flat_dict() for record in query]

    def summary(self, name: str) -> Dict[str, Any]:
        run = self._run(name)
        rows = self.history(name)
        last = rows[-1] if rows else {}
        return {
            "run": name,
            "initial_checksum": run.initial_checksum,
            "rows": len(rows),
            "final_step": last.get("step"),
            "final_task_loss": last.get("task_loss"),
            "final_exact_flops": last.get("exact_flops"),
            **self.metadata(name),
        }

    def export_csv(self, out_dir: Union[str, Path]) -> List[Path]:
        """One `<run>.history.csv` per recorded run."""
        out_dir = Path(out_dir)
        written = []
        for name in self.run_names():
            written.append(history_to_csv(self.history(name), out_dir / f"{name}.history.csv"))
        logger.info(f"Exported {len(written)} run(s) to {out_dir}")
        return written

    def open(self):
        return self.__enter__()

    def close(self):
        self.__exit__(None, None, None)

    def __enter__(self):
        self.db_session.open()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.db_session.close()
