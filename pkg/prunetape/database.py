"""
SQLite connection handling for the run catalog.

Writers create the tables and stamp the schema version; readers open the file
query-only and refuse a catalog written with another schema.
"""

from pathlib import Path
from typing import List, Literal, Union

import peewee

from prunetape.constants import CATALOG_SCHEMA_VERSION
from prunetape.exceptions import CatalogVersionError

db_proxy = peewee.Proxy()

DbPath = Union[str, Path, Literal[":memory:"]]


class CatalogSession:
    """Binds the catalog models to one SQLite file for the duration of a `with` block."""

    def __init__(self, db_path: DbPath, read_only: bool = False):
        self.db_path = db_path if db_path == ":memory:" else Path(db_path)
        self.read_only = read_only

        pragmas = {
            "journal_mode": "wal",
            "cache_size": -1024 * 16,  # 16MB
            "foreign_keys": 1,
            "synchronous": "NORMAL",
        }
        if read_only:
            pragmas["query_only"] = 1
        self.db = peewee.SqliteDatabase(str(self.db_path), pragmas=pragmas, timeout=10)

        from prunetape.models import MetricsRecord, Run, RunMetadata

        self._models: List[type] = [Run, RunMetadata, MetricsRecord]
        self.db.bind(self._models, bind_refs=True, bind_backrefs=True)

    @property
    def schema_version(self) -> int:
        return int(self.db.pragma("user_version") or 0)

    def open(self) -> peewee.SqliteDatabase:
        if self.db.is_closed():
            self.db.connect()
        if self.read_only:
            found = self.schema_version
            if found != CATALOG_SCHEMA_VERSION:
                self.db.close()
                raise CatalogVersionError(
                    f"{self.db_path} has catalog schema {found}, this version reads {CATALOG_SCHEMA_VERSION}"
                )
        else:
            self.db.create_tables(self._models, safe=True)
            self.db.pragma("user_version", CATALOG_SCHEMA_VERSION)
        return self.db

    def close(self) -> None:
        if not self.db.is_closed():
            self.db.close()

    def __enter__(self) -> peewee.SqliteDatabase:
        return self.open()

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()
