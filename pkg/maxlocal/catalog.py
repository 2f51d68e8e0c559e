import json
import logging
import os
import uuid
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import polars as pl
from deltalake import DeltaTable, write_deltalake

from maxlocal.base import BaseLabCatalog
from maxlocal.constants import CATALOG_TABLE_NAME, RNG_MIXER, CatalogEntryType
from maxlocal.models import BaseCatalogEntry, LabEntry, RunEntry

logger = logging.getLogger(__name__)

# Mapping for dynamic model resolution
ENTRY_TYPE_TO_MODEL = {
    CatalogEntryType.LAB_CONFIG.value: LabEntry,
    CatalogEntryType.RUN.value: RunEntry,
}

CORE_FIELDS = ["id", "name", "entry_type", "created_at", "updated_at"]
CATALOG_SCHEMA = {
    "id": pl.String,
    "name": pl.String,
    "entry_type": pl.String,
    "created_at": pl.Datetime,
    "updated_at": pl.Datetime,
    "properties": pl.String,  # JSON serialized properties
}


class RunCatalog(BaseLabCatalog):
    """
    Manages the catalog of a lab directory. The catalog is stored as a Delta
    table with one row for the lab config and one row per experiment run.
    """

    def __init__(self, path: str, storage_options: Optional[Dict[str, Any]] = None):
        """
        Initialize the catalog manager.

        Args:
            path: Base path of the lab
            storage_options: Options for the storage backend
        """
        self.path = path
        self.catalog_path = f"{path}/{CATALOG_TABLE_NAME}"
        self.storage_options = storage_options or {}

    @classmethod
    def create_catalog(
        cls, path: str, storage_options: Optional[Dict[str, Any]] = None
    ) -> "RunCatalog":
        catalog = cls(path, storage_options)
        catalog._ensure_catalog_exists()
        return catalog

    @classmethod
    def open_catalog(
        cls, path: str, storage_options: Optional[Dict[str, Any]] = None
    ) -> "RunCatalog":
        catalog = cls(path, storage_options)
        if not catalog._catalog_exists():
            raise ValueError(f"No catalog found at {path}/{CATALOG_TABLE_NAME}")
        return catalog

    def _catalog_exists(self) -> bool:
        try:
            DeltaTable(self.catalog_path, storage_options=self.storage_options)
            return True
        except Exception:
            return False

    def _ensure_catalog_exists(self) -> None:
        if self._catalog_exists():
            return

        write_deltalake(
            self.catalog_path,
            pl.DataFrame(schema=CATALOG_SCHEMA),
            storage_options=self.storage_options,
        )

    def _read(self) -> pl.DataFrame:
        dt = DeltaTable(self.catalog_path, storage_options=self.storage_options)
        return pl.read_delta(dt)

    def _write(self, df: pl.DataFrame, mode: str) -> None:
        df.write_delta(self.catalog_path, mode=mode, storage_options=self.storage_options)

    @staticmethod
    def _to_row(entry: BaseCatalogEntry) -> Dict[str, Any]:
        # Timestamps stay datetimes; everything else goes into the JSON blob.
        properties = entry.model_dump(mode="json", exclude=set(CORE_FIELDS))
        return {
            "id": entry.id,
            "name": entry.name,
            "entry_type": entry.entry_type,
            "created_at": entry.created_at,
            "updated_at": entry.updated_at,
            "properties": json.dumps(properties),
        }

    def add_entry(self, entry: BaseCatalogEntry) -> str:
        entry.id = entry.id or str(uuid.uuid4())
        self._write(pl.DataFrame([self._to_row(entry)], schema=CATALOG_SCHEMA), "append")
        logger.debug(f"Catalog: added {entry.entry_type} '{entry.name}'")
        return entry.id

    def _parse_entry(self, row: Dict[str, Any]) -> BaseCatalogEntry:
        entry_type = row["entry_type"]
        model_class = ENTRY_TYPE_TO_MODEL.get(entry_type, BaseCatalogEntry)
        properties = json.loads(row["properties"])
        entry_data = {
            "id": row["id"],
            "name": row["name"],
            "entry_type": entry_type,
            "created_at": row["created_at"],
            "updated_at": row["updated_at"],
            **properties,
        }
        return model_class(**entry_data)

    def get_entry_by_name(
        self, name: str, entry_type: str
    ) -> Optional[BaseCatalogEntry]:
        result = self._read().filter(
            (pl.col("name") == name) & (pl.col("entry_type") == entry_type)
        )
        if len(result) == 0:
            return None
        # Latest row wins when a run name was recorded more than once.
        return self._parse_entry(result.sort("updated_at").row(-1, named=True))

    def list_entries(self, entry_type: Optional[str] = None) -> List[BaseCatalogEntry]:
        """
        List catalog entries, optionally filtered by type.

        Args:
            entry_type: Filter entries by type

        Returns:
            List[BaseCatalogEntry]: List of catalog entries
        """
        catalog_df = self._read()
        if entry_type:
            catalog_df = catalog_df.filter(pl.col("entry_type") == entry_type)
        catalog_df = catalog_df.sort("created_at")
        return [self._parse_entry(row) for row in catalog_df.iter_rows(named=True)]

    def update_entry(
        self, entry_name: str, entry_type: str, properties: Dict[str, Any]
    ) -> bool:
        """
        Update an existing catalog entry using a Delta Lake merge.

        Args:
            entry_name: Name of the entry to update
            entry_type: Type of the entry
            properties: New properties to set

        Returns:
            bool: True if the entry was updated, False if not found
        """
        current_entry = self.get_entry_by_name(entry_name, entry_type)
        if not current_entry:
            return False

        current_props = current_entry.model_dump(mode="json", exclude=set(CORE_FIELDS))
        current_props.update(properties)
        update_df = pl.DataFrame(
            [
                {
                    "id": current_entry.id,
                    "updated_at": datetime.now(),
                    "properties": json.dumps(current_props),
                }
            ]
        )
        self._merge(update_df).when_matched_update_all().execute()
        return True

    def _merge(self, source: pl.DataFrame):
        return source.write_delta(
            self.catalog_path,
            mode="merge",
            delta_merge_options={
                "predicate": "s.id = t.id",
                "source_alias": "s",
                "target_alias": "t",
            },
            storage_options=self.storage_options,
        )

    def delete_entry(self, entry_name: str, entry_type: Optional[str] = None) -> bool:
        """Remove every row with this name (of this type, when given)."""
        catalog_df = self._read()
        doomed = pl.col("name") == entry_name
        if entry_type:
            doomed = doomed & (pl.col("entry_type") == entry_type)
        kept = catalog_df.filter(~doomed)
        if len(kept) == len(catalog_df):
            return False
        self._write(kept, "overwrite")
        return True

    def get_or_create_lab_config(self) -> Tuple[str, LabEntry]:
        config = self.get_lab_config()
        if config:
            return config.id, config

        config = LabEntry(
            lab_id=str(uuid.uuid4()),
            numpy_version=np.__version__,
            name=os.path.basename(os.path.normpath(self.path)) or "maxlocal",
        )
        config_id = self.add_entry(config)
        logger.info(f"Created lab {config.lab_id} at {self.path}")
        return config_id, config

    def get_lab_config(self) -> Optional[LabEntry]:
        """
        Retrieve the lab configuration entry, refusing a lab written with
        another RNG mixer.

        Returns:
            Optional[LabEntry]: The lab configuration if found, else None.
        """
        result = self._read().filter(
            pl.col("entry_type") == CatalogEntryType.LAB_CONFIG.value
        )
        if len(result) == 0:
            return None
        config = self._parse_entry(result.row(0, named=True))
        if config.rng_mixer != RNG_MIXER:
            raise ValueError(
                f"Lab at {self.path} uses RNG mixer {config.rng_mixer}, "
                f"this build uses {RNG_MIXER}."
            )
        return config

    def record_run(self, run: RunEntry) -> RunEntry:
        if self.get_entry_by_name(run.name, CatalogEntryType.RUN.value):
            self.update_entry(
                run.name,
                CatalogEntryType.RUN.value,
                {"status": run.status, "config": run.config},
            )
            return self.get_entry_by_name(run.name, CatalogEntryType.RUN.value)
        self.add_entry(run)
        return run

    def finish_run(self, run: RunEntry, **properties: Any) -> RunEntry:
        self.update_entry(run.name, CatalogEntryType.RUN.value, properties)
        return self.get_entry_by_name(run.name, CatalogEntryType.RUN.value)

    def archive_report(self, run: RunEntry, path: Path, df: pl.DataFrame) -> RunEntry:
        """
        Archive a run's report table as a Delta dataset.

        Args:
            run: Run entry the table belongs to
            path: Path of the Delta dataset
            df: Report table

        Returns:
            RunEntry: The updated run entry
        """
        # Delta has no null type.
        df = df.with_columns(
            [pl.col(name).cast(pl.String) for name, dtype in df.schema.items() if dtype == pl.Null]
        )
        df.write_delta(
            str(path),
            mode="overwrite",
            storage_options=self.storage_options,
        )
        return self.finish_run(run, report_table=str(path))

    def read_report(self, run_name: str) -> pl.DataFrame:
        run = self.get_entry_by_name(run_name, CatalogEntryType.RUN.value)
        if run is None or run.report_table is None:
            raise ValueError(f"Run '{run_name}' has no archived report.")
        return pl.read_delta(
            DeltaTable(run.report_table, storage_options=self.storage_options)
        )
