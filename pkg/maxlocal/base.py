from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Dict, List, Optional

import polars as pl

from maxlocal.models import (
    BaseCatalogEntry,
    ExperimentConfig,
    ExperimentSummary,
    LabEntry,
    RunEntry,
)


class BaseLabCatalog(ABC):
    """Base class for lab catalog implementations."""

    path: str

    @classmethod
    @abstractmethod
    def create_catalog(
        cls, path: Path, storage_options: Optional[Dict[str, Any]] = None
    ) -> "BaseLabCatalog":
        """Create a new catalog at the specified path."""
        pass

    @classmethod
    @abstractmethod
    def open_catalog(
        cls, path: Path, storage_options: Optional[Dict[str, Any]] = None
    ) -> "BaseLabCatalog":
        """Open an existing catalog at the specified path."""
        pass

    @abstractmethod
    def add_entry(self, entry: BaseCatalogEntry) -> str:
        """Add a new entry to the catalog."""
        pass

    @abstractmethod
    def get_entry_by_name(
        self, name: str, entry_type: str
    ) -> Optional[BaseCatalogEntry]:
        """Get an entry from the catalog by name and type."""
        pass

    @abstractmethod
    def list_entries(self, entry_type: Optional[str] = None) -> List[BaseCatalogEntry]:
        """List all entries in the catalog, optionally filtered by type."""
        pass

    @abstractmethod
    def update_entry(
        self, entry_name: str, entry_type: str, properties: Dict[str, Any]
    ) -> bool:
        """Update an existing catalog entry."""
        pass

    @abstractmethod
    def delete_entry(self, entry_name: str, entry_type: Optional[str] = None) -> bool:
        """Delete an entry from the catalog."""
        pass

    @abstractmethod
    def archive_report(self, run: RunEntry, path: Path, df: pl.DataFrame) -> RunEntry:
        """
        Archive a run's report table as a Delta dataset and record its path on
        the run entry.
        """
        pass

    @abstractmethod
    def get_or_create_lab_config(self) -> tuple[str, LabEntry]:
        """
        Get the lab config or create it if the catalog has none.

        Returns:
            tuple[str, LabEntry]: Config ID and config entry
        """
        pass

    @abstractmethod
    def get_lab_config(self) -> Optional[LabEntry]:
        pass


class BaseLocalTimeLab(ABC):
    path: str

    @classmethod
    @abstractmethod
    def create(cls, path: Path | str) -> "BaseLocalTimeLab":
        pass

    @classmethod
    @abstractmethod
    def open(cls, path: Path | str) -> "BaseLocalTimeLab":
        pass

    @abstractmethod
    def run(self, config: ExperimentConfig) -> ExperimentSummary:
        pass

    @abstractmethod
    def read_report(self, name: str) -> pl.DataFrame:
        pass


class BaseLabStorage(ABC):
    path: str

    @staticmethod
    @abstractmethod
    def create_storage(
        storage_type: str,
        path: str,
        **kwargs,
    ) -> "BaseLabStorage":
        pass

    @abstractmethod
    def ensure_directories(self) -> None: ...

    @abstractmethod
    def get_storage_options(self) -> dict:
        """Return storage-specific options for integration with Polars."""
        pass

    @abstractmethod
    def run_dir(self, name: str) -> Path: ...

    @abstractmethod
    def write_table(self, df: pl.DataFrame, name: str, filename: str) -> Path: ...

    @abstractmethod
    def write_summary(self, summary: ExperimentSummary, name: str) -> Path: ...


class BaseConfigPreprocessor(ABC):
    @abstractmethod
    def validate_dimension(self, config: ExperimentConfig) -> None: ...

    @abstractmethod
    def validate_beta(self, config: ExperimentConfig) -> None: ...

    @abstractmethod
    def validate_kappa(self, config: ExperimentConfig) -> None: ...

    @abstractmethod
    def validate_segments(self, config: ExperimentConfig) -> None: ...

    @abstractmethod
    def validate_block_bound(self, config: ExperimentConfig) -> None: ...

    @abstractmethod
    def validate_eta(self, config: ExperimentConfig, gamma: float) -> None: ...

    @abstractmethod
    def run(self, config: ExperimentConfig) -> ExperimentConfig: ...
