import logging
from pathlib import Path
from typing import List, Optional

import polars as pl

from maxlocal.base import (
    BaseConfigPreprocessor,
    BaseLabCatalog,
    BaseLabStorage,
    BaseLocalTimeLab,
)
from maxlocal.catalog import RunCatalog
from maxlocal.constants import (
    CATALOG_TABLE_NAME,
    CSV_SCHEMA_VERSION,
    REPORTS_FOLDER,
    CatalogEntryType,
    RunStatus,
    StorageType,
    Subcommand,
)
from maxlocal.errors import ExperimentInterrupted, InvariantViolation
from maxlocal.experiments import HANDLERS
from maxlocal.lattice import lattice_constants
from maxlocal.models import ExperimentConfig, ExperimentSummary, LabEntry, RunEntry
from maxlocal.preprocessor import ConfigPreprocessor
from maxlocal.runner import ReplicateRunner, config_fingerprint, load_checkpoint
from maxlocal.storage import LabStorage
from maxlocal.utils import ensure_path, run_name

logger = logging.getLogger(__name__)


class LocalTimeLab(BaseLocalTimeLab):
    def __init__(
        self,
        storage: BaseLabStorage,
        preprocessor: BaseConfigPreprocessor,
        catalog: BaseLabCatalog,
        config: Optional[LabEntry] = None,
    ):
        """
        Initialize a lab.

        Args:
            storage: Storage backend for reports, plots and checkpoints
            preprocessor: Validates experiment configs
            catalog: Run catalog
            config: Optional preloaded lab config to avoid redundant catalog calls
        """
        self.storage = storage
        self.preprocessor = preprocessor
        self.catalog = catalog
        self.path = ensure_path(self.storage.path)

        if config:
            self.config_id = config.id
            self.config = config
        else:
            self.config_id, self.config = self.catalog.get_or_create_lab_config()

        self.storage.ensure_directories()

    @classmethod
    def create(
        cls,
        path: Path | str,
        storage_type: StorageType = StorageType.LOCAL,
        preprocessor: Optional[BaseConfigPreprocessor] = None,
    ) -> "LocalTimeLab":
        """
        Create a new lab directory.

        Args:
            path: Output directory of the lab
            storage_type: Type of storage to use
            preprocessor: Optional config preprocessor

        Returns:
            LocalTimeLab: The created lab
        """
        path = ensure_path(path)
        storage = LabStorage.create_storage(storage_type, path)
        storage.ensure_directories()
        catalog = RunCatalog.create_catalog(path, storage.get_storage_options())
        return cls(
            storage=storage,
            preprocessor=preprocessor or ConfigPreprocessor(),
            catalog=catalog,
        )

    @classmethod
    def open(
        cls,
        path: Path | str,
        storage_type: StorageType = StorageType.LOCAL,
        preprocessor: Optional[BaseConfigPreprocessor] = None,
    ) -> "LocalTimeLab":
        """
        Open an existing lab directory.

        Args:
            path: Output directory of the lab
            storage_type: Type of storage
            preprocessor: Optional config preprocessor

        Returns:
            LocalTimeLab: The opened lab
        """
        path = ensure_path(path)
        storage = LabStorage.create_storage(storage_type, path)
        try:
            catalog = RunCatalog.open_catalog(path, storage.get_storage_options())
        except ValueError:
            raise ValueError(f"No lab catalog found at {path}. Use create() for new labs.")

        config = catalog.get_lab_config()
        if not config:
            raise ValueError(f"Invalid lab catalog at {path}: no lab_config found")

        return cls(
            storage=storage,
            preprocessor=preprocessor or ConfigPreprocessor(),
            catalog=catalog,
            config=config,
        )

    @classmethod
    def open_or_create(cls, path: Path | str) -> "LocalTimeLab":
        if (Path(path) / CATALOG_TABLE_NAME).exists():
            return cls.open(path)
        return cls.create(path)

    def run(
        self, config: ExperimentConfig, stop_at: Optional[int] = None
    ) -> ExperimentSummary:
        """
        Validate the config, run its subcommand and write the CSV report, the
        JSON summary and the plots. The run is recorded in the catalog.

        Args:
            config: Experiment config
            stop_at: Interrupt each stage after this many replicates

        Returns:
            ExperimentSummary: Summary also written as summary.json
        """
        if config.subcommand == Subcommand.CHECKPOINT_RESUME:
            if config.checkpoint is None:
                raise ValueError("checkpoint-resume requires a checkpoint path.")
            return self.resume(config.checkpoint, config.workers, stop_at)

        config = self.preprocessor.run(config)
        if config.subcommand == Subcommand.FORCING:
            gamma = lattice_constants(config.d).gamma_alpha.gamma
            self.preprocessor.validate_eta(config, gamma)

        name = config.name or run_name(config.subcommand.value, config_fingerprint(config))
        checkpoint_path = (
            Path(config.checkpoint)
            if config.checkpoint
            else self.storage.checkpoint_path(name)
        )
        run = self.catalog.record_run(
            RunEntry(
                name=name,
                subcommand=config.subcommand.value,
                config=config.model_dump(mode="json"),
            )
        )
        runner = ReplicateRunner(
            workers=config.workers,
            chunk_size=config.chunk_size,
            checkpoint_path=checkpoint_path,
            config=config,
            stop_at=stop_at,
        )
        logger.info(f"Run {name}: {config.subcommand.value} with {config.reps} reps")

        try:
            result = HANDLERS[config.subcommand](config, runner, self.storage.run_dir(name))
        except ExperimentInterrupted:
            self.catalog.finish_run(run, status=RunStatus.INTERRUPTED.value)
            raise
        except InvariantViolation as error:
            self.catalog.finish_run(
                run, status=RunStatus.FAILED.value, violations=[error.invariant]
            )
            raise
        except Exception:
            self.catalog.finish_run(run, status=RunStatus.FAILED.value)
            raise

        report_csv = self.storage.write_table(result.table, name, "report.csv")
        for filename, table in result.tables.items():
            self.storage.write_table(table, name, filename)
        summary = ExperimentSummary(
            schema_version=CSV_SCHEMA_VERSION,
            subcommand=config.subcommand.value,
            config=config,
            summary=result.summary,
            violations=result.violations,
            flags=result.flags,
        )
        summary_json = self.storage.write_summary(summary, name)

        run = self.catalog.archive_report(
            run, Path(self.path) / REPORTS_FOLDER / name, result.table
        )
        self.catalog.finish_run(
            run,
            status=RunStatus.COMPLETED.value,
            report_csv=str(report_csv),
            summary_json=str(summary_json),
            plots=result.plots,
            violations=result.violations,
        )
        if config.checkpoint is None:
            checkpoint_path.unlink(missing_ok=True)
        logger.info(f"Run {name} completed, report at {report_csv}")
        return summary

    def resume(
        self,
        checkpoint_path: Path | str,
        workers: Optional[int] = None,
        stop_at: Optional[int] = None,
    ) -> ExperimentSummary:
        """Continue the experiment stored in a checkpoint from its frontier."""
        checkpoint = load_checkpoint(checkpoint_path)
        update = {"checkpoint": str(checkpoint_path)}
        if workers is not None:
            update["workers"] = workers
        config = checkpoint.config.model_copy(update=update)
        logger.info(f"Resuming {config.subcommand.value} from {checkpoint_path}")
        return self.run(config, stop_at=stop_at)

    # Catalog-based run methods

    def list_runs(self) -> List[RunEntry]:
        return self.catalog.list_entries(entry_type=CatalogEntryType.RUN.value)

    def get_run(self, name: str) -> Optional[RunEntry]:
        return self.catalog.get_entry_by_name(
            name=name, entry_type=CatalogEntryType.RUN.value
        )

    def read_report(self, name: str) -> pl.DataFrame:
        """
        Read the archived report table of a run.

        Args:
            name: Run name

        Returns:
            pl.DataFrame: The report table
        """
        return self.catalog.read_report(name)
