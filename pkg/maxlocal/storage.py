import logging
import os
from pathlib import Path

import polars as pl

from maxlocal.base import BaseLabStorage
from maxlocal.constants import CHECKPOINT_FOLDER, StorageType
from maxlocal.models import ExperimentSummary

logger = logging.getLogger(__name__)


class LabStorage(BaseLabStorage):
    def __init__(self, path: Path | str):
        self.path = str(path)

    @staticmethod
    def create_storage(
        storage_type: StorageType, path: Path | str, **kwargs
    ) -> "LabStorage":
        if storage_type == StorageType.LOCAL:
            return LocalLabStorage(path)
        else:
            raise ValueError(f"Unsupported storage type: {storage_type}")


class LocalLabStorage(LabStorage):
    """
    Output directory of a lab: one folder per run holding its CSV report,
    JSON summary, plots and trace dumps, plus a checkpoint folder.
    """

    def ensure_directories(self):
        os.makedirs(self.path, exist_ok=True)
        os.makedirs(self.checkpoint_dir(), exist_ok=True)

    def get_storage_options(self) -> dict:
        return {}

    def run_dir(self, name: str) -> Path:
        run_path = Path(self.path) / name
        run_path.mkdir(parents=True, exist_ok=True)
        return run_path

    def checkpoint_dir(self) -> Path:
        return Path(self.path) / CHECKPOINT_FOLDER

    def checkpoint_path(self, name: str) -> Path:
        return self.checkpoint_dir() / f"{name}.json"

    def write_table(self, df: pl.DataFrame, name: str, filename: str) -> Path:
        target = self.run_dir(name) / filename
        df.write_csv(target)
        logger.info(f"Wrote {len(df)} rows to {target}")
        return target

    def write_summary(self, summary: ExperimentSummary, name: str) -> Path:
        target = self.run_dir(name) / "summary.json"
        target.write_text(summary.model_dump_json(indent=2))
        return target
