from maxlocal.base import (
    BaseConfigPreprocessor,
    BaseLabCatalog,
    BaseLabStorage,
    BaseLocalTimeLab,
)
from maxlocal.catalog import RunCatalog
from maxlocal.constants import StorageType, Subcommand
from maxlocal.core import LocalTimeLab
from maxlocal.models import ExperimentConfig, ExperimentSummary

__all__ = [
    "BaseConfigPreprocessor",
    "BaseLabCatalog",
    "BaseLabStorage",
    "BaseLocalTimeLab",
    "ExperimentConfig",
    "ExperimentSummary",
    "LocalTimeLab",
    "RunCatalog",
    "StorageType",
    "Subcommand",
]
