import json
import os
import shutil
from pathlib import Path

import polars as pl
import pytest

from maxlocal.constants import CHECKPOINT_FOLDER, Subcommand
from maxlocal.models import ExperimentConfig, ExperimentSummary
from maxlocal.storage import LabStorage, LocalLabStorage

TEST_PATH = Path("./maxlocal_storage_test")


@pytest.fixture(scope="module")
def local_storage():
    # Setup: clean directory before test
    if TEST_PATH.exists():
        shutil.rmtree(TEST_PATH)

    storage = LocalLabStorage(TEST_PATH)
    storage.ensure_directories()

    yield storage

    # Teardown: clean up after test
    if TEST_PATH.exists():
        shutil.rmtree(TEST_PATH)


def test_ensure_directories_local(local_storage: LocalLabStorage):
    assert os.path.exists(local_storage.path)
    assert (TEST_PATH / CHECKPOINT_FOLDER).is_dir()


def test_get_storage_options_local(local_storage: LocalLabStorage):
    assert local_storage.get_storage_options() == {}


def test_create_storage_rejects_unknown_type():
    with pytest.raises(ValueError, match="Unsupported storage type"):
        LabStorage.create_storage("s3", TEST_PATH)


def test_checkpoint_path(local_storage: LocalLabStorage):
    assert local_storage.checkpoint_path("run") == TEST_PATH / CHECKPOINT_FOLDER / "run.json"


def test_write_table(local_storage: LocalLabStorage):
    df = pl.DataFrame({"n": [10, 100], "empirical": [0.5, 0.05]})
    target = local_storage.write_table(df, "run", "report.csv")
    assert target == TEST_PATH / "run" / "report.csv"
    assert pl.read_csv(target).equals(df)


def test_write_summary(local_storage: LocalLabStorage):
    summary = ExperimentSummary(
        schema_version=1,
        subcommand="segments",
        config=ExperimentConfig(subcommand=Subcommand.SEGMENTS, beta1=0.8, beta2=0.6),
        summary={"rail_ok": True},
        violations=[],
        flags=["UNDERPOWERED"],
    )
    target = local_storage.write_summary(summary, "run")
    payload = json.loads(target.read_text())
    assert payload["summary"] == {"rail_ok": True}
    assert payload["config"]["beta1"] == 0.8
