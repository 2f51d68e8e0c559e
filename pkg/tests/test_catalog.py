import os
import shutil
from pathlib import Path

import polars as pl
import pytest

from maxlocal.catalog import RunCatalog
from maxlocal.constants import CATALOG_TABLE_NAME, RNG_MIXER, CatalogEntryType, RunStatus
from maxlocal.models import LabEntry, RunEntry

TEST_PATH = Path("./maxlocal_catalog_test")


@pytest.fixture(scope="function")
def catalog():
    if TEST_PATH.exists():
        shutil.rmtree(TEST_PATH)

    os.makedirs(TEST_PATH)

    catalog = RunCatalog.create_catalog(str(TEST_PATH))

    yield catalog

    if TEST_PATH.exists():
        shutil.rmtree(TEST_PATH)


def make_run(name="tail-run", **kwargs):
    return RunEntry(
        name=name,
        subcommand="tail",
        config={"subcommand": "tail", "beta": 1.5, "horizons": [100.0]},
        **kwargs,
    )


def test_create_catalog(catalog: RunCatalog):
    assert os.path.exists(f"{TEST_PATH}/{CATALOG_TABLE_NAME}")


def test_open_missing_catalog():
    with pytest.raises(ValueError, match="No catalog found"):
        RunCatalog.open_catalog("./maxlocal_catalog_missing")


def test_add_entry(catalog: RunCatalog):
    entry_id = catalog.add_entry(make_run())
    assert entry_id is not None

    entries = catalog.list_entries()
    assert len(entries) == 1
    assert isinstance(entries[0], RunEntry)
    assert entries[0].config["beta"] == 1.5
    assert entries[0].status == RunStatus.RUNNING.value


def test_get_run_entry(catalog: RunCatalog):
    catalog.add_entry(make_run())

    entry = catalog.get_entry_by_name("tail-run", entry_type=CatalogEntryType.RUN.value)
    assert isinstance(entry, RunEntry)
    assert entry.subcommand == "tail"

    assert (
        catalog.get_entry_by_name("non-existent", entry_type=CatalogEntryType.RUN.value)
        is None
    )


def test_update_entry(catalog: RunCatalog):
    catalog.add_entry(make_run())

    assert catalog.update_entry(
        "tail-run",
        entry_type=CatalogEntryType.RUN.value,
        properties={"status": RunStatus.COMPLETED.value, "violations": ["parity"]},
    )
    entry = catalog.get_entry_by_name("tail-run", CatalogEntryType.RUN.value)
    assert entry.status == RunStatus.COMPLETED.value
    assert entry.violations == ["parity"]
    assert entry.config["beta"] == 1.5

    assert not catalog.update_entry(
        "non-existent", CatalogEntryType.RUN.value, {"status": "failed"}
    )


def test_delete_entry(catalog: RunCatalog):
    catalog.add_entry(make_run())

    assert not catalog.delete_entry("tail-run", CatalogEntryType.LAB_CONFIG.value)
    assert catalog.delete_entry("tail-run")
    assert catalog.get_entry_by_name("tail-run", CatalogEntryType.RUN.value) is None
    assert not catalog.delete_entry("non-existent")


def test_list_entries_by_type(catalog: RunCatalog):
    catalog.get_or_create_lab_config()
    catalog.add_entry(make_run())

    all_entries = catalog.list_entries()
    assert len(all_entries) == 2
    assert isinstance(all_entries[0], LabEntry)
    assert isinstance(all_entries[1], RunEntry)

    runs = catalog.list_entries(entry_type=CatalogEntryType.RUN.value)
    assert len(runs) == 1
    assert runs[0].name == "tail-run"


def test_lab_config_is_created_once(catalog: RunCatalog):
    first_id, first = catalog.get_or_create_lab_config()
    second_id, second = catalog.get_or_create_lab_config()
    assert first_id == second_id
    assert first.lab_id == second.lab_id
    assert second.rng_mixer == RNG_MIXER


def test_lab_config_rejects_other_mixer(catalog: RunCatalog):
    catalog.add_entry(LabEntry(lab_id="old", numpy_version="1.0", rng_mixer="pcg64"))
    with pytest.raises(ValueError, match="RNG mixer"):
        catalog.get_lab_config()


def test_record_and_finish_run(catalog: RunCatalog):
    run = catalog.record_run(make_run())
    finished = catalog.finish_run(
        run, status=RunStatus.COMPLETED.value, report_csv="report.csv"
    )
    assert finished.status == RunStatus.COMPLETED.value
    assert finished.report_csv == "report.csv"

    # Recording the same name again reopens the entry.
    rerun = catalog.record_run(make_run())
    assert rerun.status == RunStatus.RUNNING.value
    assert len(catalog.list_entries(CatalogEntryType.RUN.value)) == 1


def test_archive_and_read_report(catalog: RunCatalog):
    run = catalog.record_run(make_run())
    df = pl.DataFrame(
        {"horizon": [100.0, 1000.0], "empirical": [0.1, 0.01], "note": [None, None]}
    )
    run = catalog.archive_report(run, TEST_PATH / "reports" / "tail-run", df)
    assert run.report_table == str(TEST_PATH / "reports" / "tail-run")

    written = catalog.read_report("tail-run")
    assert written.shape == df.shape
    assert written["empirical"].to_list() == [0.1, 0.01]

    with pytest.raises(ValueError, match="no archived report"):
        catalog.read_report("non-existent")
