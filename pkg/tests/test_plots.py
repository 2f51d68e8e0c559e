import shutil
from functools import partial
from pathlib import Path

import numpy as np
import polars as pl
import pytest

from maxlocal.deviations import gumbel_reference_cdf
from maxlocal.plots import emit_cdf_plot, emit_plot

PATH = Path("./maxlocal_plots_test")


@pytest.fixture(scope="module", autouse=True)
def plot_dir():
    if PATH.exists():
        shutil.rmtree(PATH)
    PATH.mkdir()

    yield PATH

    if PATH.exists():
        shutil.rmtree(PATH)


def test_emit_plot_writes_svg():
    report = pl.DataFrame(
        {"n": [10, 100, 1000], "empirical": [0.5, 0.1, 0.01], "theory": [0.4, 0.1, 0.02]}
    )
    path = emit_plot(
        report,
        PATH / "tail.svg",
        x="n",
        curves=["empirical", "theory"],
        title="tail",
        log_x=True,
        log_y=True,
        annotation="KS = 0.01",
    )
    assert path == PATH / "tail.svg"
    assert path.read_text().lstrip().startswith("<?xml")


def test_emit_plot_skips_unplottable():
    single = pl.DataFrame({"n": [10], "empirical": [0.5]})
    assert emit_plot(single, PATH / "single.svg", x="n", curves=["empirical"]) is None
    assert not (PATH / "single.svg").exists()

    missing = pl.DataFrame({"n": [1, 2, 3]})
    assert emit_plot(missing, PATH / "missing.svg", x="n", curves=["theory"]) is None

    # Zero tails drop out of a log axis.
    zeros = pl.DataFrame({"n": [1, 2, 3], "empirical": [0.0, 0.0, 0.1]})
    assert (
        emit_plot(zeros, PATH / "zeros.svg", x="n", curves=["empirical"], log_y=True)
        is None
    )


def test_emit_plot_ignores_nulls():
    report = pl.DataFrame(
        {"radius": [4.0, 8.0, 16.0], "extrapolated": [None, 0.31, 0.315]},
        schema_overrides={"extrapolated": pl.Float64},
    )
    assert emit_plot(report, PATH / "nulls.svg", x="radius", curves=["extrapolated"])


def test_emit_cdf_plot():
    samples = np.random.default_rng(0).gumbel(size=200)
    path = emit_cdf_plot(
        samples,
        partial(gumbel_reference_cdf, gamma=1.0),
        PATH / "cdf.svg",
        title="cdf",
        ks=0.05,
    )
    assert path.exists()
    assert emit_cdf_plot([1.0], np.exp, PATH / "none.svg") is None
