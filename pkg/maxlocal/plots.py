"""
SVG plots of reports: empirical against theory curves, and CDF overlays.
CSV stays the normative output; a plot that cannot be drawn is skipped.
"""

import logging
from pathlib import Path
from typing import Callable, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import polars as pl  # noqa: E402

logger = logging.getLogger(__name__)

MIN_CURVE_POINTS = 2


def _usable(frame: pl.DataFrame, columns: Sequence[str], log_x: bool, log_y: bool):
    frame = frame.select(columns).drop_nulls()
    frame = frame.filter(pl.all_horizontal([pl.col(c).is_finite() for c in columns]))
    if log_x:
        frame = frame.filter(pl.col(columns[0]) > 0)
    if log_y:
        frame = frame.filter(pl.all_horizontal([pl.col(c) > 0 for c in columns[1:]]))
    return frame


def emit_plot(
    report: pl.DataFrame,
    path: Path | str,
    x: str,
    curves: Sequence[str],
    title: str = "",
    log_x: bool = False,
    log_y: bool = False,
    annotation: Optional[str] = None,
) -> Optional[Path]:
    """
    Draw each curve column against x and save as SVG.

    Args:
        report: Report table
        path: Target SVG file
        x: Column on the horizontal axis
        curves: Columns drawn as polylines, one legend entry each
        title: Figure title
        log_x: Logarithmic horizontal axis
        log_y: Logarithmic vertical axis, used where tails are plotted
        annotation: Text placed in the upper right corner

    Returns:
        Optional[Path]: The written file, or None when fewer than two
        points are plottable
    """
    columns = [x, *curves]
    missing = [c for c in columns if c not in report.columns]
    if missing:
        logger.warning(f"Plot '{title}' skipped: missing columns {missing}")
        return None
    data = _usable(report.with_columns(pl.col(columns).cast(pl.Float64)), columns, log_x, log_y)
    if len(data) < MIN_CURVE_POINTS:
        logger.warning(f"Plot '{title}' skipped: {len(data)} usable point(s)")
        return None

    fig, ax = plt.subplots(figsize=(6, 4))
    for curve in curves:
        ax.plot(data[x].to_numpy(), data[curve].to_numpy(), "-o", ms=3, label=curve)
    if log_x:
        ax.set_xscale("log")
    if log_y:
        ax.set_yscale("log")
    ax.set_xlabel(x)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend()
    if annotation:
        ax.text(0.98, 0.95, annotation, transform=ax.transAxes, ha="right", va="top")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def emit_cdf_plot(
    samples: Sequence[float],
    cdf: Callable[[np.ndarray], np.ndarray],
    path: Path | str,
    title: str = "",
    ks: Optional[float] = None,
) -> Optional[Path]:
    """Empirical distribution function of samples over the reference cdf."""
    x = np.sort(np.asarray(samples, dtype=float))
    x = x[np.isfinite(x)]
    if x.size < MIN_CURVE_POINTS:
        logger.warning(f"Plot '{title}' skipped: {x.size} usable sample(s)")
        return None

    grid = np.linspace(x[0], x[-1], 200)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.step(x, np.arange(1, x.size + 1) / x.size, where="post", label="empirical")
    ax.plot(grid, cdf(grid), "-", label="reference")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right")
    if ks is not None:
        ax.text(0.02, 0.95, f"KS = {ks:.4f}", transform=ax.transAxes, va="top")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path
