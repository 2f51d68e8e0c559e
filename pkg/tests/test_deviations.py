import math

import numpy as np
import pytest

from maxlocal.constants import Direction, EstimateMethod, ReportFlag, WalkMode
from maxlocal.deviations import (
    block_bound_mc,
    block_product_bound,
    downward_tail_theory,
    gumbel_fit,
    gumbel_reference_cdf,
    moderate_tail_theory,
    observe_threshold,
    tail_mc,
    tail_threshold,
    upward_tail_theory,
    upward_tail_theory_rewritten,
)
from maxlocal.models import GammaAlpha, TailQuery
from maxlocal.runner import ReplicateRunner
from maxlocal.stats import StreamKey

GAMMA_D3 = 0.6594626704
GA = GammaAlpha.from_gamma(GAMMA_D3, d=3, method=EstimateMethod.QUADRATURE, error_bound=1e-9)


def test_tail_query_ranges():
    with pytest.raises(ValueError, match="beta > 1"):
        TailQuery(direction=Direction.UP, beta=0.5, horizon=100)
    with pytest.raises(ValueError, match="0 < beta <= 1"):
        TailQuery(direction=Direction.DOWN, beta=1.5, horizon=100)
    with pytest.raises(ValueError, match="exceed 1"):
        TailQuery(direction=Direction.DOWN, beta=0.5, horizon=1.0)


def test_upward_forms_agree():
    for n, u in ((100, 0.0), (5000, 0.7), (10**6, -1.3)):
        query = TailQuery(beta=1.4, u=u, horizon=n)
        assert upward_tail_theory(query, GA) == pytest.approx(
            upward_tail_theory_rewritten(query, GA), rel=1e-9
        )


def test_upward_continuous_form():
    query = TailQuery(mode=WalkMode.CONTINUOUS, beta=2.0, u=0.5, horizon=50.0)
    expected = GAMMA_D3 * math.exp(-GAMMA_D3 * 0.5) / 50.0
    assert upward_tail_theory(query, GA) == pytest.approx(expected)


def test_downward_theory():
    query = TailQuery(
        mode=WalkMode.CONTINUOUS, direction=Direction.DOWN, beta=0.5, horizon=400.0
    )
    probability, exponent = downward_tail_theory(query, GA)
    assert exponent == pytest.approx(GAMMA_D3 * 20.0)
    assert probability == pytest.approx(math.exp(-exponent))

    with pytest.raises(ValueError, match="direction down"):
        downward_tail_theory(TailQuery(beta=1.5, horizon=10), GA)


def test_moderate_forms():
    up = moderate_tail_theory(WalkMode.CONTINUOUS, Direction.UP, 1.0, GA)
    down = moderate_tail_theory(WalkMode.CONTINUOUS, Direction.DOWN, 1.0, GA)
    assert up == pytest.approx(GAMMA_D3 * math.exp(-GAMMA_D3))
    assert down == pytest.approx(math.exp(-GAMMA_D3 * math.exp(GAMMA_D3)))
    assert 0 < moderate_tail_theory(WalkMode.DISCRETE, Direction.DOWN, 0.5, GA, 1000) < 1

    with pytest.raises(ValueError, match="nonnegative"):
        moderate_tail_theory(WalkMode.CONTINUOUS, Direction.UP, -1.0, GA)
    with pytest.raises(ValueError, match="horizon"):
        moderate_tail_theory(WalkMode.DISCRETE, Direction.UP, 1.0, GA)


def test_gumbel_reference_cdf():
    grid = np.linspace(-5, 20, 50)
    values = gumbel_reference_cdf(grid, GAMMA_D3)
    assert np.all(np.diff(values) > 0)
    assert values[-1] == pytest.approx(1.0, abs=1e-4)
    mode = math.log(GAMMA_D3) / GAMMA_D3
    assert gumbel_reference_cdf(mode, GAMMA_D3) == pytest.approx(math.exp(-1.0))


def test_observe_threshold_directions():
    key = StreamKey(seed=1, replicate_index=0)
    up = observe_threshold(key, 3, WalkMode.DISCRETE, 200, 1.5, Direction.UP)
    down = observe_threshold(key, 3, WalkMode.DISCRETE, 200, 1.5, Direction.DOWN)
    assert up["max"] == down["max"]
    assert up["hit"] + down["hit"] == 1.0


def test_tail_mc_small_run():
    query = TailQuery(
        mode=WalkMode.CONTINUOUS, beta=1.5, horizon=50.0, reps=40, seed=2
    )
    report = tail_mc(query, GA, ReplicateRunner())
    assert report.trials == 40
    assert report.threshold == pytest.approx(tail_threshold(query, GA))
    assert report.ci_lo <= report.empirical <= report.ci_hi
    assert ReportFlag.UNDERPOWERED.value in report.flags
    assert report.to_row()["direction"] == "up"


def test_tail_mc_boundary_flag():
    query = TailQuery(beta=1.0, horizon=100, reps=20, seed=2)
    report = tail_mc(query, GA)
    assert ReportFlag.BOUNDARY.value in report.flags


def test_tail_mc_downward_log_ratio():
    query = TailQuery(
        mode=WalkMode.CONTINUOUS,
        direction=Direction.DOWN,
        beta=1.0,
        horizon=30.0,
        reps=60,
        seed=2,
    )
    report = tail_mc(query, GA)
    assert report.exponent is not None
    if report.successes:
        assert report.log_ratio == pytest.approx(-math.log(report.empirical) / report.exponent)


def test_block_product_bound():
    report = block_product_bound(0.8, 0.5, 100.0, 0.0, 0.5, 0.01, direct=1e-4, direct_stderr=1e-4)
    assert report.blocks == 10
    assert report.block_length == pytest.approx(10.0)
    assert report.bound == pytest.approx(0.5**10)
    assert report.holds

    degenerate = block_product_bound(0.8, 0.5, 100.0, 0.0, 0.0, 0.0)
    assert ReportFlag.DEGENERATE.value in degenerate.flags
    assert degenerate.holds is None

    with pytest.raises(ValueError, match="beta' < beta"):
        block_product_bound(0.5, 0.8, 100.0, 0.0, 0.5, 0.01)


def test_gumbel_fit_small_ladder():
    table, samples = gumbel_fit([20.0, 40.0], reps=50, seed=3, gamma_alpha=GA)
    assert table["t"].to_list() == [20.0, 40.0]
    assert set(samples) == {20.0, 40.0}
    assert len(samples[40.0]) == 50
    assert (table["ks"] >= 0).all() and (table["ks"] <= 1).all()
    assert table["predicted_scale"][0] == pytest.approx(1.0 / GAMMA_D3)

    with pytest.raises(ValueError, match="increasing"):
        gumbel_fit([40.0, 20.0], reps=10, seed=3, gamma_alpha=GA)


def test_block_bound_mc_short_block():
    # Within t^{beta'} < threshold time no site can exceed the threshold.
    report = block_bound_mc(0.8, 0.4, 20.0, 0.0, reps=20, seed=6, gamma_alpha=GA)
    assert report.blocks == 6
    assert report.one_block == 1.0
    assert report.bound == 1.0
    assert 0.0 <= report.direct <= 1.0
    assert report.holds

    with pytest.raises(ValueError, match="beta' < beta"):
        block_bound_mc(0.4, 0.8, 20.0, 0.0, reps=5, seed=6, gamma_alpha=GA)


class SeedRecordingRunner(ReplicateRunner):
    def __init__(self):
        super().__init__()
        self.seeds = {}

    def run(self, stage, observe, seed, reps, reservoirs=None):
        self.seeds[stage.split(":")[1]] = seed
        return super().run(stage, observe, seed, reps, reservoirs)


def test_block_bound_stages_use_distinct_streams():
    runner = SeedRecordingRunner()
    block_bound_mc(0.8, 0.4, 20.0, 0.0, reps=5, seed=6, gamma_alpha=GA, runner=runner)
    assert runner.seeds["direct"] == 6
    assert runner.seeds["one-block"] != 6
