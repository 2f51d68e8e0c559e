from functools import partial

import numpy as np
import pytest

from maxlocal.constants import EstimateMethod, ReportFlag, WalkMode
from maxlocal.laws import (
    c_factor,
    c_factor_direct,
    count_exceedances,
    count_exceedances_jump_sampled,
    count_via_representation,
    count_via_representation_jump_sampled,
    empirical_law_check,
    first_moment_theory,
    law_check_from_accumulators,
    level_key,
    moment_report,
    observe_counting_identity,
    observe_origin_law,
    one_point_tail_at_scale,
    snapped_floor,
    tail_exponential_theory,
    tail_geometric_theory,
    threshold_b,
    threshold_m,
    two_point_tail_theory,
)
from maxlocal.models import GammaAlpha, ThresholdSpec, WalkConfig
from maxlocal.runner import ReplicateRunner
from maxlocal.stats import Accumulator, StreamKey
from maxlocal.walk import LocalTimeField, run_discrete, simulate_jumps

GAMMA_D3 = 0.6594626704
GA = GammaAlpha.from_gamma(GAMMA_D3, d=3, method=EstimateMethod.QUADRATURE, error_bound=1e-9)


def test_snapped_floor():
    assert snapped_floor(2.9999999999) == 3
    assert snapped_floor(2.5) == 2
    assert snapped_floor(-0.5) == -1
    assert snapped_floor(4.0) == 4


def test_thresholds():
    spec = ThresholdSpec(beta=1.5, u=0.3, horizon=1000)
    m = threshold_m(spec, GA)
    assert m == int(np.floor(1.5 * GA.alpha * np.log(1000) + 0.3))
    continuous = ThresholdSpec(beta=0.5, horizon=100, mode=WalkMode.CONTINUOUS)
    assert threshold_b(continuous, GAMMA_D3) == pytest.approx(0.5 * np.log(100) / GAMMA_D3)
    with pytest.raises(ValueError, match="discrete"):
        threshold_m(continuous, GA)


def test_c_factor_range_and_direct_form():
    for n in (100, 1000, 10_000):
        spec = ThresholdSpec(beta=1.5, u=-0.2, horizon=n)
        c = c_factor(spec, GA)
        assert 1.0 <= c < 1.0 / (1.0 - GAMMA_D3)
        assert c == pytest.approx(c_factor_direct(spec, GA), rel=1e-9)


def test_theory_tails():
    assert tail_geometric_theory(0, GAMMA_D3) == 1.0
    assert tail_geometric_theory(2, GAMMA_D3) == pytest.approx((1 - GAMMA_D3) ** 2)
    assert tail_exponential_theory(1.0, GAMMA_D3) == pytest.approx(np.exp(-GAMMA_D3))
    # y adjacent to 0: t_y = 1 - gamma.
    assert two_point_tail_theory(1, 1 - GAMMA_D3, GAMMA_D3) == pytest.approx(
        1 - GAMMA_D3 / (2 - GAMMA_D3)
    )


def test_first_moment_theory_decays_in_n():
    values = [
        first_moment_theory(ThresholdSpec(beta=1.5, horizon=n), GA) for n in (10**3, 10**5)
    ]
    assert values[0] > values[1] > 0


def test_counts_on_hand_built_path():
    path = np.array([[0, 0, 0], [1, 0, 0], [0, 0, 0], [1, 0, 0], [0, 0, 0]])
    field = LocalTimeField.from_visits(path)
    assert count_exceedances(field, 1) == 2
    assert count_exceedances(field, 2) == 1
    assert count_exceedances(field, 3) == 0
    for m in range(4):
        assert count_via_representation(path, 4, m) == count_exceedances(field, m)


def test_counting_identity_on_random_walks():
    for index in range(5):
        result = run_discrete(
            WalkConfig(horizon=2000, seed=3, replicate_index=index, record_path=True)
        )
        for m in range(0, 5):
            assert count_via_representation(result.path, 2000, m) == count_exceedances(
                result.field, m
            )


def test_counting_identity_jump_sampled():
    cfg = WalkConfig(mode=WalkMode.CONTINUOUS, horizon=1.0, seed=3)
    run = simulate_jumps(cfg, 1500)
    for b in (0.5, 1.0, 2.0, 3.5):
        assert count_via_representation_jump_sampled(
            run.skeleton.path, run.holding_times, b
        ) == count_exceedances_jump_sampled(run.field, b)


def test_count_validation():
    field = LocalTimeField.from_visits(np.zeros((2, 3), dtype=np.int64))
    with pytest.raises(ValueError, match="continuous"):
        count_exceedances_jump_sampled(field, 1.0)
    with pytest.raises(ValueError, match="recorded path"):
        count_via_representation(None, 1, 0)
    with pytest.raises(ValueError, match="expected"):
        count_via_representation(np.zeros((2, 3)), 5, 0)


def test_counts_reject_negative_levels():
    path = np.array([[0, 0, 0], [1, 0, 0], [0, 0, 0]])
    field = LocalTimeField.from_visits(path)
    with pytest.raises(ValueError, match="nonnegative"):
        count_exceedances(field, -1)
    with pytest.raises(ValueError, match="nonnegative"):
        count_via_representation(path, 2, -1)

    run = simulate_jumps(WalkConfig(mode=WalkMode.CONTINUOUS, horizon=1.0, seed=3), 10)
    with pytest.raises(ValueError, match="nonnegative"):
        count_exceedances_jump_sampled(run.field, -0.5)
    with pytest.raises(ValueError, match="nonnegative"):
        count_via_representation_jump_sampled(run.skeleton.path, run.holding_times, -0.5)

    # Level zero stays valid: every visited site counts once on both sides.
    assert count_exceedances(field, 0) == count_via_representation(path, 2, 0) == 2


def test_observe_counting_identity():
    for index in range(3):
        key = StreamKey(seed=9, replicate_index=index)
        observation = observe_counting_identity(key, 3, 500, ms=[0, 1, 2], bs=[0.5, 2.0])
        assert observation == {"mismatches": 0.0}


def test_empirical_law_check_geometric():
    samples = np.random.default_rng(4).geometric(GAMMA_D3, size=20_000)
    report = empirical_law_check(
        samples, partial(tail_geometric_theory, gamma=GAMMA_D3), [1, 2, 3, 4], lattice=True
    )
    assert report.n_samples == 20_000
    assert report.max_abs_z < 5
    assert report.ks_distance < 0.02
    assert report.flags == []
    assert report.to_frame().columns == ["level", "empirical", "stderr", "theory", "z"]


def test_empirical_law_check_underpowered():
    samples = np.random.default_rng(4).exponential(1 / GAMMA_D3, size=50)
    report = empirical_law_check(
        samples, partial(tail_exponential_theory, gamma=GAMMA_D3), [0.5, 1.0]
    )
    assert ReportFlag.UNDERPOWERED.value in report.flags


def test_law_check_from_accumulators():
    levels = [1.0, 2.0]
    rng = np.random.default_rng(8)
    accumulators = {"value": Accumulator(reservoir_capacity=2000)}
    for level in levels:
        accumulators[level_key(level)] = Accumulator()
    for i, value in enumerate(rng.geometric(GAMMA_D3, size=2000)):
        accumulators["value"].add(value, key=StreamKey(seed=8, replicate_index=i))
        for level in levels:
            accumulators[level_key(level)].add(float(value > level))
    report = law_check_from_accumulators(
        levels, accumulators, partial(tail_geometric_theory, gamma=GAMMA_D3), lattice=True
    )
    assert report.n_samples == 2000
    assert report.max_abs_z < 5


def test_observe_origin_law():
    key = StreamKey(seed=2, replicate_index=0)
    observation = observe_origin_law(key, 3, WalkMode.DISCRETE, 1000, [1.0, 2.0])
    assert observation["value"] >= 1
    assert observation[level_key(1.0)] == float(observation["value"] > 1.0)


def test_moment_report():
    report = moment_report([100, 200], 1.2, 0.0, GA, reps=30, seed=1, runner=ReplicateRunner())
    assert report["n"].to_list() == [100, 200]
    assert report["reps"].to_list() == [30, 30]
    assert (report["theory"] > 0).all()
    assert report["flags"].to_list() == [ReportFlag.ARTIFACT_BAND.value] * 2

    with pytest.raises(ValueError, match="beta > 1"):
        moment_report([100], 1.0, 0.0, GA, reps=10, seed=1)
    with pytest.raises(ValueError, match="negative"):
        moment_report([100], 1.2, -20.0, GA, reps=10, seed=1)


def test_one_point_tail_at_scale():
    continuous = ThresholdSpec(beta=0.5, u=2.0, horizon=100.0, mode=WalkMode.CONTINUOUS)
    assert one_point_tail_at_scale(continuous, GA) == pytest.approx(
        0.1 * np.exp(-2.0 * GAMMA_D3)
    )

    discrete = ThresholdSpec(beta=1.2, u=1.0, horizon=1000.0)
    expected = c_factor(discrete, GA) * (1.0 - GAMMA_D3) * 1000.0**-1.2
    assert one_point_tail_at_scale(discrete, GA) == pytest.approx(expected)
    # Scaled by gamma n it is the first moment.
    assert GAMMA_D3 * 1000.0 * expected == pytest.approx(first_moment_theory(discrete, GA))
