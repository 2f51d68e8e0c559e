import io
import math

import numpy as np
import pytest

from maxlocal.constants import WalkMode
from maxlocal.errors import InvariantViolation
from maxlocal.models import WalkConfig
from maxlocal.stats import StreamKey
from maxlocal.walk import (
    HoldingSource,
    LocalTimeField,
    StepSource,
    diffusive_scaling_check,
    dump_path,
    exact_step_distribution,
    first_return_step,
    key_radix,
    late_return_bound,
    origin_local_time_sample,
    poisson_sandwich_check,
    run_continuous,
    run_discrete,
    run_jump_sampled,
    simulate_jumps,
    site_keys,
    step_offsets,
    two_point_local_time_sample,
    uniform_step,
    visit_steps,
)

SEED = 11


def discrete(n, replicate_index=0, record_path=True, d=3):
    return run_discrete(
        WalkConfig(
            d=d,
            horizon=n,
            seed=SEED,
            replicate_index=replicate_index,
            record_path=record_path,
        )
    )


def test_discrete_conservation():
    result = discrete(500, record_path=False)
    assert result.field.total == 501
    assert result.max_local_time >= 1
    assert result.path is None


def test_steps_are_unit_moves():
    path = discrete(300).path
    steps = np.abs(np.diff(path, axis=0)).sum(axis=1)
    assert np.all(steps == 1)
    assert not path[0].any()


def test_shorter_walk_is_prefix():
    short = discrete(100).path
    long = discrete(5000).path
    assert np.array_equal(short, long[:101])


def test_same_key_same_walk():
    assert np.array_equal(discrete(200).path, discrete(200).path)
    assert not np.array_equal(discrete(200).path, discrete(200, replicate_index=1).path)


def test_continuous_conservation_and_skeleton():
    cfg = WalkConfig(
        mode=WalkMode.CONTINUOUS, horizon=250.0, seed=SEED, record_path=True
    )
    result = run_continuous(cfg)
    assert result.field.total == pytest.approx(250.0, abs=1e-9)
    assert len(result.holding_times) == result.jumps + 1
    assert np.all(result.holding_times > 0)
    assert result.max_local_time <= 250.0

    skeleton = discrete(result.jumps).path
    assert np.array_equal(result.skeleton.path, skeleton)


def test_simulate_jumps():
    cfg = WalkConfig(mode=WalkMode.CONTINUOUS, horizon=10.0, seed=SEED)
    result = simulate_jumps(cfg, 40)
    assert result.jumps == 40
    assert len(result.skeleton.path) == 41
    assert result.horizon == pytest.approx(result.holding_times.sum())
    assert np.array_equal(result.skeleton.path, discrete(40).path)


def test_field_from_hand_built_path():
    path = np.array([[0, 0, 0], [1, 0, 0], [0, 0, 0]])
    field = LocalTimeField.from_visits(path)
    assert field.mode == WalkMode.DISCRETE
    assert len(field) == 2
    assert field.occupation((0, 0, 0)) == 2
    assert field.occupation((5, 5, 5)) == 0
    assert field.max_local_time == 2
    assert field.to_dict() == {(0, 0, 0): 2, (1, 0, 0): 1}

    timed = LocalTimeField.from_visits(path, durations=np.array([0.5, 1.0, 0.25]))
    assert timed.mode == WalkMode.CONTINUOUS
    assert timed.occupation((0, 0, 0)) == pytest.approx(0.75)
    assert timed.max_local_time == pytest.approx(1.0)


def test_conservation_violation():
    field = LocalTimeField.from_visits(np.zeros((3, 3), dtype=np.int64))
    field.check_conservation(3)
    with pytest.raises(InvariantViolation, match="conservation"):
        field.check_conservation(4)


def test_walk_config_validation():
    with pytest.raises(ValueError, match="Dimension"):
        WalkConfig(d=2, horizon=10)
    with pytest.raises(ValueError, match="nonnegative integer"):
        WalkConfig(horizon=2.5)
    with pytest.raises(ValueError, match="positive"):
        WalkConfig(mode=WalkMode.CONTINUOUS, horizon=0.0)


def test_first_return_step_matches_path():
    for index in range(10):
        key = StreamKey(seed=SEED, replicate_index=index)
        path = StepSource(key, 3).positions(400)
        returns = np.flatnonzero(~path[1:].any(axis=1))
        expected = int(returns[0]) + 1 if returns.size else None
        assert first_return_step(key, 3, 400) == expected


def test_origin_local_time_sample():
    cfg = WalkConfig(seed=SEED, horizon=1)
    sample = origin_local_time_sample(cfg, 2000)
    assert sample.value >= 1.0
    assert sample.truncation == 2000
    assert 0.0 < sample.bias_bound < 1.0


def test_two_point_sample_rejects_origin():
    cfg = WalkConfig(seed=SEED, horizon=1)
    with pytest.raises(ValueError, match="nonzero"):
        two_point_local_time_sample(cfg, (0, 0, 0), 100)
    sample = two_point_local_time_sample(cfg, (1, 0, 0), 1000)
    assert sample.value >= 1.0


def test_late_return_bound_decreases():
    bounds = [late_return_bound(3, m) for m in (10, 100, 1000)]
    assert bounds[0] > bounds[1] > bounds[2]
    assert late_return_bound(3, 0) == 1.0


def test_exact_step_distribution():
    law = exact_step_distribution(3, 2)
    assert law.sum() == pytest.approx(1.0)
    assert law[2, 2, 2] == pytest.approx(1.0 / 6.0)
    assert exact_step_distribution(3, 1)[1, 1, 1] == 0.0

    with pytest.raises(ValueError, match="cells"):
        exact_step_distribution(3, 200)


def test_diffusive_scaling_check():
    report = diffusive_scaling_check(3, [4, 16], reps=2000, seed=SEED)
    assert report["n"].to_list() == [4, 16]
    assert report["parity_violations"].sum() == 0
    assert report["exact_sup"].is_nan().sum() == 0


def test_dump_path():
    buffer = io.StringIO()
    dump_path(np.array([[0, 0, 0], [-1, 0, 0]]), buffer)
    assert buffer.getvalue().splitlines() == ["0 0 0", "-1 0 0"]


def test_poisson_sandwich_wide_window():
    # floor(50 - 50^0.99) = 1 and floor(50 + 50^0.99) = 98 jumps bracket time 50.
    for index in range(5):
        cfg = WalkConfig(
            mode=WalkMode.CONTINUOUS, horizon=50.0, seed=SEED, replicate_index=index
        )
        assert poisson_sandwich_check(cfg, kappa=0.99)


def test_uniform_step():
    rng = StreamKey(seed=SEED).generator()
    steps = np.array([uniform_step(rng, 3) for _ in range(12_000)])
    assert np.all(np.abs(steps).sum(axis=1) == 1)
    for offset in step_offsets(3):
        frequency = np.all(steps == offset, axis=1).mean()
        assert frequency == pytest.approx(1.0 / 6.0, abs=0.02)

    first_rng, again_rng = (StreamKey(seed=SEED).generator() for _ in range(2))
    first = np.array([uniform_step(first_rng, 4) for _ in range(20)])
    again = np.array([uniform_step(again_rng, 4) for _ in range(20)])
    assert np.array_equal(first, again)

    with pytest.raises(ValueError, match="at least 3"):
        uniform_step(rng, 2)


def test_zero_step_walk():
    result = discrete(0)
    assert result.field.to_dict() == {(0, 0, 0): 1}
    assert result.max_local_time == 1
    assert result.final_site == (0, 0, 0)


def test_two_step_maximum():
    # The maximum after two steps is 2 exactly when S_2 = 0, which has probability 1/6.
    reps = 3000
    doubles = sum(
        discrete(2, replicate_index=i, record_path=False).max_local_time == 2
        for i in range(reps)
    )
    assert doubles / reps == pytest.approx(1.0 / 6.0, abs=0.035)


def test_continuous_short_horizon_stays_home():
    cfg = WalkConfig(mode=WalkMode.CONTINUOUS, horizon=1e-9, seed=SEED)
    result = run_continuous(cfg)
    assert result.jumps == 0
    assert result.field.to_dict() == {(0, 0, 0): 1e-9}


def test_continuous_jump_count_mean():
    jumps = [
        run_continuous(
            WalkConfig(mode=WalkMode.CONTINUOUS, horizon=50.0, seed=SEED, replicate_index=i)
        ).jumps
        for i in range(400)
    ]
    assert np.mean(jumps) == pytest.approx(50.0, abs=2.0)


def test_continuous_jumps_follow_holding_stream():
    # Spans several holding blocks.
    cfg = WalkConfig(mode=WalkMode.CONTINUOUS, horizon=10_000.0, seed=SEED)
    result = run_continuous(cfg)
    stream = HoldingSource(cfg.key).take(result.jumps + 1)
    assert result.jumps > 8192
    assert np.array_equal(result.holding_times[:-1], stream[:-1])
    cumulative = np.cumsum(stream)
    assert cumulative[-2] <= 10_000.0 < cumulative[-1]


def test_jump_sampled_field():
    cfg = WalkConfig(mode=WalkMode.CONTINUOUS, horizon=1.0, seed=SEED)
    single = run_jump_sampled(cfg, 0)
    assert single.to_dict() == {(0, 0, 0): float(HoldingSource(cfg.key).take(1)[0])}

    totals = [
        run_jump_sampled(cfg.model_copy(update={"replicate_index": i}), 9).total
        for i in range(400)
    ]
    # Ten unit exponential holding periods.
    assert np.mean(totals) == pytest.approx(10.0, abs=0.8)


def test_site_keys_follow_lexicographic_order():
    sites = StreamKey(seed=SEED).generator().integers(-5, 6, size=(500, 3))
    keys = site_keys(sites, key_radix(3, 5))
    by_key = sites[np.argsort(keys, kind="stable")]
    by_rows = sites[np.lexsort((sites[:, 2], sites[:, 1], sites[:, 0]))]
    assert np.array_equal(by_key, by_rows)
    assert key_radix(3, 10**6) == 2 * 10**6 + 1
    assert key_radix(3, 2**40) is None


def test_field_matches_row_unique():
    path = discrete(5000).path
    field = LocalTimeField.from_visits(path)
    sites, counts = np.unique(path, axis=0, return_counts=True)
    assert np.array_equal(field.sites, sites)
    assert np.array_equal(field.occupations, counts)


def test_field_with_far_sites():
    path = np.array([[0, 0, 0], [2**40, 0, 0], [0, 0, 0]])
    field = LocalTimeField.from_visits(path)
    assert field.to_dict() == {(0, 0, 0): 2, (2**40, 0, 0): 1}


def test_visit_steps_match_stored_path():
    horizon = 20_000
    for index in range(5):
        key = StreamKey(seed=SEED, replicate_index=index)
        path = StepSource(key, 3).positions(horizon)
        near = ~path.any(axis=1) | np.all(path == (1, 0, 0), axis=1)
        expected = np.flatnonzero(near)
        assert np.array_equal(visit_steps(key, 3, horizon, [(0, 0, 0), (1, 0, 0)]), expected)
        # A target too far out for a single int64 key takes the row-wise scan.
        far = visit_steps(key, 3, horizon, [(0, 0, 0), (2**40, 0, 0)])
        assert np.array_equal(far, np.flatnonzero(~path.any(axis=1)))


def test_truncated_samples_match_stored_path():
    truncation = 20_000
    for index in range(3):
        cfg = WalkConfig(seed=SEED, horizon=1, replicate_index=index)
        path = StepSource(cfg.key, 3).positions(truncation)
        at_origin = ~path.any(axis=1)
        assert origin_local_time_sample(cfg, truncation).value == float(at_origin.sum())

        timed = WalkConfig(
            mode=WalkMode.CONTINUOUS, horizon=1.0, seed=SEED, replicate_index=index
        )
        holding = HoldingSource(timed.key).take(truncation + 1)
        assert origin_local_time_sample(timed, truncation).value == math.fsum(
            holding[at_origin]
        )
