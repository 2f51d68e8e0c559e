"""
Exact local-time laws, the exceedance count and its last-visit representation,
with theory evaluators and empirical checkers.
"""

import logging
import math
from collections import defaultdict
from functools import partial
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import polars as pl

from maxlocal.constants import (
    FLOOR_SNAP,
    Z_THRESHOLD,
    ReportFlag,
    WalkMode,
)
from maxlocal.models import GammaAlpha, LawCheckReport, ThresholdSpec, WalkConfig
from maxlocal.runner import ReplicateRunner
from maxlocal.stats import Accumulator, StreamKey, ks_distance
from maxlocal.walk import (
    LocalTimeField,
    origin_local_time_sample,
    run_discrete,
    simulate_jumps,
    two_point_local_time_sample,
)

logger = logging.getLogger(__name__)

MIN_LAW_SAMPLES = 1000

TailFunction = Callable[[np.ndarray], np.ndarray]


# Thresholds


def snapped_floor(x: float) -> int:
    nearest = round(x)
    if abs(x - nearest) <= FLOOR_SNAP:
        return int(nearest)
    return math.floor(x)


def _require_discrete(spec: ThresholdSpec) -> None:
    if spec.mode != WalkMode.DISCRETE:
        raise ValueError("The discrete threshold needs a discrete ThresholdSpec.")


def threshold_argument(spec: ThresholdSpec, gamma_alpha: GammaAlpha) -> float:
    return spec.beta * gamma_alpha.alpha * math.log(spec.horizon) + spec.u


def threshold_m(spec: ThresholdSpec, gamma_alpha: GammaAlpha) -> int:
    """m_n = floor(beta alpha log n + u); may be negative."""
    _require_discrete(spec)
    return snapped_floor(threshold_argument(spec, gamma_alpha))


def threshold_b(spec: ThresholdSpec, gamma: float) -> float:
    """Continuous threshold b_t = beta log(t) / gamma + u."""
    return spec.beta * math.log(spec.horizon) / gamma + spec.u


def c_factor(spec: ThresholdSpec, gamma_alpha: GammaAlpha) -> float:
    """
    c = n^beta (1-gamma)^{-u} (1-gamma)^{floor(x)}, x = beta alpha log n + u,
    evaluated as (1-gamma)^{floor(x) - x} = exp(frac(x) / alpha).
    """
    _require_discrete(spec)
    x = threshold_argument(spec, gamma_alpha)
    fraction = max(x - snapped_floor(x), 0.0)
    c = math.exp(fraction / gamma_alpha.alpha)
    if not 1.0 <= c < 1.0 / (1.0 - gamma_alpha.gamma):
        raise ValueError(f"c factor {c} outside [1, 1/(1-gamma)).")
    return c


def c_factor_direct(spec: ThresholdSpec, gamma_alpha: GammaAlpha) -> float:
    # Literal power form; overflows for large n.
    q = 1.0 - gamma_alpha.gamma
    m = snapped_floor(threshold_argument(spec, gamma_alpha))
    return spec.horizon**spec.beta * q ** (-spec.u) * q**m


# Theory evaluators


def tail_geometric_theory(m, gamma: float):
    """P(xi(inf, 0) > m) = (1 - gamma)^m."""
    return np.power(1.0 - gamma, m)


def tail_exponential_theory(s, gamma: float):
    """P(l(inf, 0) > s) = exp(-gamma s)."""
    return np.exp(-gamma * np.asarray(s, dtype=float))


def two_point_tail_theory(u, t_y: float, gamma: float):
    """Discrete two-point tail: geometric with success gamma / (1 + t_y)."""
    return np.power(1.0 - gamma / (1.0 + t_y), u)


def two_point_tail_theory_continuous(s, t_y: float, gamma: float):
    return np.exp(-gamma * np.asarray(s, dtype=float) / (1.0 + t_y))


def one_point_tail_at_scale(spec: ThresholdSpec, gamma_alpha: GammaAlpha) -> float:
    """
    One-point tail at the deviation scale: c (1-gamma)^u n^{-beta} in discrete
    time and t^{-beta} exp(-gamma u) in continuous time.
    """
    gamma = gamma_alpha.gamma
    if spec.mode == WalkMode.DISCRETE:
        return (
            c_factor(spec, gamma_alpha)
            * (1.0 - gamma) ** spec.u
            * spec.horizon ** (-spec.beta)
        )
    return spec.horizon ** (-spec.beta) * math.exp(-gamma * spec.u)


def first_moment_theory(spec: ThresholdSpec, gamma_alpha: GammaAlpha) -> float:
    """Leading order of E[N] (and of E[N^2]): c gamma (1-gamma)^u n^{1-beta}."""
    gamma = gamma_alpha.gamma
    return (
        c_factor(spec, gamma_alpha)
        * gamma
        * (1.0 - gamma) ** spec.u
        * spec.horizon ** (1.0 - spec.beta)
    )


# Empirical checks


def law_report(
    levels: Sequence[float],
    successes: Sequence[int],
    n_samples: int,
    theory_fn: TailFunction,
    ks: float,
) -> LawCheckReport:
    if n_samples < 1:
        raise ValueError("Law check needs at least one sample.")
    empirical, stderrs, theories, zs = [], [], [], []
    for level, hits in zip(levels, successes):
        p = float(theory_fn(np.asarray(level, dtype=float)))
        stderr = max(math.sqrt(p * (1.0 - p) / n_samples), 1.0 / n_samples)
        observed = hits / n_samples
        empirical.append(observed)
        stderrs.append(stderr)
        theories.append(p)
        zs.append((observed - p) / stderr)

    flags = []
    if n_samples < MIN_LAW_SAMPLES:
        logger.warning(f"Law check on {n_samples} samples is underpowered")
        flags.append(ReportFlag.UNDERPOWERED.value)
    report = LawCheckReport(
        levels=list(levels),
        empirical=empirical,
        stderr=stderrs,
        theory=theories,
        z=zs,
        ks_distance=ks,
        n_samples=n_samples,
        flags=flags,
    )
    if report.max_abs_z > Z_THRESHOLD:
        logger.warning(f"Law check: max |z| = {report.max_abs_z:.2f}")
    return report


def _cdf_from_tail(theory_fn: TailFunction) -> TailFunction:
    return lambda x: np.clip(1.0 - theory_fn(np.asarray(x, dtype=float)), 0.0, 1.0)


def empirical_law_check(
    samples: Sequence[float],
    theory_fn: TailFunction,
    levels: Sequence[float],
    lattice: bool = False,
) -> LawCheckReport:
    """
    Compare P(X > level) empirically and in theory, with z-scores on the
    theoretical standard error and the KS distance between the laws.

    Args:
        samples: Observed values
        theory_fn: Tail function level -> P(X > level)
        levels: Levels to compare at
        lattice: Integer-valued law, KS over the integer support

    Returns:
        LawCheckReport: Per-level comparison
    """
    x = np.asarray(samples, dtype=float)
    if x.size == 0:
        raise ValueError("Law check needs a nonempty sample set.")
    levels = sorted(levels)
    successes = [int(np.sum(x > level)) for level in levels]
    ks = ks_distance(x, _cdf_from_tail(theory_fn), lattice=lattice)
    return law_report(levels, successes, x.size, theory_fn, ks)


def law_check_from_accumulators(
    levels: Sequence[float],
    accumulators: Dict[str, Accumulator],
    theory_fn: TailFunction,
    lattice: bool = False,
) -> LawCheckReport:
    """Law check on exceedance indicators and the reservoir of values."""
    levels = sorted(levels)
    n_samples = accumulators["value"].count
    successes = [int(round(accumulators[level_key(level)].sum)) for level in levels]
    reservoir = accumulators["value"].samples()
    ks = ks_distance(reservoir, _cdf_from_tail(theory_fn), lattice=lattice)
    return law_report(levels, successes, n_samples, theory_fn, ks)


def level_key(level: float) -> str:
    return f"exceeds:{level:g}"


def observe_origin_law(
    key: StreamKey,
    d: int,
    mode: WalkMode,
    truncation: int,
    levels: Sequence[float],
) -> Dict[str, float]:
    cfg = WalkConfig(
        d=d, mode=mode, horizon=1, seed=key.seed, replicate_index=key.replicate_index
    )
    value = origin_local_time_sample(cfg, truncation).value
    return _law_observation(value, levels)


def observe_two_point_law(
    key: StreamKey,
    d: int,
    mode: WalkMode,
    y: Sequence[int],
    truncation: int,
    levels: Sequence[float],
) -> Dict[str, float]:
    cfg = WalkConfig(
        d=d, mode=mode, horizon=1, seed=key.seed, replicate_index=key.replicate_index
    )
    value = two_point_local_time_sample(cfg, y, truncation).value
    return _law_observation(value, levels)


def _law_observation(value: float, levels: Sequence[float]) -> Dict[str, float]:
    observation = {"value": value}
    for level in levels:
        observation[level_key(level)] = float(value > level)
    return observation


# Exceedance counting


def _check_level(level: float) -> None:
    # Below zero every visited site exceeds the level, which no representation sum counts.
    if level < 0:
        raise ValueError(f"Exceedance level must be nonnegative, got {level}.")


def count_exceedances(field: LocalTimeField, m: float) -> int:
    """N = number of sites whose local time strictly exceeds m."""
    _check_level(m)
    if field.mode != WalkMode.DISCRETE:
        raise ValueError("count_exceedances needs a discrete field.")
    return int(np.sum(field.occupations > m))


def count_via_representation(path: Optional[np.ndarray], n: int, m: int) -> int:
    """
    Sum over j of 1{#visits of S_j during [j, n] = m + 1}: every site above m
    is counted once, at its (m+1)-st last visit. One backward sweep.
    """
    _check_level(m)
    if path is None:
        raise ValueError("count_via_representation needs a recorded path.")
    if len(path) != n + 1:
        raise ValueError(f"Path has {len(path)} sites, expected {n + 1}.")
    forward_visits: Dict[tuple, int] = defaultdict(int)
    count = 0
    for site in reversed([tuple(row) for row in np.asarray(path).tolist()]):
        forward_visits[site] += 1
        if forward_visits[site] == m + 1:
            count += 1
    return count


def count_exceedances_jump_sampled(field: LocalTimeField, b: float) -> int:
    _check_level(b)
    if field.mode != WalkMode.CONTINUOUS:
        raise ValueError("count_exceedances_jump_sampled needs a continuous field.")
    return int(np.sum(field.occupations > b))


def count_via_representation_jump_sampled(
    path: np.ndarray, holding_times: np.ndarray, b: float
) -> int:
    """
    Sum over j of 1{l([j,n], S_j) > b >= l([j+1,n], S_j)}, swept backwards.
    """
    _check_level(b)
    if len(path) != len(holding_times):
        raise ValueError("Path and holding times must have the same length.")
    forward_time: Dict[tuple, float] = defaultdict(float)
    count = 0
    rows = np.asarray(path).tolist()
    for j in range(len(rows) - 1, -1, -1):
        site = tuple(rows[j])
        before = forward_time[site]
        after = before + float(holding_times[j])
        forward_time[site] = after
        if after > b >= before:
            count += 1
    return count


def observe_exceedances(key: StreamKey, d: int, n: int, m: int) -> Dict[str, float]:
    cfg = WalkConfig(
        d=d,
        horizon=n,
        seed=key.seed,
        replicate_index=key.replicate_index,
    )
    return {"count": count_exceedances(run_discrete(cfg).field, m)}


def observe_exceedances_jump_sampled(
    key: StreamKey, d: int, n: int, b: float
) -> Dict[str, float]:
    cfg = WalkConfig(
        d=d,
        mode=WalkMode.CONTINUOUS,
        horizon=n,
        seed=key.seed,
        replicate_index=key.replicate_index,
    )
    return {"count": count_exceedances_jump_sampled(simulate_jumps(cfg, n).field, b)}


def observe_counting_identity(
    key: StreamKey, d: int, n: int, ms: Sequence[int], bs: Sequence[float]
) -> Dict[str, float]:
    """
    Number of thresholds at which a direct count and its last-visit
    representation disagree, for the discrete walk (ms) and the jump-sampled
    walk (bs) on the same key.
    """
    discrete = run_discrete(
        WalkConfig(
            d=d,
            horizon=n,
            seed=key.seed,
            replicate_index=key.replicate_index,
            record_path=True,
        )
    )
    mismatches = sum(
        count_exceedances(discrete.field, m)
        != count_via_representation(discrete.path, n, m)
        for m in ms
    )
    jumps = simulate_jumps(
        WalkConfig(
            d=d,
            mode=WalkMode.CONTINUOUS,
            horizon=n,
            seed=key.seed,
            replicate_index=key.replicate_index,
        ),
        n,
    )
    mismatches += sum(
        count_exceedances_jump_sampled(jumps.field, b)
        != count_via_representation_jump_sampled(
            jumps.skeleton.path, jumps.holding_times, b
        )
        for b in bs
    )
    return {"mismatches": float(mismatches)}


def moment_report(
    horizons: Sequence[int],
    beta: float,
    u: float,
    gamma_alpha: GammaAlpha,
    reps: int,
    seed: int,
    runner: Optional[ReplicateRunner] = None,
) -> pl.DataFrame:
    """
    Empirical first and second moments of N along a ladder of horizons,
    against the leading-order formula. The bands applied to the ratios are
    reporting policy, so every row carries ARTIFACT_BAND.
    """
    if beta <= 1.0:
        raise ValueError(f"The moment formulas hold for beta > 1, got {beta}.")
    runner = runner or ReplicateRunner()
    d = gamma_alpha.d
    rows: List[dict] = []
    for n in horizons:
        spec = ThresholdSpec(beta=beta, u=u, horizon=n)
        m = threshold_m(spec, gamma_alpha)
        if m < 0:
            raise ValueError(f"Threshold m_n = {m} is negative at n={n}; raise u or n.")
        accumulators = runner.run(
            f"moments:n={n}",
            partial(observe_exceedances, d=d, n=int(n), m=m),
            seed=seed,
            reps=reps,
        )
        count = accumulators["count"]
        mean = count.mean
        second = count.sum_sq / count.count
        theory = first_moment_theory(spec, gamma_alpha)
        rows.append(
            {
                "n": int(n),
                "m": m,
                "reps": count.count,
                "mean": mean,
                "mean_stderr": count.stderr,
                "second_moment": second,
                "theory": theory,
                "ratio": mean / theory if theory > 0 else math.nan,
                "second_over_first": second / mean if mean > 0 else math.nan,
                "var_over_mean": count.variance / mean if mean > 0 else math.nan,
                "flags": ReportFlag.ARTIFACT_BAND.value,
            }
        )
        logger.info(f"Moments n={n}: E[N]={mean:.4g} theory={theory:.4g}")
    return pl.DataFrame(rows)
