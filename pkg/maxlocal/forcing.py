"""
Forcing construction for downward deviations.

Once a site's jump-sampled local time passes the level Lambda = beta log(n) /
gamma - eta, the post-threshold part of its crossing holding time and every
later holding time there are capped by the schedule eta / 2^{k+1}. The event B
that all caps hold keeps every site below beta log(n) / gamma through the
jump horizon n_hat = floor(n + n^kappa).
"""

import logging
import math
from functools import partial
from typing import Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np
import polars as pl

from maxlocal.constants import (
    DEFAULT_KAPPA,
    HOLDING_STREAM_OFFSET,
    MIN_POOLED_HOLDING_TIMES,
    Z_THRESHOLD,
    ReportFlag,
    WalkMode,
)
from maxlocal.laws import law_report, tail_exponential_theory
from maxlocal.models import (
    BEstimate,
    Crossing,
    ForcingTrace,
    LawCheckReport,
    SegmentStats,
    WalkConfig,
    WeightedSample,
)
from maxlocal.runner import ReplicateRunner
from maxlocal.stats import (
    Accumulator,
    StreamKey,
    ks_distance,
    normal_interval,
    wilson_interval,
)
from maxlocal.walk import (
    ContinuousWalkResult,
    StepSource,
    poisson_sandwich_check,
    simulate_jumps,
)

logger = logging.getLogger(__name__)

HOLDING_LAW_LEVELS = (0.1, 0.25, 0.5, 1.0, 1.5, 2.0, 3.0)


def jump_horizon(n: int, kappa: float = DEFAULT_KAPPA) -> int:
    return math.floor(n + n**kappa)


def forcing_level(beta: float, eta: float, n: int, gamma: float) -> float:
    return beta * math.log(n) / gamma - eta


def target_level(beta: float, n: int, gamma: float) -> float:
    return beta * math.log(n) / gamma


def step_cap(eta: float, k: int) -> float:
    return eta / 2 ** (k + 1)


def validate_eta(eta: float, delta: float, gamma: float) -> None:
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}.")
    if not math.expm1(2.0 * gamma * eta) < delta / 2.0:
        raise ValueError(
            f"eta={eta} violates exp(2 gamma eta) - 1 < delta/2 "
            f"with gamma={gamma:.6f}, delta={delta}."
        )


def _site_ids(path: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    sites, inverse = np.unique(path, axis=0, return_inverse=True)
    return sites, inverse.reshape(-1)


def detect_forcing_trace(
    run: ContinuousWalkResult,
    beta: float,
    eta: float,
    n: int,
    gamma: float,
    kappa: float = DEFAULT_KAPPA,
    seed: int = 0,
    replicate_index: int = 0,
) -> ForcingTrace:
    """
    Replay the jump chain through n_hat and record every site whose local time
    strictly exceeds Lambda, in order of crossing.

    Args:
        run: Jump-sampled run with recorded path, covering n_hat jumps
        beta: Deviation scale, 0 < beta <= 1
        eta: Forcing margin
        n: Nominal horizon
        gamma: Escape probability
        kappa: Jump horizon exponent

    Returns:
        ForcingTrace: Crossings with return counts and post-threshold times
    """
    n_hat = jump_horizon(n, kappa)
    path = run.skeleton.path
    if path is None:
        raise ValueError("Forcing traces need a run with a recorded path.")
    if run.jumps < n_hat:
        raise ValueError(f"Run covers {run.jumps} jumps, forcing needs {n_hat}.")
    path = path[: n_hat + 1]
    holding = np.asarray(run.holding_times[: n_hat + 1], dtype=float)
    lam = forcing_level(beta, eta, n, gamma)

    sites, inverse = _site_ids(path)
    totals = np.bincount(inverse, weights=holding, minlength=len(sites))
    crossings: List[Crossing] = []
    # Equality with Lambda is no crossing.
    for site_id in np.flatnonzero(totals > lam):
        slots = np.flatnonzero(inverse == site_id)
        cumulative = np.cumsum(holding[slots])
        r = int(np.argmax(cumulative > lam))
        if cumulative[r] <= lam:
            continue
        before = cumulative[r - 1] if r else 0.0
        post = [float(cumulative[r] - lam)] + holding[slots[r + 1 :]].tolist()
        crossings.append(
            Crossing(
                site=tuple(int(c) for c in sites[site_id]),
                index=0,
                step=int(slots[r]),
                returns=len(slots) - r - 1,
                pre_threshold=float(lam - before),
                holding_times=post,
            )
        )

    crossings.sort(key=lambda c: c.step)
    for index, crossing in enumerate(crossings, start=1):
        crossing.index = index
    in_b = all(
        h < step_cap(eta, k)
        for crossing in crossings
        for k, h in enumerate(crossing.holding_times)
    )
    return ForcingTrace(
        lam=lam,
        eta=eta,
        n=n,
        n_hat=n_hat,
        seed=seed,
        replicate_index=replicate_index,
        crossings=crossings,
        in_B=in_b,
    )


def post_threshold_time(crossing: Crossing) -> float:
    return math.fsum(crossing.holding_times)


def check_inclusion(
    trace: ForcingTrace, run: ContinuousWalkResult, beta: float, gamma: float
) -> bool:
    """
    True when the trace violates B => max jump-sampled local time through
    n_hat stays at most beta log(n) / gamma. Traces outside B never violate.
    """
    if run.jumps < trace.n_hat or run.skeleton.path is None:
        raise ValueError("Run does not cover the trace's jump horizon.")
    path = run.skeleton.path[: trace.n_hat + 1]
    holding = np.asarray(run.holding_times[: trace.n_hat + 1], dtype=float)
    sites, inverse = _site_ids(path)
    totals = np.bincount(inverse, weights=holding, minlength=len(sites))
    if int(np.sum(totals > trace.lam)) != len(trace.crossings):
        raise ValueError("Trace and run disagree on the crossing sites.")
    if not trace.in_B:
        return False
    return bool(totals.max() > target_level(beta, trace.n, gamma))


def conditional_B_probability(counts: Tuple[int, Sequence[int]], eta: float) -> float:
    """Product over crossings j and k = 0..M_j of (1 - exp(-eta / 2^{k+1}))."""
    n_crossings, returns = counts
    if len(returns) != n_crossings:
        raise ValueError(f"Expected {n_crossings} return counts, got {len(returns)}.")
    log_p = math.fsum(
        math.log(-math.expm1(-step_cap(eta, k)))
        for m in returns
        for k in range(m + 1)
    )
    return math.exp(log_p)


def _holding_law_report(
    levels: Sequence[float],
    successes: Sequence[int],
    n_samples: int,
    reservoir: Sequence[float],
) -> LawCheckReport:
    theory_fn = partial(tail_exponential_theory, gamma=1.0)
    ks = ks_distance(reservoir, lambda x: -np.expm1(-np.asarray(x, dtype=float)))
    report = law_report(levels, successes, n_samples, theory_fn, ks)
    if n_samples < MIN_POOLED_HOLDING_TIMES:
        logger.warning(f"Only {n_samples} pooled holding times")
        if ReportFlag.UNDERPOWERED.value not in report.flags:
            report.flags.append(ReportFlag.UNDERPOWERED.value)
    return report


def holding_time_law_check(traces: Sequence[ForcingTrace]) -> LawCheckReport:
    """Pooled post-threshold holding times against the unit exponential law."""
    pooled = np.array(
        [h for trace in traces for crossing in trace.crossings for h in crossing.holding_times]
    )
    if not pooled.size:
        raise ValueError("No post-threshold holding times to pool.")
    successes = [int(np.sum(pooled > level)) for level in HOLDING_LAW_LEVELS]
    return _holding_law_report(HOLDING_LAW_LEVELS, successes, pooled.size, pooled)


def holding_law_from_accumulators(accumulators: Dict[str, Accumulator]) -> LawCheckReport:
    pooled = accumulators.get("holding")
    if pooled is None or pooled.count == 0:
        raise ValueError("No post-threshold holding times to pool.")
    successes = [
        int(round(accumulators[holding_key(level)].sum)) for level in HOLDING_LAW_LEVELS
    ]
    return _holding_law_report(
        HOLDING_LAW_LEVELS, successes, pooled.count, pooled.samples()
    )


def holding_key(level: float) -> str:
    return f"holding>{level:g}"


def bin_key(counts: Tuple[int, Sequence[int]]) -> str:
    n_crossings, returns = counts
    return f"bin:{n_crossings}:" + ",".join(str(m) for m in returns)


def parse_bin_key(key: str) -> Tuple[int, List[int]]:
    _, n_crossings, returns = key.split(":")
    return int(n_crossings), [int(m) for m in returns.split(",") if m]


def product_formula_table(bins: Dict[str, Tuple[int, int]], eta: float) -> pl.DataFrame:
    """
    Per (N, M_1..M_N) class: number of traces, frequency of B, the conditional
    product formula and the z-score on its standard error (floored at 1/traces).

    Args:
        bins: Bin key -> (traces, traces in B)
        eta: Forcing margin

    Returns:
        pl.DataFrame: One row per class, most populated first
    """
    rows = []
    for key, (traces, hits) in bins.items():
        theory = conditional_B_probability(parse_bin_key(key), eta)
        stderr = max(math.sqrt(theory * (1.0 - theory) / traces), 1.0 / traces)
        empirical = hits / traces
        rows.append(
            {
                "bin": key.removeprefix("bin:"),
                "traces": traces,
                "empirical": empirical,
                "theory": theory,
                "stderr": stderr,
                "z": (empirical - theory) / stderr,
            }
        )
    schema = {
        "bin": pl.String,
        "traces": pl.Int64,
        "empirical": pl.Float64,
        "theory": pl.Float64,
        "stderr": pl.Float64,
        "z": pl.Float64,
    }
    table = pl.DataFrame(rows, schema=schema).sort(
        ["traces", "bin"], descending=[True, False]
    )
    if len(table) and table["z"].abs().max() > Z_THRESHOLD:
        logger.warning(f"Product formula: max |z| = {table['z'].abs().max():.2f}")
    return table


def product_formula_check(traces: Sequence[ForcingTrace], eta: float) -> pl.DataFrame:
    """
    Empirical frequency of B within each (N, M_1..M_N) class against the
    conditional product formula.
    """
    bins: Dict[str, Tuple[int, int]] = {}
    for trace in traces:
        count, hits = bins.get(bin_key(trace.counts), (0, 0))
        bins[bin_key(trace.counts)] = (count + 1, hits + int(trace.in_B))
    return product_formula_table(bins, eta)


def product_formula_from_accumulators(
    accumulators: Dict[str, Accumulator], eta: float
) -> pl.DataFrame:
    bins = {
        name: (acc.count, int(round(acc.sum)))
        for name, acc in accumulators.items()
        if name.startswith("bin:")
    }
    return product_formula_table(bins, eta)


def _walk_config(key: StreamKey, d: int, n_hat: int) -> WalkConfig:
    return WalkConfig(
        d=d,
        mode=WalkMode.CONTINUOUS,
        horizon=max(n_hat, 1),
        seed=key.seed,
        replicate_index=key.replicate_index,
        record_path=True,
    )


def forcing_trace_for(
    key: StreamKey, d: int, beta: float, eta: float, n: int, gamma: float, kappa: float
) -> Tuple[ForcingTrace, ContinuousWalkResult]:
    n_hat = jump_horizon(n, kappa)
    run = simulate_jumps(_walk_config(key, d, n_hat), n_hat)
    trace = detect_forcing_trace(
        run, beta, eta, n, gamma, kappa, key.seed, key.replicate_index
    )
    return trace, run


def weighted_trace(
    key: StreamKey,
    d: int,
    beta: float,
    eta: float,
    n: int,
    gamma: float,
    kappa: float = DEFAULT_KAPPA,
) -> WeightedSample:
    """
    One sequential importance sample: the skeleton is the replicate's walk,
    holding times are drawn chronologically, and every constrained slot draws
    from the unit exponential truncated to [0, cap) while the weight picks up
    the factor 1 - exp(-cap). The mean weight is P(B).
    """
    n_hat = jump_horizon(n, kappa)
    lam = forcing_level(beta, eta, n, gamma)
    path = StepSource(key, d).positions(n_hat)
    sites, inverse = _site_ids(path)
    rng = key.generator(HOLDING_STREAM_OFFSET)
    unconstrained = rng.random(n_hat + 1)
    constrained = rng.random(n_hat + 1)

    cumulative = np.zeros(len(sites))
    next_cap = np.full(len(sites), -1, dtype=np.int64)
    records: Dict[int, Crossing] = {}
    weight = 1.0
    for j in range(n_hat + 1):
        s = int(inverse[j])
        k = int(next_cap[s])
        if k >= 0:
            mass = -math.expm1(-step_cap(eta, k))
            h = -math.log1p(-constrained[j] * mass)
            weight *= mass
            next_cap[s] = k + 1
            records[s].holding_times.append(h)
            records[s].returns += 1
            cumulative[s] += h
            continue
        h = -math.log1p(-unconstrained[j])
        if cumulative[s] + h > lam:
            sigma_1 = lam - cumulative[s]
            mass = -math.expm1(-step_cap(eta, 0))
            sigma_2 = -math.log1p(-constrained[j] * mass)
            weight *= mass
            next_cap[s] = 1
            records[s] = Crossing(
                site=tuple(int(c) for c in sites[s]),
                index=len(records) + 1,
                step=j,
                returns=0,
                pre_threshold=sigma_1,
                holding_times=[sigma_2],
            )
            h = sigma_1 + sigma_2
        cumulative[s] += h

    trace = ForcingTrace(
        lam=lam,
        eta=eta,
        n=n,
        n_hat=n_hat,
        seed=key.seed,
        replicate_index=key.replicate_index,
        crossings=sorted(records.values(), key=lambda c: c.step),
        in_B=True,
    )
    return WeightedSample(
        weight=weight,
        target_hit=bool(cumulative.max() <= target_level(beta, n, gamma)),
        trace=trace,
    )


def observe_weight(key: StreamKey, **kwargs) -> Dict[str, float]:
    sample = weighted_trace(key, **kwargs)
    return {"weight": sample.weight, "target_hit": float(sample.target_hit)}


def observe_forcing(
    key: StreamKey,
    d: int,
    beta: float,
    eta: float,
    n: int,
    gamma: float,
    kappa: float,
) -> Dict[str, object]:
    """
    Everything the forcing checks need from one unconstrained replicate: B,
    the inclusion and geometric-cap checks, pooled post-threshold holding
    times with their exceedance counts, and a counter for the trace's
    (N, M) class.
    """
    trace, run = forcing_trace_for(key, d, beta, eta, n, gamma, kappa)
    pooled = [h for crossing in trace.crossings for h in crossing.holding_times]
    cap_broken = trace.in_B and any(
        post_threshold_time(crossing) >= eta for crossing in trace.crossings
    )
    observation: Dict[str, object] = {
        "in_B": float(trace.in_B),
        "violation": float(check_inclusion(trace, run, beta, gamma)),
        "cap_violation": float(cap_broken),
        "crossings": float(len(trace.crossings)),
        "holding": pooled,
        bin_key(trace.counts): float(trace.in_B),
    }
    for level in HOLDING_LAW_LEVELS:
        observation[holding_key(level)] = float(sum(h > level for h in pooled))
    return observation


def forcing_stage(n: int) -> str:
    return f"forcing:traces:n={n}"


def naive_estimate(hits: Accumulator) -> BEstimate:
    successes = int(round(hits.sum))
    p = successes / hits.count
    lo, hi = wilson_interval(successes, hits.count)
    return BEstimate(
        estimate=p,
        stderr=math.sqrt(p * (1.0 - p) / hits.count),
        ci_lo=lo,
        ci_hi=hi,
        reps=hits.count,
        method="naive",
    )


def weighted_B_sampler(
    beta: float,
    eta: float,
    n: int,
    reps: int,
    seed: int,
    gamma: float,
    d: int = 3,
    kappa: float = DEFAULT_KAPPA,
    runner: Optional[ReplicateRunner] = None,
) -> BEstimate:
    """Mean importance weight as an estimate of P(B), with a normal interval."""
    if eta <= 0 or not 0.0 < beta <= 1.0:
        raise ValueError("Weighted sampler needs eta > 0 and 0 < beta <= 1.")
    runner = runner or ReplicateRunner()
    accumulators = runner.run(
        f"forcing:weighted:n={n}",
        partial(
            observe_weight, d=d, beta=beta, eta=eta, n=n, gamma=gamma, kappa=kappa
        ),
        seed=seed,
        reps=reps,
    )
    weights = accumulators["weight"]
    stderr = weights.stderr if weights.count > 1 else 0.0
    lo, hi = normal_interval(weights.mean, stderr)
    return BEstimate(
        estimate=weights.mean,
        stderr=stderr,
        ci_lo=max(lo, 0.0),
        ci_hi=min(hi, 1.0),
        reps=weights.count,
        method="weighted",
    )


def naive_B_frequency(
    beta: float,
    eta: float,
    n: int,
    reps: int,
    seed: int,
    gamma: float,
    d: int = 3,
    kappa: float = DEFAULT_KAPPA,
    runner: Optional[ReplicateRunner] = None,
) -> BEstimate:
    """Direct frequency of B over unconstrained replicates, Wilson interval."""
    runner = runner or ReplicateRunner()
    accumulators = runner.run(
        forcing_stage(n),
        partial(
            observe_forcing, d=d, beta=beta, eta=eta, n=n, gamma=gamma, kappa=kappa
        ),
        seed=seed,
        reps=reps,
    )
    return naive_estimate(accumulators["in_B"])


def validate_segment_exponents(beta1: float, beta2: float, d: int) -> None:
    if not 0.0 < 2.0 * beta1 / d < beta2 < beta1:
        raise ValueError(
            f"Segment exponents need 2 beta1/d < beta2 < beta1, "
            f"got beta1={beta1}, beta2={beta2}, d={d}."
        )


def _max_segments_per_site(
    path: np.ndarray, segment: np.ndarray, keep: np.ndarray
) -> Tuple[int, np.ndarray]:
    pairs = np.unique(np.column_stack([path[keep], segment[keep]]), axis=0)
    if not len(pairs):
        return 0, np.zeros(1, dtype=np.int64)
    _, per_site = np.unique(pairs[:, :-1], axis=0, return_counts=True)
    return int(per_site.max()), np.bincount(per_site)


def segment_visit_stats(
    path: np.ndarray, beta1: float, beta2: float, n: int
) -> SegmentStats:
    """
    Split [0, n_hat] into segments of floor(n^beta1) steps and count, per site,
    the segments that visit it. The shortened variant drops the first
    floor(n^beta2) steps of each segment.
    """
    path = np.asarray(path, dtype=np.int64)
    validate_segment_exponents(beta1, beta2, path.shape[1])
    n_hat = len(path) - 1
    length = max(1, math.floor(n**beta1))
    skip = math.floor(n**beta2)
    steps = np.arange(n_hat + 1)
    segment = steps // length
    max_visits, histogram = _max_segments_per_site(
        path, segment, np.ones(n_hat + 1, dtype=bool)
    )
    shortened, _ = _max_segments_per_site(path, segment, steps % length >= skip)
    return SegmentStats(
        n=n,
        n_hat=n_hat,
        block_length=length,
        blocks=n_hat // length + 1,
        max_visits=max_visits,
        max_visits_shortened=shortened,
        histogram=histogram.tolist(),
    )


def observe_segments(
    key: StreamKey, d: int, n: int, beta1: float, beta2: float, kappa: float
) -> Dict[str, float]:
    n_hat = jump_horizon(n, kappa)
    path = StepSource(key, d).positions(n_hat)
    stats = segment_visit_stats(path, beta1, beta2, n)
    return {
        "max": stats.max_visits,
        "max_shortened": stats.max_visits_shortened,
        f"max={stats.max_visits}": 1.0,
    }


def observe_sandwich(key: StreamKey, d: int, t: float, kappa: float) -> Dict[str, float]:
    cfg = WalkConfig(
        d=d,
        mode=WalkMode.CONTINUOUS,
        horizon=t,
        seed=key.seed,
        replicate_index=key.replicate_index,
    )
    return {"sandwich": float(poisson_sandwich_check(cfg, kappa))}


def dump_trace(trace: ForcingTrace, file: TextIO) -> None:
    """One crossing per line: site coordinates, j, M_j, then h^0..h^M."""
    for crossing in trace.crossings:
        fields = [str(c) for c in crossing.site]
        fields += [str(crossing.index), str(crossing.returns)]
        fields += [repr(h) for h in crossing.holding_times]
        file.write(" ".join(fields) + "\n")
