"""
Upward and downward deviations of the maximum local time, their moderate
forms, the Gumbel limit at the critical scale and the block-product bound.
"""

import logging
import math
from functools import partial
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import polars as pl
from scipy import stats as sps

from maxlocal.constants import (
    UNDERPOWERED_FACTOR,
    Direction,
    ReportFlag,
    WalkMode,
)
from maxlocal.laws import c_factor, snapped_floor, threshold_argument, threshold_b
from maxlocal.models import (
    BlockBoundReport,
    GammaAlpha,
    TailQuery,
    TailReport,
    ThresholdSpec,
    WalkConfig,
)
from maxlocal.runner import ReplicateRunner
from maxlocal.stats import StreamKey, derived_seed, ks_distance, wilson_interval
from maxlocal.walk import run_continuous, run_discrete

logger = logging.getLogger(__name__)

MIN_TAIL_REPS = 1000


def _spec(query: TailQuery) -> ThresholdSpec:
    return ThresholdSpec(
        beta=query.beta, u=query.u, horizon=query.horizon, mode=query.mode
    )


def upward_tail_theory(query: TailQuery, gamma_alpha: GammaAlpha) -> float:
    """
    Leading order of P(max local time above beta times its typical scale):
    gamma exp(-gamma u) t^{1-beta} in continuous time and
    gamma n (1-gamma)^{floor(beta alpha log n + u)} in discrete time.
    """
    if query.direction != Direction.UP or query.beta < 1.0:
        raise ValueError(f"Upward theory needs direction up and beta > 1, got {query.beta}.")
    if query.beta == 1.0:
        logger.warning("Upward theory evaluated at beta = 1, outside its range")
    gamma = gamma_alpha.gamma
    if query.mode == WalkMode.CONTINUOUS:
        return gamma * math.exp(-gamma * query.u) * query.horizon ** (1.0 - query.beta)
    m = snapped_floor(threshold_argument(_spec(query), gamma_alpha))
    return math.exp(math.log(gamma) + math.log(query.horizon) + m * math.log1p(-gamma))


def upward_tail_theory_rewritten(query: TailQuery, gamma_alpha: GammaAlpha) -> float:
    """Discrete upward form as c gamma (1-gamma)^u n^{1-beta}."""
    gamma = gamma_alpha.gamma
    return (
        c_factor(_spec(query), gamma_alpha)
        * gamma
        * (1.0 - gamma) ** query.u
        * query.horizon ** (1.0 - query.beta)
    )


def downward_tail_theory(
    query: TailQuery, gamma_alpha: GammaAlpha
) -> Tuple[float, float]:
    """
    Probability exp(-E) and exponent E of a downward deviation, with
    E = gamma exp(-gamma u) t^{1-beta} (continuous) or
    E = c gamma (1-gamma)^u n^{1-beta} (discrete, an upper bound).
    """
    if query.direction != Direction.DOWN or query.beta > 1.0:
        raise ValueError(
            f"Downward theory needs direction down and beta <= 1, got {query.beta}."
        )
    gamma = gamma_alpha.gamma
    if query.mode == WalkMode.CONTINUOUS:
        exponent = gamma * math.exp(-gamma * query.u) * query.horizon ** (1.0 - query.beta)
    else:
        exponent = (
            c_factor(_spec(query), gamma_alpha)
            * gamma
            * (1.0 - gamma) ** query.u
            * query.horizon ** (1.0 - query.beta)
        )
    return math.exp(-exponent), exponent


def moderate_tail_theory(
    mode: WalkMode,
    direction: Direction,
    a: float,
    gamma_alpha: GammaAlpha,
    horizon: Optional[float] = None,
) -> float:
    """
    Moderate-deviation leading forms at offset a from the typical scale:
    continuous up gamma e^{-gamma a}, continuous down exp(-gamma e^{gamma a}),
    discrete up gamma n (1-gamma)^{floor(alpha log n + a)} and discrete down
    exp(-gamma n (1-gamma)^{floor(alpha log n - a)}).
    """
    if a < 0:
        raise ValueError(f"Moderate offset must be nonnegative, got {a}.")
    gamma, alpha = gamma_alpha.gamma, gamma_alpha.alpha
    if mode == WalkMode.CONTINUOUS:
        if direction == Direction.UP:
            return gamma * math.exp(-gamma * a)
        return math.exp(-gamma * math.exp(gamma * a))

    if horizon is None or horizon <= 1:
        raise ValueError("Discrete moderate forms need a horizon n > 1.")
    log_n = math.log(horizon)
    if direction == Direction.UP:
        m = math.floor(alpha * log_n + a)
        return math.exp(math.log(gamma) + log_n + m * math.log1p(-gamma))
    m = math.floor(alpha * log_n - a)
    return math.exp(-math.exp(math.log(gamma) + log_n + m * math.log1p(-gamma)))


def gumbel_reference_cdf(u, gamma: float):
    """exp(-gamma e^{-gamma u}): Gumbel with mode log(gamma)/gamma, scale 1/gamma."""
    return np.exp(-gamma * np.exp(-gamma * np.asarray(u, dtype=float)))


# Monte Carlo


def max_local_time(key: StreamKey, d: int, mode: WalkMode, horizon: float) -> float:
    cfg = WalkConfig(
        d=d,
        mode=mode,
        horizon=horizon,
        seed=key.seed,
        replicate_index=key.replicate_index,
    )
    if mode == WalkMode.DISCRETE:
        return float(run_discrete(cfg).max_local_time)
    return run_continuous(cfg).max_local_time


def observe_threshold(
    key: StreamKey,
    d: int,
    mode: WalkMode,
    horizon: float,
    threshold: float,
    direction: Direction,
) -> Dict[str, float]:
    value = max_local_time(key, d, mode, horizon)
    hit = value > threshold if direction == Direction.UP else value <= threshold
    return {"hit": float(hit), "max": value}


def tail_threshold(query: TailQuery, gamma_alpha: GammaAlpha) -> float:
    if query.mode == WalkMode.DISCRETE:
        return threshold_argument(_spec(query), gamma_alpha)
    return threshold_b(_spec(query), gamma_alpha.gamma)


def tail_mc(
    query: TailQuery,
    gamma_alpha: GammaAlpha,
    runner: Optional[ReplicateRunner] = None,
) -> TailReport:
    """
    Fraction of replicates above (up) or at most at (down) the deviation
    threshold, with a Wilson interval and the ratio to the leading-order value.
    """
    runner = runner or ReplicateRunner()
    threshold = tail_threshold(query, gamma_alpha)
    accumulators = runner.run(
        f"tail:{query.mode.value}:{query.direction.value}:"
        f"beta={query.beta:g}:u={query.u:g}:h={query.horizon:g}",
        partial(
            observe_threshold,
            d=query.d,
            mode=query.mode,
            horizon=query.horizon,
            threshold=threshold,
            direction=query.direction,
        ),
        seed=query.seed,
        reps=query.reps,
    )
    successes = int(round(accumulators["hit"].sum))
    trials = accumulators["hit"].count
    empirical = successes / trials
    ci_lo, ci_hi = wilson_interval(successes, trials)

    flags = []
    exponent = log_ratio = upper_bound_ok = None
    if query.direction == Direction.UP:
        theory = upward_tail_theory(query, gamma_alpha)
        if query.beta == 1.0:
            flags.append(ReportFlag.BOUNDARY.value)
        if theory < UNDERPOWERED_FACTOR / trials:
            flags.append(ReportFlag.UNDERPOWERED.value)
    else:
        theory, exponent = downward_tail_theory(query, gamma_alpha)
        if successes > 0 and exponent > 0:
            log_ratio = -math.log(empirical) / exponent
        if query.mode == WalkMode.DISCRETE:
            upper_bound_ok = ci_lo <= 3.0 * theory
    if trials < MIN_TAIL_REPS and ReportFlag.UNDERPOWERED.value not in flags:
        flags.append(ReportFlag.UNDERPOWERED.value)
    for flag in flags:
        logger.warning(f"Tail query {query.direction.value} beta={query.beta}: {flag}")

    return TailReport(
        query=query,
        threshold=threshold,
        successes=successes,
        trials=trials,
        empirical=empirical,
        ci_lo=ci_lo,
        ci_hi=ci_hi,
        theory=theory,
        exponent=exponent,
        ratio=empirical / theory if theory > 0 else math.inf,
        log_ratio=log_ratio,
        upper_bound_ok=upper_bound_ok,
        flags=flags,
    )


def observe_centred_max(
    key: StreamKey, d: int, horizon: float, gamma: float
) -> Dict[str, float]:
    value = max_local_time(key, d, WalkMode.CONTINUOUS, horizon)
    return {"centred": value - math.log(horizon) / gamma}


def gumbel_fit(
    t_ladder: Sequence[float],
    reps: int,
    seed: int,
    gamma_alpha: GammaAlpha,
    runner: Optional[ReplicateRunner] = None,
) -> Tuple[pl.DataFrame, Dict[float, np.ndarray]]:
    """
    KS distance between the law of l*(t) - log(t)/gamma and the Gumbel limit
    along a ladder of horizons, plus a maximum-likelihood Gumbel fit.

    Returns:
        Tuple[pl.DataFrame, Dict[float, np.ndarray]]: One row per horizon and
        the centred samples per horizon
    """
    t_ladder = list(t_ladder)
    if any(b <= a for a, b in zip(t_ladder, t_ladder[1:])):
        raise ValueError(f"t_ladder must be increasing, got {t_ladder}.")
    runner = runner or ReplicateRunner()
    gamma = gamma_alpha.gamma
    rows, samples = [], {}
    for t in t_ladder:
        accumulators = runner.run(
            f"gumbel:t={t:g}",
            partial(observe_centred_max, d=gamma_alpha.d, horizon=t, gamma=gamma),
            seed=seed,
            reps=reps,
            reservoirs={"centred": reps},
        )
        values = accumulators["centred"].samples()
        loc, scale = sps.gumbel_r.fit(values)
        rows.append(
            {
                "t": t,
                "reps": len(values),
                "ks": ks_distance(values, partial(gumbel_reference_cdf, gamma=gamma)),
                "fit_loc": float(loc),
                "fit_scale": float(scale),
                "predicted_loc": math.log(gamma) / gamma,
                "predicted_scale": 1.0 / gamma,
            }
        )
        samples[t] = values
        logger.info(f"Gumbel t={t:g}: KS={rows[-1]['ks']:.4f}")
    return pl.DataFrame(rows), samples


def block_product_bound(
    beta: float,
    beta_prime: float,
    t: float,
    u: float,
    one_block: float,
    one_block_stderr: float,
    direct: Optional[float] = None,
    direct_stderr: Optional[float] = None,
) -> BlockBoundReport:
    """
    Upper bound on the downward probability from floor(t^{1-beta'}) independent
    sections of length t^{beta'}: P(l*(t^{beta'}) <= b)^{floor(t^{1-beta'})}.
    """
    if not 0.0 < beta_prime < beta <= 1.0:
        raise ValueError(
            f"Block bound needs 0 < beta' < beta <= 1, got beta'={beta_prime}, beta={beta}."
        )
    blocks = max(1, math.floor(t ** (1.0 - beta_prime)))
    bound = one_block**blocks
    bound_stderr = blocks * one_block ** (blocks - 1) * one_block_stderr
    flags = []
    if one_block == 0.0:
        logger.warning("Block bound: one-block estimate is zero")
        flags.append(ReportFlag.DEGENERATE.value)
    holds = None
    if direct is not None:
        combined = math.sqrt(bound_stderr**2 + (direct_stderr or 0.0) ** 2)
        holds = direct <= bound + 2.0 * combined
    return BlockBoundReport(
        beta=beta,
        beta_prime=beta_prime,
        t=t,
        u=u,
        blocks=blocks,
        block_length=t**beta_prime,
        one_block=one_block,
        one_block_stderr=one_block_stderr,
        bound=bound,
        bound_stderr=bound_stderr,
        direct=direct,
        direct_stderr=direct_stderr,
        holds=holds,
        flags=flags,
    )


def block_bound_mc(
    beta: float,
    beta_prime: float,
    t: float,
    u: float,
    reps: int,
    seed: int,
    gamma_alpha: GammaAlpha,
    runner: Optional[ReplicateRunner] = None,
) -> BlockBoundReport:
    """One-block and direct downward estimates, combined into the block bound."""
    if not 0.0 < beta_prime < beta <= 1.0:
        raise ValueError(
            f"Block bound needs 0 < beta' < beta <= 1, got beta'={beta_prime}, beta={beta}."
        )
    runner = runner or ReplicateRunner()
    threshold = beta * math.log(t) / gamma_alpha.gamma + u
    estimates = []
    # The two estimates enter the bound check as independent.
    stages = (
        ("one-block", t**beta_prime, derived_seed(seed, "one-block")),
        ("direct", t, seed),
    )
    for stage, horizon, stage_seed in stages:
        accumulators = runner.run(
            f"block:{stage}:t={t:g}",
            partial(
                observe_threshold,
                d=gamma_alpha.d,
                mode=WalkMode.CONTINUOUS,
                horizon=horizon,
                threshold=threshold,
                direction=Direction.DOWN,
            ),
            seed=stage_seed,
            reps=reps,
        )
        hit = accumulators["hit"]
        p = hit.mean
        estimates.append((p, math.sqrt(p * (1.0 - p) / hit.count)))
    (one_block, one_se), (direct, direct_se) = estimates
    return block_product_bound(
        beta, beta_prime, t, u, one_block, one_se, direct, direct_se
    )
