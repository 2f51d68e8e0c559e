"""
Subcommand handlers. Each handler runs its experiment through the replicate
runner and returns the normative report table, any secondary tables, a JSON
summary and the names of violated hard invariants.
"""

import logging
import math
from functools import partial
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import polars as pl
from pydantic import BaseModel, ConfigDict, Field

from maxlocal.constants import (
    LawKind,
    ReportFlag,
    Subcommand,
    WalkMode,
)
from maxlocal.deviations import (
    block_bound_mc,
    gumbel_fit,
    gumbel_reference_cdf,
    moderate_tail_theory,
    tail_mc,
)
from maxlocal.forcing import (
    dump_trace,
    forcing_level,
    forcing_stage,
    forcing_trace_for,
    holding_law_from_accumulators,
    jump_horizon,
    naive_estimate,
    observe_forcing,
    observe_sandwich,
    observe_segments,
    product_formula_from_accumulators,
    weighted_B_sampler,
)
from maxlocal.lattice import (
    gamma_from_escapes,
    hitting_asymptote,
    hitting_prob,
    lattice_constants,
    observe_escape,
)
from maxlocal.laws import (
    law_check_from_accumulators,
    moment_report,
    observe_counting_identity,
    observe_origin_law,
    observe_two_point_law,
    tail_exponential_theory,
    tail_geometric_theory,
    threshold_b,
    two_point_tail_theory,
    two_point_tail_theory_continuous,
)
from maxlocal.models import ExperimentConfig, TailQuery, ThresholdSpec
from maxlocal.plots import emit_cdf_plot, emit_plot
from maxlocal.runner import ReplicateRunner
from maxlocal.stats import StreamKey
from maxlocal.walk import diffusive_scaling_check, late_return_bound

logger = logging.getLogger(__name__)

IDENTITY_REPS = 1000
TRACE_DUMP_REPS = 10
SEGMENT_RAIL = 20
CONTINUOUS_LEVEL_STEP = 0.5


class ExperimentResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    table: pl.DataFrame
    tables: Dict[str, pl.DataFrame] = Field(default_factory=dict)
    summary: Dict[str, Any] = Field(default_factory=dict)
    violations: List[str] = Field(default_factory=list)
    flags: List[str] = Field(default_factory=list)
    plots: List[str] = Field(default_factory=list)

    def flag(self, flag: ReportFlag) -> None:
        if flag.value not in self.flags:
            self.flags.append(flag.value)


Handler = Callable[[ExperimentConfig, ReplicateRunner, Path], ExperimentResult]


def _plot(result: ExperimentResult, path: Optional[Path]) -> None:
    if path is not None:
        result.plots.append(str(path))


def _merge_flags(result: ExperimentResult, flags: List[str]) -> None:
    for flag in flags:
        result.flag(ReportFlag(flag))


# constants


def run_constants(
    config: ExperimentConfig, runner: ReplicateRunner, run_dir: Path
) -> ExperimentResult:
    d = config.d
    constants = lattice_constants(d)
    ga = constants.gamma_alpha
    # d alpha / d gamma = -1 / ((1 - gamma) log(1 - gamma)^2)
    alpha_slope = 1.0 / ((1.0 - ga.gamma) * math.log1p(-ga.gamma) ** 2)
    rows = [
        ("green_origin", constants.green_origin.value, constants.green_origin.error, "quadrature"),
        ("gamma", ga.gamma, ga.error_bound, "quadrature"),
        ("alpha", ga.alpha, alpha_slope * ga.error_bound, "quadrature"),
        ("t_e1", constants.t_e1.t_y, constants.t_e1.error_bound, "quadrature"),
        ("c_d", constants.c_d, constants.c_d_spread, "extrapolated"),
        ("continuum_c_d", constants.continuum_c_d, math.nan, "continuum"),
    ]

    horizon = int(config.horizons[0])
    escapes = runner.run(
        f"constants:escape:h={horizon}",
        partial(observe_escape, d=d, horizon=horizon),
        seed=config.seed,
        reps=config.reps,
    )["escaped"]
    result = ExperimentResult(table=pl.DataFrame())
    mc_agrees = None
    escaped = int(round(escapes.sum))
    if escaped:
        mc = gamma_from_escapes(escaped, escapes.count, d, horizon)
        rows.append(("gamma", mc.gamma, mc.error_bound, "mc"))
        mc_agrees = abs(mc.gamma - ga.gamma) <= mc.error_bound + ga.error_bound
    else:
        logger.warning(f"No escapes within {horizon} steps, MC gamma skipped")
        result.flag(ReportFlag.DEGENERATE)
    if escapes.count < 1000:
        result.flag(ReportFlag.UNDERPOWERED)

    result.table = pl.DataFrame(
        [
            {"d": d, "quantity": q, "value": v, "error": e, "method": m}
            for q, v, e, m in rows
        ]
    )
    for direction in ("axis", "diagonal"):
        asymptote = hitting_asymptote(d, config.radii, config.refinement, direction)
        frame = asymptote.to_frame()
        result.tables[f"hitting_{direction}.csv"] = frame
        if config.plot:
            _plot(
                result,
                emit_plot(
                    frame,
                    run_dir / f"hitting_{direction}.svg",
                    x="radius",
                    curves=["scaled", "extrapolated"],
                    title=f"t_y |y|^(d-2) along the {direction}, d={d}",
                    log_x=True,
                    annotation=f"C_d = {asymptote.c_d:.5f}",
                ),
            )
    result.summary = {
        "gamma": ga.gamma,
        "alpha": ga.alpha,
        "green_origin": constants.green_origin.value,
        "t_e1": constants.t_e1.t_y,
        "c_d": constants.c_d,
        "c_d_spread": constants.c_d_spread,
        "continuum_c_d": constants.continuum_c_d,
        "mc_agrees": mc_agrees,
    }
    return result


# laws


def law_levels(config: ExperimentConfig) -> List[float]:
    if config.mode == WalkMode.DISCRETE:
        return [float(m) for m in range(1, config.levels + 1)]
    return [CONTINUOUS_LEVEL_STEP * k for k in range(1, config.levels + 1)]


def run_laws(
    config: ExperimentConfig, runner: ReplicateRunner, run_dir: Path
) -> ExperimentResult:
    d, mode = config.d, config.mode
    gamma = lattice_constants(d).gamma_alpha.gamma
    discrete = mode == WalkMode.DISCRETE
    levels = law_levels(config)
    bias = late_return_bound(d, config.truncation)

    if config.law == LawKind.ORIGIN:
        t_y = None
        observe = partial(
            observe_origin_law, d=d, mode=mode, truncation=config.truncation, levels=levels
        )
        theory = tail_geometric_theory if discrete else tail_exponential_theory
        theory_fn = partial(theory, gamma=gamma)
    else:
        y = tuple(config.y)
        t_y = hitting_prob(y, d, config.refinement).t_y
        bias *= 2.0
        observe = partial(
            observe_two_point_law,
            d=d,
            mode=mode,
            y=y,
            truncation=config.truncation,
            levels=levels,
        )
        theory = two_point_tail_theory if discrete else two_point_tail_theory_continuous
        theory_fn = partial(theory, t_y=t_y, gamma=gamma)

    accumulators = runner.run(
        f"laws:{config.law.value}:{mode.value}",
        observe,
        seed=config.seed,
        reps=config.reps,
        reservoirs={"value": config.reservoir},
    )
    report = law_check_from_accumulators(levels, accumulators, theory_fn, lattice=discrete)
    result = ExperimentResult(table=report.to_frame())
    _merge_flags(result, report.flags)
    result.summary = {
        "law": config.law.value,
        "mode": mode.value,
        "gamma": gamma,
        "t_y": t_y,
        "n_samples": report.n_samples,
        "ks_distance": report.ks_distance,
        "max_abs_z": report.max_abs_z,
        "truncation": config.truncation,
        "truncation_bias_bound": bias,
        "mean": accumulators["value"].mean,
    }
    if config.plot:
        _plot(
            result,
            emit_plot(
                result.table,
                run_dir / "law.svg",
                x="level",
                curves=["empirical", "theory"],
                title=f"{config.law.value} law, {mode.value}, d={d}",
                log_y=True,
                annotation=f"KS = {report.ks_distance:.4f}",
            ),
        )
    return result


# count


def run_count(
    config: ExperimentConfig, runner: ReplicateRunner, run_dir: Path
) -> ExperimentResult:
    d = config.d
    ga = lattice_constants(d).gamma_alpha
    horizons = [int(n) for n in config.horizons]
    table = moment_report(horizons, config.beta, config.u, ga, config.reps, config.seed, runner)
    result = ExperimentResult(table=table)
    result.flag(ReportFlag.ARTIFACT_BAND)

    n = horizons[0]
    m = int(table["m"][0])
    ms = sorted({max(m + k, 0) for k in (-1, 0, 1)})
    b = threshold_b(
        ThresholdSpec(beta=config.beta, u=config.u, horizon=n, mode=WalkMode.CONTINUOUS),
        ga.gamma,
    )
    bs = sorted({max(b + k, 0.0) for k in (-1.0, 0.0, 1.0)})
    identity = runner.run(
        f"count:identity:n={n}",
        partial(observe_counting_identity, d=d, n=n, ms=ms, bs=bs),
        seed=config.seed,
        reps=min(config.reps, IDENTITY_REPS),
    )["mismatches"]
    mismatches = int(round(identity.sum))
    if mismatches:
        logger.error(f"Counting identity failed {mismatches} time(s) at n={n}")
        result.violations.append("counting_identity")

    ratios = table["ratio"].to_list()
    distances = [abs(r - 1.0) for r in ratios]
    result.summary = {
        "beta": config.beta,
        "u": config.u,
        "ratios": ratios,
        "ratio_trend_to_one": all(b <= a for a, b in zip(distances, distances[1:])),
        "second_over_first": table["second_over_first"].to_list(),
        "identity_checks": identity.count * (len(ms) + len(bs)),
        "identity_mismatches": mismatches,
    }
    if config.plot:
        _plot(
            result,
            emit_plot(
                table,
                run_dir / "moments.svg",
                x="n",
                curves=["mean", "theory"],
                title=f"E[N] for beta={config.beta}, d={d}",
                log_x=True,
                log_y=True,
            ),
        )
    return result


# tail


def run_tail(
    config: ExperimentConfig, runner: ReplicateRunner, run_dir: Path
) -> ExperimentResult:
    ga = lattice_constants(config.d).gamma_alpha
    rows = []
    result = ExperimentResult(table=pl.DataFrame())
    for horizon in config.horizons:
        query = TailQuery(
            mode=config.mode,
            direction=config.direction,
            beta=config.beta,
            u=config.u,
            horizon=horizon,
            reps=config.reps,
            seed=config.seed,
            d=config.d,
        )
        report = tail_mc(query, ga, runner)
        _merge_flags(result, report.flags)
        moderate = None
        if config.beta == 1.0 and config.u >= 0:
            moderate = moderate_tail_theory(
                config.mode, config.direction, config.u, ga, horizon
            )
        rows.append(
            {
                **report.to_row(),
                "threshold": report.threshold,
                "successes": report.successes,
                "exponent": report.exponent,
                "log_ratio": report.log_ratio,
                "upper_bound_ok": report.upper_bound_ok,
                "moderate_theory": moderate,
            }
        )
    result.table = pl.DataFrame(
        rows,
        schema_overrides={
            "exponent": pl.Float64,
            "log_ratio": pl.Float64,
            "upper_bound_ok": pl.Boolean,
            "moderate_theory": pl.Float64,
        },
    )
    result.summary = {
        "direction": config.direction.value,
        "mode": config.mode.value,
        "empirical": result.table["empirical"].to_list(),
        "theory": result.table["theory"].to_list(),
        "ratio": result.table["ratio"].to_list(),
    }

    if config.beta_prime is not None:
        bounds = [
            block_bound_mc(
                config.beta,
                config.beta_prime,
                horizon,
                config.u,
                config.reps,
                config.seed,
                ga,
                runner,
            )
            for horizon in config.horizons
        ]
        for bound in bounds:
            _merge_flags(result, bound.flags)
        result.tables["block_bound.csv"] = pl.DataFrame(
            [bound.model_dump(exclude={"flags"}) for bound in bounds]
        )
        result.summary["block_bound_holds"] = [bound.holds for bound in bounds]

    if config.plot:
        _plot(
            result,
            emit_plot(
                result.table,
                run_dir / "tail.svg",
                x="horizon",
                curves=["empirical", "theory"],
                title=f"{config.direction.value} tail, beta={config.beta}",
                log_x=True,
                log_y=True,
            ),
        )
    return result


# gumbel


def run_gumbel(
    config: ExperimentConfig, runner: ReplicateRunner, run_dir: Path
) -> ExperimentResult:
    ga = lattice_constants(config.d).gamma_alpha
    table, samples = gumbel_fit(config.horizons, config.reps, config.seed, ga, runner)
    result = ExperimentResult(table=table)
    if config.reps < 1000:
        result.flag(ReportFlag.UNDERPOWERED)
    ks = table["ks"].to_list()
    result.summary = {
        "gamma": ga.gamma,
        "ks": ks,
        "ks_nonincreasing": all(b <= a for a, b in zip(ks, ks[1:])),
        "fit_loc": table["fit_loc"].to_list(),
        "fit_scale": table["fit_scale"].to_list(),
    }
    if config.plot:
        last = config.horizons[-1]
        _plot(
            result,
            emit_cdf_plot(
                samples[last],
                partial(gumbel_reference_cdf, gamma=ga.gamma),
                run_dir / "gumbel_cdf.svg",
                title=f"l*(t) - log(t)/gamma at t={last:g}",
                ks=ks[-1],
            ),
        )
        _plot(
            result,
            emit_plot(
                table,
                run_dir / "gumbel_ks.svg",
                x="t",
                curves=["ks"],
                title="KS distance to the Gumbel limit",
                log_x=True,
            ),
        )
    return result


# forcing


def run_forcing(
    config: ExperimentConfig, runner: ReplicateRunner, run_dir: Path
) -> ExperimentResult:
    d, beta, eta, kappa = config.d, config.beta, config.eta, config.kappa
    gamma = lattice_constants(d).gamma_alpha.gamma
    result = ExperimentResult(table=pl.DataFrame())
    rows = []
    for horizon in config.horizons:
        n = int(horizon)
        params = dict(d=d, beta=beta, eta=eta, n=n, gamma=gamma, kappa=kappa)
        traces = runner.run(
            forcing_stage(n),
            partial(observe_forcing, **params),
            seed=config.seed,
            reps=config.reps,
            reservoirs={"holding": config.reservoir},
        )
        naive = naive_estimate(traces["in_B"])
        weighted = weighted_B_sampler(
            beta, eta, n, config.reps, config.seed, gamma, d, kappa, runner
        )
        sandwich = runner.run(
            f"forcing:sandwich:n={n}",
            partial(observe_sandwich, d=d, t=float(n), kappa=kappa),
            seed=config.seed,
            reps=config.reps,
        )["sandwich"]

        holding_ks = holding_max_z = None
        try:
            holding = holding_law_from_accumulators(traces)
            _merge_flags(result, holding.flags)
            holding_ks, holding_max_z = holding.ks_distance, holding.max_abs_z
            result.tables[f"holding_law_n{n}.csv"] = holding.to_frame()
        except ValueError:
            logger.warning(f"No site crossed the forcing level at n={n}")
            result.flag(ReportFlag.UNDERPOWERED)
        result.tables[f"product_formula_n{n}.csv"] = product_formula_from_accumulators(
            traces, eta
        )

        inclusion = int(round(traces["violation"].sum))
        cap = int(round(traces["cap_violation"].sum))
        if inclusion:
            logger.error(f"{inclusion} trace(s) in B exceed the target level at n={n}")
            result.violations.append("deterministic_inclusion")
        if cap:
            logger.error(f"{cap} trace(s) in B break the geometric cap at n={n}")
            result.violations.append("geometric_cap")

        combined = math.hypot(weighted.stderr, naive.stderr)
        rows.append(
            {
                "n": n,
                "n_hat": jump_horizon(n, kappa),
                "lam": forcing_level(beta, eta, n, gamma),
                "reps": config.reps,
                "mean_crossings": traces["crossings"].mean,
                "naive": naive.estimate,
                "naive_lo": naive.ci_lo,
                "naive_hi": naive.ci_hi,
                "weighted": weighted.estimate,
                "weighted_stderr": weighted.stderr,
                "weighted_lo": weighted.ci_lo,
                "weighted_hi": weighted.ci_hi,
                "agreement_z": (
                    (weighted.estimate - naive.estimate) / combined if combined else 0.0
                ),
                "inclusion_violations": inclusion,
                "cap_violations": cap,
                "pooled_holding": traces["holding"].count,
                "holding_ks": holding_ks,
                "holding_max_z": holding_max_z,
                "sandwich_frequency": sandwich.mean,
            }
        )
        _dump_traces(run_dir / f"traces_n{n}.txt", config, params)

    result.table = pl.DataFrame(
        rows, schema_overrides={"holding_ks": pl.Float64, "holding_max_z": pl.Float64}
    )
    result.summary = {
        "beta": beta,
        "eta": eta,
        "kappa": kappa,
        "p_B_weighted": result.table["weighted"].to_list(),
        "p_B_naive": result.table["naive"].to_list(),
        "inclusion_violations": int(result.table["inclusion_violations"].sum()),
        "holding_ks": result.table["holding_ks"].to_list(),
    }
    return result


def _dump_traces(path: Path, config: ExperimentConfig, params: Dict[str, Any]) -> None:
    with open(path, "w") as file:
        for index in range(min(config.reps, TRACE_DUMP_REPS)):
            key = StreamKey(seed=config.seed, replicate_index=index)
            trace, _ = forcing_trace_for(key, **params)
            file.write(f"# replicate {index} in_B={trace.in_B}\n")
            dump_trace(trace, file)


# segments


def run_segments(
    config: ExperimentConfig, runner: ReplicateRunner, run_dir: Path
) -> ExperimentResult:
    d, beta1, beta2, kappa = config.d, config.beta1, config.beta2, config.kappa
    rows, distribution = [], []
    result = ExperimentResult(table=pl.DataFrame())
    for horizon in config.horizons:
        n = int(horizon)
        accumulators = runner.run(
            f"segments:n={n}",
            partial(observe_segments, d=d, n=n, beta1=beta1, beta2=beta2, kappa=kappa),
            seed=config.seed,
            reps=config.reps,
        )
        n_hat = jump_horizon(n, kappa)
        length = max(1, math.floor(n**beta1))
        worst = int(accumulators["max"].maximum)
        if worst > SEGMENT_RAIL:
            logger.warning(f"Segment visits reached {worst} at n={n}")
        rows.append(
            {
                "n": n,
                "n_hat": n_hat,
                "block_length": length,
                "blocks": n_hat // length + 1,
                "reps": accumulators["max"].count,
                "mean_max": accumulators["max"].mean,
                "max_max": worst,
                "mean_max_shortened": accumulators["max_shortened"].mean,
                "max_max_shortened": int(accumulators["max_shortened"].maximum),
                "rail_ok": worst <= SEGMENT_RAIL,
            }
        )
        for name, acc in accumulators.items():
            if name.startswith("max="):
                distribution.append(
                    {"n": n, "max": int(name.removeprefix("max=")), "replicates": acc.count}
                )

    result.table = pl.DataFrame(rows)
    result.tables["max_distribution.csv"] = pl.DataFrame(
        distribution, schema={"n": pl.Int64, "max": pl.Int64, "replicates": pl.Int64}
    ).sort(["n", "max"])
    diffusive = diffusive_scaling_check(
        d, [int(n) for n in config.horizons], config.reps, config.seed
    )
    result.tables["diffusive_scaling.csv"] = diffusive
    if int(diffusive["parity_violations"].sum()):
        result.violations.append("parity")
    result.summary = {
        "beta1": beta1,
        "beta2": beta2,
        "max_max": result.table["max_max"].to_list(),
        "rail_ok": all(result.table["rail_ok"].to_list()),
    }
    if config.plot:
        _plot(
            result,
            emit_plot(
                result.table,
                run_dir / "segments.svg",
                x="n",
                curves=["mean_max", "mean_max_shortened"],
                title=f"Segments visiting a site, beta1={beta1}, beta2={beta2}",
                log_x=True,
            ),
        )
    return result


HANDLERS: Dict[Subcommand, Handler] = {
    Subcommand.CONSTANTS: run_constants,
    Subcommand.LAWS: run_laws,
    Subcommand.COUNT: run_count,
    Subcommand.TAIL: run_tail,
    Subcommand.GUMBEL: run_gumbel,
    Subcommand.FORCING: run_forcing,
    Subcommand.SEGMENTS: run_segments,
}
