import math
from datetime import datetime
from typing import Any, Dict, List, Optional, Tuple

import polars as pl
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from maxlocal.constants import (
    CHECKPOINT_FORMAT_VERSION,
    DEFAULT_CHUNK_SIZE,
    DEFAULT_DELTA,
    DEFAULT_ETA,
    DEFAULT_KAPPA,
    DEFAULT_REPS,
    DEFAULT_RESERVOIR,
    DEFAULT_SEED,
    DEFAULT_TRUNCATION,
    MAX_DISCRETE_STEPS,
    MAXLOCAL_VERSION,
    MIN_DIMENSION,
    RNG_MIXER,
    CatalogEntryType,
    Direction,
    EstimateMethod,
    LawKind,
    RunStatus,
    Subcommand,
    WalkMode,
)
from maxlocal.stats import Accumulator, StreamKey


def alpha_from_gamma(gamma: float) -> float:
    """alpha = -1/log(1 - gamma); the gamma -> 1 limit is 0."""
    if gamma == 1.0:
        return 0.0
    return -1.0 / math.log1p(-gamma)


# Walk engine


class WalkConfig(BaseModel):
    """
    One walk run. The horizon is a step count n for discrete walks and a time
    t > 0 for continuous walks.
    """

    d: int = 3
    mode: WalkMode = WalkMode.DISCRETE
    horizon: float
    seed: int = DEFAULT_SEED
    replicate_index: int = Field(default=0, ge=0)
    record_path: bool = False

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def check_horizon(self) -> "WalkConfig":
        if self.d < MIN_DIMENSION:
            raise ValueError(f"Dimension must be at least {MIN_DIMENSION}, got {self.d}.")
        if self.mode == WalkMode.DISCRETE:
            if self.horizon < 0 or self.horizon != int(self.horizon):
                raise ValueError(
                    f"Discrete horizon must be a nonnegative integer, got {self.horizon}."
                )
            if self.horizon > MAX_DISCRETE_STEPS:
                raise ValueError(
                    f"Horizon {self.horizon} overflows the step counter "
                    f"(max {MAX_DISCRETE_STEPS})."
                )
        elif not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ValueError(f"Continuous horizon must be positive, got {self.horizon}.")
        return self

    @property
    def steps(self) -> int:
        return int(self.horizon)

    @property
    def key(self) -> StreamKey:
        return StreamKey(seed=self.seed, replicate_index=self.replicate_index)


class TruncatedSample(BaseModel):
    value: float
    truncation: int
    bias_bound: float


# Lattice numerics


class GreenValue(BaseModel):
    y: Tuple[int, ...]
    d: int
    value: float
    error: float
    refinement: int


class GammaAlpha(BaseModel):
    gamma: float
    alpha: float
    d: int
    method: EstimateMethod
    error_bound: float = Field(ge=0.0)
    stderr: Optional[float] = None
    bias_bound: Optional[float] = None

    model_config = ConfigDict(frozen=True)

    @classmethod
    def from_gamma(cls, gamma: float, d: int, method: EstimateMethod, **kwargs):
        return cls(gamma=gamma, alpha=alpha_from_gamma(gamma), d=d, method=method, **kwargs)

    @model_validator(mode="after")
    def check_consistency(self) -> "GammaAlpha":
        upper_ok = self.gamma < 1.0 or (
            self.method == EstimateMethod.MC and self.gamma == 1.0
        )
        if not (self.gamma > 0.0 and upper_ok):
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}.")
        expected = alpha_from_gamma(self.gamma)
        if abs(self.alpha - expected) > 1e-12 * max(abs(expected), 1e-300):
            raise ValueError(
                f"alpha {self.alpha} inconsistent with gamma {self.gamma} "
                f"(expected {expected})."
            )
        return self


class HittingProb(BaseModel):
    y: Tuple[int, ...]
    t_y: float
    error_bound: float = Field(ge=0.0)

    @model_validator(mode="after")
    def check_range(self) -> "HittingProb":
        if not any(self.y):
            raise ValueError("Hitting probabilities are defined for y != 0.")
        if not 0.0 < self.t_y < 1.0:
            raise ValueError(f"t_y must lie in (0, 1), got {self.t_y}.")
        return self


class HittingAsymptote(BaseModel):
    """t_y |y|^{d-2} along a ray of sites and its extrapolated limit C_d."""

    d: int
    direction: str
    radii: List[float]
    t_y: List[float]
    scaled: List[float]
    extrapolated: List[Optional[float]]
    c_d: float
    spread: float

    def to_frame(self) -> pl.DataFrame:
        return pl.DataFrame(
            {
                "radius": self.radii,
                "t_y": self.t_y,
                "scaled": self.scaled,
                "extrapolated": self.extrapolated,
            },
            schema_overrides={"extrapolated": pl.Float64},
        )


class LatticeConstants(BaseModel):
    d: int
    green_origin: GreenValue
    gamma_alpha: GammaAlpha
    t_e1: HittingProb
    c_d: float
    c_d_spread: float
    continuum_c_d: float


# Distribution laws


class ThresholdSpec(BaseModel):
    beta: float = Field(gt=0.0)
    u: float = 0.0
    horizon: float = Field(gt=1.0)
    mode: WalkMode = WalkMode.DISCRETE


class LawCheckReport(BaseModel):
    levels: List[float]
    empirical: List[float]
    stderr: List[float]
    theory: List[float]
    z: List[float]
    ks_distance: float = Field(ge=0.0, le=1.0)
    n_samples: int
    flags: List[str] = Field(default_factory=list)

    @property
    def max_abs_z(self) -> float:
        return max((abs(z) for z in self.z), default=0.0)

    def to_frame(self) -> pl.DataFrame:
        return pl.DataFrame(
            {
                "level": self.levels,
                "empirical": self.empirical,
                "stderr": self.stderr,
                "theory": self.theory,
                "z": self.z,
            }
        )


# Deviation lab


class TailQuery(BaseModel):
    mode: WalkMode = WalkMode.DISCRETE
    direction: Direction = Direction.UP
    beta: float
    u: float = 0.0
    horizon: float
    reps: int = Field(default=DEFAULT_REPS, ge=1)
    seed: int = DEFAULT_SEED
    d: int = 3

    @model_validator(mode="after")
    def check_beta_range(self) -> "TailQuery":
        # beta = 1 is admitted upward as a flagged boundary evaluation.
        if self.direction == Direction.UP and self.beta < 1.0:
            raise ValueError(f"Upward deviations require beta > 1, got {self.beta}.")
        if self.direction == Direction.DOWN and not 0.0 < self.beta <= 1.0:
            raise ValueError(
                f"Downward deviations require 0 < beta <= 1, got {self.beta}."
            )
        if self.horizon <= 1.0:
            raise ValueError(f"Horizon must exceed 1, got {self.horizon}.")
        return self


class TailReport(BaseModel):
    query: TailQuery
    threshold: float
    successes: int
    trials: int
    empirical: float = Field(ge=0.0, le=1.0)
    ci_lo: float
    ci_hi: float
    theory: float
    exponent: Optional[float] = None
    ratio: float
    log_ratio: Optional[float] = None
    upper_bound_ok: Optional[bool] = None
    flags: List[str] = Field(default_factory=list)

    def to_row(self) -> Dict[str, Any]:
        return {
            "mode": self.query.mode.value,
            "direction": self.query.direction.value,
            "beta": self.query.beta,
            "u": self.query.u,
            "horizon": self.query.horizon,
            "reps": self.query.reps,
            "empirical": self.empirical,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "theory": self.theory,
            "ratio": self.ratio,
            "flags": ";".join(self.flags),
        }


class BlockBoundReport(BaseModel):
    beta: float
    beta_prime: float
    t: float
    u: float
    blocks: int
    block_length: float
    one_block: float
    one_block_stderr: float
    bound: float
    bound_stderr: float
    direct: Optional[float] = None
    direct_stderr: Optional[float] = None
    holds: Optional[bool] = None
    flags: List[str] = Field(default_factory=list)


# Forcing strategy


class Crossing(BaseModel):
    site: Tuple[int, ...]
    index: int
    step: int
    returns: int = Field(ge=0)
    pre_threshold: float
    holding_times: List[float]


class ForcingTrace(BaseModel):
    lam: float
    eta: float = Field(gt=0.0)
    n: int
    n_hat: int
    seed: int
    replicate_index: int
    crossings: List[Crossing] = Field(default_factory=list)
    in_B: bool = True

    @property
    def counts(self) -> Tuple[int, List[int]]:
        return len(self.crossings), [c.returns for c in self.crossings]


class WeightedSample(BaseModel):
    weight: float = Field(ge=0.0, le=1.0)
    target_hit: bool
    trace: ForcingTrace


class BEstimate(BaseModel):
    estimate: float
    stderr: float
    ci_lo: float
    ci_hi: float
    reps: int
    method: str


class SegmentStats(BaseModel):
    n: int
    n_hat: int
    block_length: int
    blocks: int
    max_visits: int
    max_visits_shortened: int
    histogram: List[int]


# Experiments, catalog, checkpoints


class ExperimentConfig(BaseModel):
    """
    Every experiment field with its documented default. Range constraints between
    fields are checked by the ConfigPreprocessor.
    """

    subcommand: Subcommand
    d: int = Field(default=3, ge=MIN_DIMENSION)
    mode: WalkMode = WalkMode.DISCRETE
    direction: Direction = Direction.UP
    law: LawKind = LawKind.ORIGIN
    horizons: List[float] = Field(default_factory=lambda: [1000.0])
    beta: Optional[float] = None
    u: float = 0.0
    eta: float = Field(default=DEFAULT_ETA, gt=0.0)
    delta: float = Field(default=DEFAULT_DELTA, gt=0.0)
    kappa: float = DEFAULT_KAPPA
    beta_prime: Optional[float] = None
    beta1: Optional[float] = None
    beta2: Optional[float] = None
    y: List[int] = Field(default_factory=lambda: [1, 0, 0])
    truncation: int = Field(default=DEFAULT_TRUNCATION, ge=1)
    levels: int = Field(default=10, ge=1)
    radii: List[int] = Field(default_factory=lambda: [4, 8, 16, 32])
    refinement: Optional[int] = Field(default=None, ge=0)
    reps: int = Field(default=DEFAULT_REPS, ge=1)
    seed: int = Field(default=DEFAULT_SEED, ge=0)
    workers: int = Field(default=1, ge=1)
    chunk_size: int = Field(default=DEFAULT_CHUNK_SIZE, ge=1)
    reservoir: int = Field(default=DEFAULT_RESERVOIR, ge=1)
    output_dir: str = "./maxlocal_runs"
    checkpoint: Optional[str] = None
    plot: bool = True
    name: Optional[str] = None

    @field_validator("horizons", "radii")
    @classmethod
    def nonempty(cls, value: List[Any]) -> List[Any]:
        if not value:
            raise ValueError("List must not be empty.")
        return value

    def fingerprint_payload(self) -> str:
        # Parallelism and output placement do not change results.
        return self.model_dump_json(
            exclude={"workers", "output_dir", "checkpoint", "plot", "name"}
        )


class BaseCatalogEntry(BaseModel):
    """
    Base class for all catalog entries.
    """

    id: Optional[str] = None  # Assigned by the catalog
    name: str
    entry_type: str
    created_at: datetime = Field(default_factory=datetime.now)
    updated_at: datetime = Field(default_factory=datetime.now)

    model_config = ConfigDict(extra="allow")


class LabEntry(BaseCatalogEntry):
    """
    Identity of a lab directory. Stored once in the catalog table.
    """

    lab_id: str
    maxlocal_version: str = MAXLOCAL_VERSION
    rng_mixer: str = RNG_MIXER
    numpy_version: str

    def __init__(self, **data):
        data["entry_type"] = CatalogEntryType.LAB_CONFIG.value
        data.setdefault("name", "maxlocal")
        super().__init__(**data)


class RunEntry(BaseCatalogEntry):
    """
    One experiment run and the artifacts it produced.
    """

    subcommand: str
    config: Dict[str, Any]
    status: str = RunStatus.RUNNING.value
    report_csv: Optional[str] = None
    summary_json: Optional[str] = None
    report_table: Optional[str] = None
    plots: List[str] = Field(default_factory=list)
    violations: List[str] = Field(default_factory=list)

    def __init__(self, **data):
        data["entry_type"] = CatalogEntryType.RUN.value
        super().__init__(**data)


class StageState(BaseModel):
    frontier: int = 0
    reps: int
    accumulators: Dict[str, Accumulator] = Field(default_factory=dict)

    @property
    def completed(self) -> bool:
        return self.frontier >= self.reps


class Checkpoint(BaseModel):
    format_version: int = CHECKPOINT_FORMAT_VERSION
    rng_mixer: str = RNG_MIXER
    fingerprint: str
    config: ExperimentConfig
    stages: Dict[str, StageState] = Field(default_factory=dict)


class ExperimentSummary(BaseModel):
    schema_version: int
    subcommand: str
    config: ExperimentConfig
    summary: Dict[str, Any]
    violations: List[str]
    flags: List[str]
