from enum import Enum

MAXLOCAL_VERSION = "0.1.0"
CATALOG_TABLE_NAME = "_maxlocal_catalog"
REPORTS_FOLDER = "_maxlocal_reports"
CHECKPOINT_FOLDER = "_maxlocal_checkpoints"

# Part of the file-format contract: replaying a (seed, replicate) key is only
# bit-identical under the same mixer and step encoding.
RNG_MIXER = "philox4x64-10/u8-steps"
CHECKPOINT_FORMAT_VERSION = 1
CSV_SCHEMA_VERSION = 1

ENV_SEED = "MAXLOCAL_SEED"
ENV_WORKERS = "MAXLOCAL_WORKERS"

MIN_DIMENSION = 3
# Occupation counts stay exact in float64 totals below this bound.
MAX_DISCRETE_STEPS = 2**53 - 1

# Steps and holding times are drawn in fixed blocks so that a shorter run is a
# prefix of a longer one with the same stream key.
STEP_BLOCK = 4096
HOLDING_BLOCK = 4096
# Counter offset of the holding-time sub-stream (in Philox blocks).
HOLDING_STREAM_OFFSET = 2**128

# Default truncation of infinite-horizon local times (bias ~1e-3 in d=3).
DEFAULT_TRUNCATION = 10**6

# Quadrature: absolute error target on G(0), two orders below every
# statistical tolerance used downstream.
DEFAULT_QUADRATURE_TOLERANCE = 1e-6
MAX_REFINEMENT = 10
GAUSS_NODES_PER_PANEL = 16

# Statistical acceptance policy.
Z_THRESHOLD = 5.0
WILSON_LEVEL = 0.99
UNDERPOWERED_FACTOR = 10.0
FLOOR_SNAP = 1e-9

# Forcing construction: kappa in (1 - beta/2, 1) for every beta >= 0.2.
DEFAULT_KAPPA = 0.9
# e^{2 gamma eta} - 1 < delta/2 with delta = 0.5 gives eta < 0.169 in d=3.
DEFAULT_ETA = 0.15
DEFAULT_DELTA = 0.5
MIN_POOLED_HOLDING_TIMES = 1000

DEFAULT_SEED = 20240901
DEFAULT_REPS = 1000
DEFAULT_CHUNK_SIZE = 256
DEFAULT_RESERVOIR = 200_000


class WalkMode(Enum):
    DISCRETE = "discrete"
    CONTINUOUS = "continuous"


class Direction(Enum):
    UP = "up"
    DOWN = "down"


class EstimateMethod(Enum):
    QUADRATURE = "quadrature"
    MC = "mc"


class LawKind(Enum):
    ORIGIN = "origin"
    TWO_POINT = "two-point"


class ReportFlag(Enum):
    """
    Flags attached to reports instead of failing an assertion.
    """

    UNDERPOWERED = "UNDERPOWERED"
    BOUNDARY = "BOUNDARY"
    DEGENERATE = "DEGENERATE"
    ARTIFACT_BAND = "ARTIFACT_BAND"


class Subcommand(Enum):
    CONSTANTS = "constants"
    LAWS = "laws"
    COUNT = "count"
    TAIL = "tail"
    GUMBEL = "gumbel"
    FORCING = "forcing"
    SEGMENTS = "segments"
    CHECKPOINT_RESUME = "checkpoint-resume"


class RunStatus(Enum):
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"
    INTERRUPTED = "interrupted"


class CatalogEntryType(Enum):
    """
    Enum for catalog entry types.
    """

    LAB_CONFIG = "lab_config"
    RUN = "run"


class StorageType(Enum):
    LOCAL = "local"
