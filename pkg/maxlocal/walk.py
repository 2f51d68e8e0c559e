"""
Simple random walk on Z^d in discrete and continuous time, with sparse
local-time fields.

Steps and holding times come from two sub-streams of the replicate's
StreamKey and are drawn in fixed-size blocks. A walk of horizon n is therefore
a prefix of every longer walk with the same key, and the skeleton of a
continuous run is pathwise the discrete run with the same key.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, TextIO, Union

import numpy as np
import polars as pl

from maxlocal.constants import (
    HOLDING_BLOCK,
    HOLDING_STREAM_OFFSET,
    STEP_BLOCK,
    WalkMode,
)
from maxlocal.errors import InvariantViolation
from maxlocal.models import TruncatedSample, WalkConfig
from maxlocal.stats import StreamKey

logger = logging.getLogger(__name__)

# Above this many cells the dense law of S_n is not materialized.
MAX_DENSE_CELLS = 2**22
# Step blocks folded into one vectorized pass when scanning without a path.
SCAN_BLOCKS = 16


def step_offsets(d: int) -> np.ndarray:
    """The 2d unit offsets; index 2i is +e_i and 2i+1 is -e_i."""
    offsets = np.zeros((2 * d, d), dtype=np.int64)
    for axis in range(d):
        offsets[2 * axis, axis] = 1
        offsets[2 * axis + 1, axis] = -1
    return offsets


def uniform_step(rng: np.random.Generator, d: int) -> np.ndarray:
    if d < 3:
        raise ValueError(f"Dimension must be at least 3, got {d}.")
    return step_offsets(d)[int(rng.integers(0, 2 * d))]


def draw_steps(rng: np.random.Generator, d: int, size: int) -> np.ndarray:
    """Step indices into step_offsets(d); every step consumer draws through here."""
    return rng.integers(0, 2 * d, size=size, dtype=np.uint8)


def key_radix(d: int, bound: int) -> Optional[int]:
    """
    Radix of the balanced base-R site key for sites with every coordinate in
    [-bound, bound], or None when R**d does not fit in an int64.
    """
    radix = 2 * bound + 1
    return radix if radix**d < 2**63 else None


def key_weights(d: int, radix: int) -> np.ndarray:
    # Axis 0 is the most significant digit, so key order is lexicographic order.
    return radix ** np.arange(d - 1, -1, -1, dtype=np.int64)


def site_keys(sites: np.ndarray, radix: int) -> np.ndarray:
    sites = np.asarray(sites, dtype=np.int64)
    return sites @ key_weights(sites.shape[1], radix)


def rounding_unit(t: float) -> float:
    """Tolerance of the continuous clock conservation check."""
    return 8.0 * np.finfo(float).eps * max(t, 1.0)


def late_return_bound(d: int, m: float) -> float:
    """
    Bound on the probability of a visit to a fixed site after time m.

    Sums the local limit estimate P(S_k = x) <= 2 (d / 2 pi k)^{d/2} over
    k >= m, which gives c_d m^{1 - d/2} with c_d = 2 (d/2pi)^{d/2} / (d/2 - 1).
    """
    if m <= 0:
        return 1.0
    c_d = 2.0 * (d / (2.0 * math.pi)) ** (d / 2.0) / (d / 2.0 - 1.0)
    return min(1.0, c_d * m ** (1.0 - d / 2.0))


class BlockStream:
    """
    Lazily extended prefix of a random sub-stream, drawn block by block.
    """

    def __init__(
        self,
        key: StreamKey,
        counter_offset: int,
        block: int,
        draw: Callable[[np.random.Generator, int], np.ndarray],
    ):
        self._rng = key.generator(counter_offset)
        self._block = block
        self._draw = draw
        self._blocks: List[np.ndarray] = []
        self._size = 0

    def next_block(self) -> np.ndarray:
        chunk = self._draw(self._rng, self._block)
        self._blocks.append(chunk)
        self._size += chunk.size
        return chunk

    def take(self, count: int) -> np.ndarray:
        while self._size < count:
            self.next_block()
        if not self._blocks:
            return self._draw(self._rng, 0)
        if len(self._blocks) > 1:
            self._blocks = [np.concatenate(self._blocks)]
        return self._blocks[0][:count]

    def __len__(self) -> int:
        return self._size


class StepSource(BlockStream):
    def __init__(self, key: StreamKey, d: int):
        super().__init__(
            key,
            counter_offset=0,
            block=STEP_BLOCK,
            draw=lambda rng, size: draw_steps(rng, d, size),
        )
        self.d = d

    def positions(self, n: int) -> np.ndarray:
        """Sites S_0..S_n as an (n+1, d) array."""
        path = np.zeros((n + 1, self.d), dtype=np.int64)
        if n:
            np.cumsum(step_offsets(self.d)[self.take(n)], axis=0, out=path[1:])
        return path


class HoldingSource(BlockStream):
    def __init__(self, key: StreamKey):
        super().__init__(
            key,
            counter_offset=HOLDING_STREAM_OFFSET,
            block=HOLDING_BLOCK,
            draw=lambda rng, size: rng.standard_exponential(size),
        )


def _compensated_site_sums(
    inverse: np.ndarray, values: np.ndarray, n_sites: int
) -> np.ndarray:
    # Neumaier summation per site, vectorized over sites one visit rank at a
    # time. Within a rank every site appears at most once.
    order = np.argsort(inverse, kind="stable")
    grouped = inverse[order]
    ordered_values = values[order]
    starts = np.searchsorted(grouped, np.arange(n_sites))
    rank = np.arange(grouped.size) - starts[grouped]
    by_rank = np.argsort(rank, kind="stable")
    max_rank = int(rank.max()) + 1 if rank.size else 0
    bounds = np.searchsorted(rank[by_rank], np.arange(max_rank + 1))

    totals = np.zeros(n_sites)
    compensation = np.zeros(n_sites)
    for r in range(max_rank):
        idx = by_rank[bounds[r] : bounds[r + 1]]
        sites = grouped[idx]
        x = ordered_values[idx]
        s = totals[sites]
        new = s + x
        compensation[sites] += np.where(
            np.abs(s) >= np.abs(x), (s - new) + x, (x - new) + s
        )
        totals[sites] = new
    return totals + compensation


@dataclass(frozen=True)
class LocalTimeField:
    """
    Sparse map site -> occupation. Discrete occupations are visit counts,
    continuous ones are durations. Only visited sites are stored.
    """

    mode: WalkMode
    sites: np.ndarray
    occupations: np.ndarray

    @classmethod
    def from_visits(
        cls, path: np.ndarray, durations: Optional[np.ndarray] = None
    ) -> "LocalTimeField":
        path = np.asarray(path, dtype=np.int64)
        bound = int(np.abs(path).max()) if path.size else 0
        radix = key_radix(path.shape[1], bound)
        if radix is None:
            sites, inverse = np.unique(path, axis=0, return_inverse=True)
        else:
            _, first, inverse = np.unique(
                site_keys(path, radix), return_index=True, return_inverse=True
            )
            sites = path[first]
        inverse = inverse.reshape(-1)
        if durations is None:
            occupations = np.bincount(inverse, minlength=len(sites)).astype(np.int64)
            mode = WalkMode.DISCRETE
        else:
            occupations = _compensated_site_sums(inverse, durations, len(sites))
            mode = WalkMode.CONTINUOUS
        sites.setflags(write=False)
        occupations.setflags(write=False)
        return cls(mode=mode, sites=sites, occupations=occupations)

    @property
    def d(self) -> int:
        return self.sites.shape[1]

    @property
    def total(self) -> Union[int, float]:
        if self.mode == WalkMode.DISCRETE:
            return int(self.occupations.sum())
        return math.fsum(self.occupations)

    @property
    def max_local_time(self) -> Union[int, float]:
        value = self.occupations.max()
        return int(value) if self.mode == WalkMode.DISCRETE else float(value)

    def occupation(self, site: Sequence[int]) -> Union[int, float]:
        match = np.all(self.sites == np.asarray(site, dtype=np.int64), axis=1)
        if not match.any():
            return 0
        value = self.occupations[np.argmax(match)]
        return int(value) if self.mode == WalkMode.DISCRETE else float(value)

    def to_dict(self) -> dict:
        return {
            tuple(int(c) for c in site): value
            for site, value in zip(self.sites, self.occupations.tolist())
        }

    def check_conservation(self, expected: float) -> None:
        if self.mode == WalkMode.DISCRETE:
            if self.total != expected:
                raise InvariantViolation(
                    "conservation", f"total {self.total} != {int(expected)}"
                )
        elif abs(self.total - expected) > rounding_unit(expected):
            raise InvariantViolation(
                "conservation", f"total {self.total!r} != {expected!r}"
            )
        if self.occupations.size and not np.all(self.occupations > 0):
            raise InvariantViolation("positivity", "stored occupation <= 0")

    def __len__(self) -> int:
        return len(self.sites)


@dataclass(frozen=True)
class DiscreteWalkResult:
    field: LocalTimeField
    max_local_time: int
    final_site: tuple
    path: Optional[np.ndarray] = None


@dataclass(frozen=True)
class ContinuousWalkResult:
    """
    Continuous-time walk: the skeleton path and the (final truncated) holding
    times reconstruct the field exactly.
    """

    field: LocalTimeField
    skeleton: DiscreteWalkResult
    holding_times: np.ndarray
    max_local_time: float
    horizon: float
    jump_times: Optional[np.ndarray] = None

    @property
    def jumps(self) -> int:
        return len(self.holding_times) - 1


def _discrete_result(path: np.ndarray, record_path: bool) -> DiscreteWalkResult:
    field = LocalTimeField.from_visits(path)
    path.setflags(write=False)
    return DiscreteWalkResult(
        field=field,
        max_local_time=field.max_local_time,
        final_site=tuple(int(c) for c in path[-1]),
        path=path if record_path else None,
    )


def run_discrete(cfg: WalkConfig) -> DiscreteWalkResult:
    if cfg.mode != WalkMode.DISCRETE:
        raise ValueError("run_discrete needs a discrete WalkConfig.")
    path = StepSource(cfg.key, cfg.d).positions(cfg.steps)
    result = _discrete_result(path, cfg.record_path)
    result.field.check_conservation(cfg.steps + 1)
    return result


def continuous_result(
    path: np.ndarray,
    holding: np.ndarray,
    horizon: float,
    record_path: bool,
) -> ContinuousWalkResult:
    field = LocalTimeField.from_visits(path, durations=holding)
    holding.setflags(write=False)
    jump_times = None
    if record_path:
        jump_times = np.cumsum(holding)
        jump_times.setflags(write=False)
    return ContinuousWalkResult(
        field=field,
        skeleton=_discrete_result(path, record_path),
        holding_times=holding,
        max_local_time=field.max_local_time,
        horizon=horizon,
        jump_times=jump_times,
    )


def run_continuous(cfg: WalkConfig) -> ContinuousWalkResult:
    if cfg.mode != WalkMode.CONTINUOUS:
        raise ValueError("run_continuous needs a continuous WalkConfig.")
    t = float(cfg.horizon)
    holding_source = HoldingSource(cfg.key)
    partial_sums: List[np.ndarray] = []
    reached = 0.0
    while reached <= t:
        # The running total enters each block, so the sums equal one
        # sequential cumsum over the whole holding stream.
        sums = holding_source.next_block().copy()
        sums[0] += reached
        np.cumsum(sums, out=sums)
        partial_sums.append(sums)
        reached = float(sums[-1])
    cumulative = np.concatenate(partial_sums)
    holding = holding_source.take(len(cumulative))

    # N jumps happen in [0, t]; the walk sits at S_N at time t.
    jumps = int(np.searchsorted(cumulative, t, side="right"))
    final = t - math.fsum(holding[:jumps])
    while jumps > 0 and final <= 0.0:
        jumps -= 1
        final = t - math.fsum(holding[:jumps])
    occupations = np.append(holding[:jumps], final)

    path = StepSource(cfg.key, cfg.d).positions(jumps)
    result = continuous_result(path, occupations, t, cfg.record_path)
    result.field.check_conservation(t)
    return result


def simulate_jumps(cfg: WalkConfig, n: int) -> ContinuousWalkResult:
    """
    Continuous walk frozen at its (n+1)-th jump time: skeleton steps 0..n with
    all n+1 holding periods. The path is always recorded.
    """
    if n < 0:
        raise ValueError(f"Jump count must be nonnegative, got {n}.")
    holding = np.array(HoldingSource(cfg.key).take(n + 1))
    path = StepSource(cfg.key, cfg.d).positions(n)
    return continuous_result(path, holding, math.fsum(holding), record_path=True)


def run_jump_sampled(cfg: WalkConfig, n: int) -> LocalTimeField:
    return simulate_jumps(cfg, n).field


def visit_steps(
    key: StreamKey,
    d: int,
    horizon: int,
    sites: Sequence[Sequence[int]],
    first_only: bool = False,
    skip_start: bool = False,
) -> np.ndarray:
    """
    Steps k in 0..horizon with S_k in sites, in increasing order.

    The step stream is scanned pass by pass without keeping the path; the
    draws are exactly those of StepSource with the same key.
    """
    targets = np.asarray(sites, dtype=np.int64).reshape(-1, d)
    bound = max(horizon, int(np.abs(targets).max()) if targets.size else 0)
    radix = key_radix(d, bound)
    if radix is None:
        increments = step_offsets(d)
        position = np.zeros(d, dtype=np.int64)
    else:
        increments = step_offsets(d) @ key_weights(d, radix)
        targets = site_keys(targets, radix)
        position = np.int64(0)

    def matches(positions: np.ndarray) -> np.ndarray:
        if radix is None:
            return (positions[:, None, :] == targets[None]).all(axis=2).any(axis=1)
        hit = positions == targets[0]
        for target in targets[1:]:
            hit |= positions == target
        return hit

    found: List[np.ndarray] = []
    if not skip_start and matches(np.zeros_like(increments[:1]))[0]:
        found.append(np.zeros(1, dtype=np.int64))
        if first_only:
            return found[0]

    rng = key.generator()
    done = 0
    # Passes widen from one block up to SCAN_BLOCKS blocks.
    width = 1
    while done < horizon:
        count = min(width * STEP_BLOCK, horizon - done)
        blocks = -(-count // STEP_BLOCK)
        steps = np.concatenate([draw_steps(rng, d, STEP_BLOCK) for _ in range(blocks)])
        moves = increments[steps[:count]]
        moves[0] += position
        positions = np.cumsum(moves, axis=0, out=moves)
        hits = np.flatnonzero(matches(positions))
        if hits.size:
            found.append(done + hits + 1)
            if first_only:
                break
        position = positions[-1]
        done += count
        width = min(2 * width, SCAN_BLOCKS)

    if not found:
        return np.zeros(0, dtype=np.int64)
    visits = np.concatenate(found)
    return visits[:1] if first_only else visits


def first_return_step(key: StreamKey, d: int, horizon: int) -> Optional[int]:
    """First k in 1..horizon with S_k = 0."""
    visits = visit_steps(key, d, horizon, [[0] * d], first_only=True, skip_start=True)
    return int(visits[0]) if visits.size else None


def _truncated_occupation(
    cfg: WalkConfig, truncation: int, sites: Sequence[Sequence[int]]
) -> TruncatedSample:
    visits = visit_steps(cfg.key, cfg.d, truncation, sites)
    if cfg.mode == WalkMode.DISCRETE:
        value = float(visits.size)
    elif visits.size:
        # Holding times are drawn only up to the last visit.
        holding = HoldingSource(cfg.key).take(int(visits[-1]) + 1)
        value = math.fsum(holding[visits])
    else:
        value = 0.0
    return TruncatedSample(
        value=value,
        truncation=truncation,
        bias_bound=late_return_bound(cfg.d, truncation),
    )


def origin_local_time_sample(cfg: WalkConfig, truncation: int) -> TruncatedSample:
    """
    Local time at the origin over steps 0..truncation, approximating the
    infinite-horizon value. The bias bound is the probability of any visit
    after the truncation.
    """
    return _truncated_occupation(cfg, truncation, [np.zeros(cfg.d, dtype=np.int64)])


def two_point_local_time_sample(
    cfg: WalkConfig, y: Sequence[int], truncation: int
) -> TruncatedSample:
    if len(y) != cfg.d or not any(y):
        raise ValueError(f"y must be a nonzero site of dimension {cfg.d}, got {y}.")
    sample = _truncated_occupation(
        cfg, truncation, [np.zeros(cfg.d, dtype=np.int64), np.asarray(y)]
    )
    # Either site may be visited after the truncation.
    return sample.model_copy(update={"bias_bound": min(1.0, 2 * sample.bias_bound)})


def exact_step_distribution(d: int, n: int) -> np.ndarray:
    """
    Law of S_n on the box [-n, n]^d by repeated convolution with the step law.
    Index n along each axis is the origin.
    """
    width = 2 * n + 1
    if width**d > MAX_DENSE_CELLS:
        raise ValueError(
            f"Dense law of S_{n} in d={d} needs {width**d} cells "
            f"(limit {MAX_DENSE_CELLS})."
        )
    law = np.zeros((width,) * d)
    law[(n,) * d] = 1.0
    for _ in range(n):
        shifted = np.zeros_like(law)
        for axis in range(d):
            shifted += np.roll(law, 1, axis=axis)
            shifted += np.roll(law, -1, axis=axis)
        law = shifted / (2 * d)
    return law


def diffusive_scaling_check(
    d: int, step_counts: Sequence[int], reps: int, seed: int = 0
) -> pl.DataFrame:
    """
    Empirical sup_x P(S_n = x) scaled by n^{d/2}, beside the exact value where
    the dense law is affordable. Reported, never asserted.
    """
    if not step_counts:
        raise ValueError("step_counts must not be empty.")
    rows = []
    for index, n in enumerate(step_counts):
        rng = StreamKey(seed=seed, replicate_index=index).generator()
        counts = rng.multinomial(n, [1.0 / (2 * d)] * (2 * d), size=reps)
        endpoints = counts[:, 0::2] - counts[:, 1::2]
        _, frequencies = np.unique(endpoints, axis=0, return_counts=True)
        scale = float(n) ** (d / 2.0) if n else 1.0
        parity_violations = int(np.sum((endpoints.sum(axis=1) - n) % 2 != 0))
        try:
            exact_sup = float(exact_step_distribution(d, n).max()) * scale
        except ValueError:
            exact_sup = math.nan
        rows.append(
            {
                "n": n,
                "reps": reps,
                "empirical_sup": frequencies.max() / reps * scale,
                "exact_sup": exact_sup,
                "parity_violations": parity_violations,
            }
        )
    return pl.DataFrame(rows)


def poisson_sandwich_check(cfg: WalkConfig, kappa: float) -> bool:
    """
    Whether the jump-sampled maxima at floor(t - t^kappa) and floor(t + t^kappa)
    jumps bracket the true-time maximum at time t on this realization.
    """
    t = float(cfg.horizon)
    true_max = run_continuous(cfg).max_local_time
    low = math.floor(t - t**kappa)
    high = math.floor(t + t**kappa)
    low_max = run_jump_sampled(cfg, low).max_local_time if low >= 0 else 0.0
    high_max = run_jump_sampled(cfg, high).max_local_time
    return low_max <= true_max <= high_max


def dump_path(path: np.ndarray, file: Union[str, TextIO]) -> None:
    """One site per line, space-separated signed integers."""
    np.savetxt(file, np.asarray(path, dtype=np.int64), fmt="%d", delimiter=" ")
