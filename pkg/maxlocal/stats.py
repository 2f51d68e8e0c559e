"""
Statistical utilities shared by every experiment: counter-based random streams,
confidence intervals, Kolmogorov-Smirnov distances and mergeable accumulators.
"""

import hashlib
import math
from typing import Callable, Iterable, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import stats as sps

from maxlocal.constants import WILSON_LEVEL

UINT64_MASK = 2**64 - 1


class StreamKey(BaseModel):
    """
    Identifies one reproducible random stream.

    The raw bits come from numpy's Philox4x64-10 counter-based generator with
    key (seed, replicate_index) and counter draw_counter, so distinct keys give
    independent streams and the same key always replays the same stream.
    """

    seed: int = Field(ge=0, le=UINT64_MASK)
    replicate_index: int = Field(default=0, ge=0, le=UINT64_MASK)
    draw_counter: int = Field(default=0, ge=0)

    model_config = ConfigDict(frozen=True)

    def generator(self, counter_offset: int = 0) -> np.random.Generator:
        bit_generator = np.random.Philox(
            key=np.array([self.seed, self.replicate_index], dtype=np.uint64),
            counter=self.draw_counter + counter_offset,
        )
        return np.random.Generator(bit_generator)


def replicate_keys(seed: int, start: int, stop: int) -> List[StreamKey]:
    return [StreamKey(seed=seed, replicate_index=i) for i in range(start, stop)]


def reservoir_priority(key: StreamKey, slot: int) -> float:
    # Deterministic thinning: the priority of a value is a hash of its origin.
    payload = f"{key.seed}:{key.replicate_index}:{slot}".encode()
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return int.from_bytes(digest, "big") / 2.0**64


def derived_seed(seed: int, label: str) -> int:
    """Seed of a named sub-stage whose replicates must not share streams with seed."""
    digest = hashlib.blake2b(f"{seed}:{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def _grow_partials(partials: List[float], x: float) -> None:
    # Shewchuk's exact summation: partials stay non-overlapping and sum exactly.
    i = 0
    for y in partials:
        if abs(x) < abs(y):
            x, y = y, x
        hi = x + y
        lo = y - (hi - x)
        if lo:
            partials[i] = lo
            i += 1
        x = hi
    partials[i:] = [x]


class Accumulator(BaseModel):
    """
    Count, exact sum, exact sum of squares, extrema and an optional bottom-k
    reservoir. Merging is associative and commutative, with the empty
    accumulator as identity.
    """

    count: int = 0
    partials: List[float] = Field(default_factory=list)
    partials_sq: List[float] = Field(default_factory=list)
    minimum: Optional[float] = None
    maximum: Optional[float] = None
    reservoir_capacity: int = Field(default=0, ge=0)
    reservoir: List[Tuple[float, float]] = Field(default_factory=list)

    def add(self, value: float, key: Optional[StreamKey] = None, slot: int = 0):
        value = float(value)
        if not math.isfinite(value):
            raise ValueError(f"Accumulator values must be finite, got {value}.")
        self.count += 1
        _grow_partials(self.partials, value)
        _grow_partials(self.partials_sq, value * value)
        self.minimum = value if self.minimum is None else min(self.minimum, value)
        self.maximum = value if self.maximum is None else max(self.maximum, value)
        if self.reservoir_capacity:
            if key is None:
                raise ValueError("A stream key is required to fill the reservoir.")
            self.reservoir.append((reservoir_priority(key, slot), value))
            if len(self.reservoir) > 2 * self.reservoir_capacity:
                self._compact()

    def add_many(
        self, values: Iterable[float], key: Optional[StreamKey] = None, first_slot=0
    ):
        for offset, value in enumerate(values):
            self.add(value, key=key, slot=first_slot + offset)

    def _compact(self) -> None:
        self.reservoir.sort()
        del self.reservoir[self.reservoir_capacity :]

    @property
    def sum(self) -> float:
        return math.fsum(self.partials)

    @property
    def sum_sq(self) -> float:
        return math.fsum(self.partials_sq)

    @property
    def mean(self) -> float:
        if self.count == 0:
            return math.nan
        return self.sum / self.count

    @property
    def variance(self) -> float:
        """Unbiased sample variance."""
        if self.count < 2:
            return math.nan
        mean = self.mean
        centered = self.sum_sq - self.count * mean * mean
        return max(centered, 0.0) / (self.count - 1)

    @property
    def stderr(self) -> float:
        if self.count < 2:
            return math.nan
        return math.sqrt(self.variance / self.count)

    def samples(self) -> np.ndarray:
        self._compact()
        return np.array([value for _, value in self.reservoir], dtype=float)


def merge(a: Accumulator, b: Accumulator) -> Accumulator:
    if a.reservoir_capacity != b.reservoir_capacity:
        raise ValueError(
            "Cannot merge accumulators with reservoir capacities "
            f"{a.reservoir_capacity} and {b.reservoir_capacity}."
        )
    partials = list(a.partials)
    for x in b.partials:
        _grow_partials(partials, x)
    partials_sq = list(a.partials_sq)
    for x in b.partials_sq:
        _grow_partials(partials_sq, x)
    extrema_min = [v for v in (a.minimum, b.minimum) if v is not None]
    extrema_max = [v for v in (a.maximum, b.maximum) if v is not None]
    merged = Accumulator(
        count=a.count + b.count,
        partials=partials,
        partials_sq=partials_sq,
        minimum=min(extrema_min) if extrema_min else None,
        maximum=max(extrema_max) if extrema_max else None,
        reservoir_capacity=a.reservoir_capacity,
        reservoir=list(a.reservoir) + list(b.reservoir),
    )
    merged._compact()
    return merged


def _z_value(level: float) -> float:
    if not 0.0 < level < 1.0:
        raise ValueError(f"Confidence level must lie in (0, 1), got {level}.")
    return float(sps.norm.ppf(0.5 + level / 2.0))


def wilson_interval(
    successes: int, trials: int, level: float = WILSON_LEVEL
) -> Tuple[float, float]:
    """
    Wilson score interval for a binomial proportion.

    Args:
        successes: Number of successes
        trials: Number of trials (at least 1)
        level: Two-sided confidence level

    Returns:
        Tuple[float, float]: Lower and upper bound
    """
    if trials < 1:
        raise ValueError("Wilson interval needs at least one trial.")
    if not 0 <= successes <= trials:
        raise ValueError(f"Successes {successes} outside [0, {trials}].")
    z = _z_value(level)
    p_hat = successes / trials
    denominator = 1.0 + z * z / trials
    center = (p_hat + z * z / (2.0 * trials)) / denominator
    spread = (
        z
        * math.sqrt((p_hat * (1.0 - p_hat) + z * z / (4.0 * trials)) / trials)
        / denominator
    )
    lower = 0.0 if successes == 0 else max(0.0, center - spread)
    upper = 1.0 if successes == trials else min(1.0, center + spread)
    return lower, upper


def normal_interval(
    mean: float, stderr: float, level: float = WILSON_LEVEL
) -> Tuple[float, float]:
    z = _z_value(level)
    return mean - z * stderr, mean + z * stderr


def ks_distance(
    samples: Iterable[float],
    cdf: Callable[[np.ndarray], np.ndarray],
    lattice: bool = False,
) -> float:
    """
    Kolmogorov-Smirnov distance between the empirical law of samples and cdf.

    With lattice=True the samples are integer valued and the supremum runs over
    the integer support, where both distribution functions are step functions.
    """
    x = np.sort(np.asarray(list(samples), dtype=float))
    if x.size == 0:
        raise ValueError("KS distance needs at least one sample.")
    if not lattice:
        return float(sps.kstest(x, cdf, method="asymp").statistic)
    support = np.arange(math.floor(x[0]) - 1, math.floor(x[-1]) + 1, dtype=float)
    empirical = np.searchsorted(x, support, side="right") / x.size
    theory = np.asarray(cdf(support), dtype=float)
    return float(np.max(np.abs(empirical - theory)))
