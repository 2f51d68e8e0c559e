"""
Lattice constants of simple random walk on Z^d: Green's function values,
the escape probability gamma, the tail rate alpha, hitting probabilities and
their far-field constant C_d.

The Green's function is evaluated through its heat-kernel form

    G(y) = int_0^inf prod_i exp(-s/d) I_{y_i}(s/d) ds,

which is the inverse-symbol integral over the torus with every angle done in
closed form. The singularity of the symbol at theta = 0 becomes the algebraic
tail (d / 2 pi s)^{d/2} (1 - kappa_y / s); that part is subtracted and
integrated exactly, and the smooth remainder on [S, inf) is integrated after
the substitution s = S / v^2.
"""

import logging
import math
from functools import lru_cache
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import special

from maxlocal.constants import (
    DEFAULT_QUADRATURE_TOLERANCE,
    GAUSS_NODES_PER_PANEL,
    MAX_REFINEMENT,
    MIN_DIMENSION,
    EstimateMethod,
)
from maxlocal.errors import QuadratureError
from maxlocal.models import (
    GammaAlpha,
    GreenValue,
    HittingAsymptote,
    HittingProb,
    LatticeConstants,
)
from maxlocal.stats import StreamKey, replicate_keys
from maxlocal.walk import first_return_step, late_return_bound

logger = logging.getLogger(__name__)

_NODES, _WEIGHTS = np.polynomial.legendre.leggauss(GAUSS_NODES_PER_PANEL)

DEFAULT_RADII = (4, 8, 16, 32)


def _check_dimension(d: int) -> None:
    if d < MIN_DIMENSION:
        raise ValueError(f"Dimension must be at least {MIN_DIMENSION}, got {d}.")


def _heat_kernel(s: np.ndarray, y: Tuple[int, ...], d: int) -> np.ndarray:
    """P(X_s = y) for the rate-one continuous-time walk."""
    out = np.ones_like(s)
    for coordinate in y:
        out *= special.ive(abs(coordinate), s / d)
    return out


def _tail_terms(s: np.ndarray, y: Tuple[int, ...], d: int) -> np.ndarray:
    kappa = d / 8.0 * sum(4.0 * c * c - 1.0 for c in y)
    return (d / (2.0 * math.pi * s)) ** (d / 2.0) * (1.0 - kappa / s)


def _tail_terms_integral(split: float, y: Tuple[int, ...], d: int) -> float:
    kappa = d / 8.0 * sum(4.0 * c * c - 1.0 for c in y)
    half = d / 2.0
    return (d / (2.0 * math.pi)) ** half * (
        split ** (1.0 - half) / (half - 1.0) - kappa * split ** (-half) / half
    )


def _composite(fn, a: float, b: float, panels: int) -> float:
    edges = np.linspace(a, b, panels + 1)
    mids = 0.5 * (edges[1:] + edges[:-1])[:, None]
    halves = 0.5 * (edges[1:] - edges[:-1])[:, None]
    x = mids + halves * _NODES[None, :]
    return float(np.sum(halves * _WEIGHTS[None, :] * fn(x)))


def _green_rule(y: Tuple[int, ...], d: int, level: int) -> float:
    split = max(4.0 * d, float(sum(c * c for c in y)))
    panels = 2**level

    def remainder(v: np.ndarray) -> np.ndarray:
        s = split / (v * v)
        return (_heat_kernel(s, y, d) - _tail_terms(s, y, d)) * 2.0 * split / v**3

    head = _composite(lambda s: _heat_kernel(s, y, d), 0.0, split, panels)
    tail = _composite(remainder, 0.0, 1.0, panels)
    return head + tail + _tail_terms_integral(split, y, d)


def green_function(
    y: Sequence[int],
    d: int,
    refinement: Optional[int] = None,
    tolerance: float = DEFAULT_QUADRATURE_TOLERANCE,
) -> GreenValue:
    """
    Expected number of visits to y of the walk started at 0.

    Args:
        y: Target site
        d: Dimension
        refinement: Panel level L (2^L panels). None refines until the
            tolerance is met, up to MAX_REFINEMENT
        tolerance: Absolute error target

    Returns:
        GreenValue: Value at level L+1 with error |Q_{L+1} - Q_L|
    """
    _check_dimension(d)
    y = tuple(int(c) for c in y)
    if len(y) != d:
        raise ValueError(f"Site {y} does not have dimension {d}.")

    levels = [refinement] if refinement is not None else range(MAX_REFINEMENT)
    coarse = None
    for level in levels:
        coarse = _green_rule(y, d, level) if coarse is None else coarse
        fine = _green_rule(y, d, level + 1)
        error = max(abs(fine - coarse), 64.0 * np.finfo(float).eps * abs(fine))
        if error <= tolerance:
            logger.debug(f"G{y} in d={d} certified at refinement {level}")
            return GreenValue(y=y, d=d, value=fine, error=error, refinement=level)
        coarse = fine

    raise QuadratureError(
        f"Quadrature for G{y} in d={d} reached error {error:.3e}, "
        f"above tolerance {tolerance:.3e}.",
        achieved_error=error,
        refinement=level,
    )


def green_origin(
    d: int,
    refinement: Optional[int] = None,
    tolerance: float = DEFAULT_QUADRATURE_TOLERANCE,
) -> GreenValue:
    return green_function((0,) * d, d, refinement, tolerance)


def gamma_alpha(
    d: int,
    refinement: Optional[int] = None,
    tolerance: float = DEFAULT_QUADRATURE_TOLERANCE,
) -> GammaAlpha:
    """Escape probability gamma = 1/G(0) and alpha = -1/log(1 - gamma)."""
    green = green_origin(d, refinement, tolerance)
    gamma = 1.0 / green.value
    return GammaAlpha.from_gamma(
        gamma,
        d=d,
        method=EstimateMethod.QUADRATURE,
        error_bound=green.error / (green.value - green.error) ** 2,
    )


def hitting_prob(
    y: Sequence[int],
    d: int,
    refinement: Optional[int] = None,
    tolerance: float = DEFAULT_QUADRATURE_TOLERANCE,
) -> HittingProb:
    """t_y = P(the walk ever visits y) = G(y) / G(0)."""
    y = tuple(int(c) for c in y)
    if not any(y):
        raise ValueError("Hitting probabilities are defined for y != 0.")
    origin = green_origin(d, refinement, tolerance)
    target = green_function(y, d, refinement, tolerance)
    t_y = target.value / origin.value
    error = t_y * (origin.error / origin.value + target.error / target.value)
    return HittingProb(y=y, t_y=t_y, error_bound=error)


def _ray_site(d: int, k: int, direction: str) -> Tuple[Tuple[int, ...], float]:
    if direction == "axis":
        return (k,) + (0,) * (d - 1), float(k)
    if direction == "diagonal":
        return (k,) * d, k * math.sqrt(d)
    raise ValueError(f"Unknown direction '{direction}', use 'axis' or 'diagonal'.")


def hitting_asymptote(
    d: int,
    radii: Sequence[int] = DEFAULT_RADII,
    refinement: Optional[int] = None,
    direction: str = "axis",
    order: int = 2,
) -> HittingAsymptote:
    """
    t_y |y|^{d-2} along a ray, with Richardson extrapolation in 1/|y|.

    The far-field correction of the lattice Green's function is relative order
    |y|^{-2}, hence the default order. Each consecutive pair of radii gives
    one extrapolant; the spread is the change between the last two.
    """
    _check_dimension(d)
    radii = list(radii)
    if len(radii) < 2:
        raise ValueError("hitting_asymptote needs at least two radii.")
    if any(b <= a for a, b in zip(radii, radii[1:])) or radii[0] < 1:
        raise ValueError(f"Radii must be positive and increasing, got {radii}.")

    norms, values, scaled = [], [], []
    for k in radii:
        y, norm = _ray_site(d, k, direction)
        t_y = hitting_prob(y, d, refinement).t_y
        norms.append(norm)
        values.append(t_y)
        scaled.append(t_y * norm ** (d - 2))

    extrapolated = [None]
    for i in range(1, len(radii)):
        a, b = norms[i - 1] ** order, norms[i] ** order
        extrapolated.append((b * scaled[i] - a * scaled[i - 1]) / (b - a))

    c_d = extrapolated[-1]
    if len(radii) > 2:
        spread = abs(extrapolated[-1] - extrapolated[-2])
    else:
        spread = abs(scaled[-1] - scaled[-2])
    return HittingAsymptote(
        d=d,
        direction=direction,
        radii=norms,
        t_y=values,
        scaled=scaled,
        extrapolated=extrapolated,
        c_d=c_d,
        spread=spread,
    )


def continuum_hitting_constant(d: int, green_at_origin: Optional[float] = None) -> float:
    """Brownian prediction for C_d: d Gamma(d/2 - 1) / (2 pi^{d/2} G(0))."""
    _check_dimension(d)
    if green_at_origin is None:
        green_at_origin = green_origin(d).value
    return d * math.gamma(d / 2.0 - 1.0) / (2.0 * math.pi ** (d / 2.0) * green_at_origin)


def escape_indicator(seed: int, replicate_index: int, d: int, horizon: int) -> bool:
    key = replicate_keys(seed, replicate_index, replicate_index + 1)[0]
    return first_return_step(key, d, horizon) is None


def observe_escape(key: StreamKey, d: int, horizon: int) -> Dict[str, float]:
    return {"escaped": float(first_return_step(key, d, horizon) is None)}


def gamma_from_escapes(escapes: int, reps: int, d: int, horizon: int) -> GammaAlpha:
    """
    Monte Carlo gamma from escape counts. The truncation bias bound is added
    to five standard errors in error_bound.
    """
    if escapes == 0:
        raise ValueError(f"No walk escaped within {horizon} steps out of {reps}.")
    p = escapes / reps
    stderr = math.sqrt(p * (1.0 - p) / reps)
    bias = late_return_bound(d, horizon) if horizon > 1 else 0.0
    return GammaAlpha.from_gamma(
        p,
        d=d,
        method=EstimateMethod.MC,
        error_bound=5.0 * stderr + bias,
        stderr=stderr,
        bias_bound=bias,
    )


def gamma_mc(d: int, horizon: int, reps: int, seed: int) -> GammaAlpha:
    """Fraction of walks with no return to the origin within the horizon."""
    _check_dimension(d)
    if horizon < 1:
        raise ValueError(f"Horizon must be at least 1, got {horizon}.")
    escapes = sum(escape_indicator(seed, i, d, horizon) for i in range(reps))
    return gamma_from_escapes(escapes, reps, d, horizon)


@lru_cache(maxsize=None)
def lattice_constants(d: int) -> LatticeConstants:
    """All constants of dimension d, computed once and cached."""
    green = green_origin(d)
    constants = gamma_alpha(d)
    neighbor = hitting_prob((1,) + (0,) * (d - 1), d)
    asymptote = hitting_asymptote(d)
    logger.info(
        f"Lattice constants d={d}: G(0)={green.value:.8f} "
        f"gamma={constants.gamma:.8f} alpha={constants.alpha:.8f}"
    )
    return LatticeConstants(
        d=d,
        green_origin=green,
        gamma_alpha=constants,
        t_e1=neighbor,
        c_d=asymptote.c_d,
        c_d_spread=asymptote.spread,
        continuum_c_d=continuum_hitting_constant(d, green.value),
    )
