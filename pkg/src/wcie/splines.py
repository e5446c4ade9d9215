"""Time bases for exposure trajectories and weight functions.

Two kinds are supported:

* ``natural-cubic``: the natural cubic spline space on the knot sequence
  ``(low, *interior, high)``, linear outside the boundary knots.  It is
  realized through the cardinal (interpolating) functions ``N_j`` that take
  the value 1 at knot ``j`` and 0 at every other knot.  The first cardinal
  function is replaced by the constant, so column ``k >= 1`` of the basis is
  ``N_k`` and coefficient ``k`` reads as "value at knot ``k`` minus value at
  the low boundary knot".
* ``piecewise-constant``: a step function on consecutive intervals, coded
  against the first interval (column 0 is the constant, column ``k`` the
  indicator of interval ``k``).

Column 0 of every basis is identically 1, so a coefficient vector
``theta`` maps to the function ``sum_k theta[k] * B_k(t)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

Kind = Literal["natural-cubic", "piecewise-constant"]


class KnotError(ValueError):
    """Invalid knot configuration."""


@dataclass(frozen=True, eq=False)
class SplineBasis:
    """Immutable time basis; see module docstring for the coordinates.

    For ``piecewise-constant`` bases ``interior_knots`` holds the inner
    breakpoints; intervals are left-closed except the last one.
    """

    kind: Kind
    boundary_knots: tuple[float, float]
    interior_knots: tuple[float, ...]
    _spline: CubicSpline | None = field(default=None, repr=False)

    @property
    def knots(self) -> np.ndarray:
        lo, hi = self.boundary_knots
        return np.array([lo, *self.interior_knots, hi], dtype=float)

    @property
    def dimension(self) -> int:
        # natural-cubic: one function per knot; piecewise: one per interval.
        # Both equal len(interior) + 2 or + 1 respectively.
        if self.kind == "natural-cubic":
            return len(self.interior_knots) + 2
        return len(self.interior_knots) + 1

    def __call__(self, t) -> np.ndarray:
        return eval_basis(self, t)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SplineBasis):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.boundary_knots == other.boundary_knots
            and self.interior_knots == other.interior_knots
        )

    def __hash__(self) -> int:
        return hash((self.kind, self.boundary_knots, self.interior_knots))

    def __reduce__(self):
        if self.kind == "natural-cubic":
            return (build_natural_cubic_basis, (self.interior_knots, self.boundary_knots))
        return (build_piecewise_constant_basis, (self.knots.tolist(),))

    def interval_indicators(self, t) -> np.ndarray:
        """One-hot interval membership, shape ``(len(t), n_intervals)``.

        Only defined for piecewise-constant bases.
        """
        if self.kind != "piecewise-constant":
            raise TypeError("interval indicators only exist for piecewise-constant bases")
        t = _as_times(t)
        idx = self._interval_index(t)
        out = np.zeros((t.size, self.dimension))
        out[np.arange(t.size), idx] = 1.0
        return out

    def _interval_index(self, t: np.ndarray) -> np.ndarray:
        # left-closed / right-open, last interval closed; points outside the
        # breakpoints fall into the nearest end interval
        idx = np.searchsorted(np.asarray(self.interior_knots, float), t, side="right")
        return np.clip(idx, 0, self.dimension - 1)


def _check_knots(interior: Sequence[float], boundary: Sequence[float]) -> tuple:
    if len(boundary) != 2:
        raise KnotError("boundary_knots must be a (low, high) pair")
    lo, hi = (float(b) for b in boundary)
    interior = tuple(float(k) for k in interior)
    if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
        raise KnotError(f"boundary knots must satisfy low < high, got ({lo}, {hi})")
    if not all(np.isfinite(interior)):
        raise KnotError("knots must be finite")
    if any(b <= a for a, b in zip(interior, interior[1:])):
        raise KnotError(f"interior knots must be strictly increasing: {interior}")
    if interior and (interior[0] <= lo or interior[-1] >= hi):
        raise KnotError(f"interior knots {interior} not strictly inside ({lo}, {hi})")
    return interior, (lo, hi)


def build_natural_cubic_basis(interior_knots, boundary_knots) -> SplineBasis:
    """Natural cubic spline basis with a leading constant column.

    Parameters
    ----------
    interior_knots : sequence of float
        At least one knot, strictly increasing and inside the boundary.
    boundary_knots : (float, float)
        Where the spline switches to linear extrapolation.

    Returns
    -------
    SplineBasis
        ``dimension == len(interior_knots) + 2``.
    """
    interior, boundary = _check_knots(interior_knots, boundary_knots)
    if len(interior) < 1:
        raise KnotError("a natural cubic basis needs at least one interior knot")
    knots = np.array([boundary[0], *interior, boundary[1]])
    spline = CubicSpline(knots, np.eye(knots.size), bc_type="natural", extrapolate=False)
    return SplineBasis("natural-cubic", boundary, interior, spline)


def build_piecewise_constant_basis(breaks) -> SplineBasis:
    """Step-function basis on ``[breaks[0], breaks[-1]]``.

    ``breaks = [-24, -19, -14, -9, -4, 0]`` gives five intervals and
    ``dimension == 5``.
    """
    breaks = [float(b) for b in breaks]
    if len(breaks) < 2:
        raise KnotError("need at least two breakpoints")
    interior, boundary = _check_knots(breaks[1:-1], (breaks[0], breaks[-1]))
    return SplineBasis("piecewise-constant", boundary, interior)


def _as_times(t) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if t.ndim != 1:
        raise ValueError("times must be a scalar or a 1-d array")
    if not np.all(np.isfinite(t)):
        raise ValueError("times must be finite")
    return t


def eval_basis(basis: SplineBasis, t) -> np.ndarray:
    """Evaluate all basis functions.

    Returns an array of shape ``(dimension,)`` for scalar ``t`` and
    ``(len(t), dimension)`` otherwise.  Column 0 is exactly 1.
    """
    scalar = np.ndim(t) == 0
    t = _as_times(t)
    if basis.kind == "natural-cubic":
        out = _eval_natural(basis, t)
    else:
        out = np.zeros((t.size, basis.dimension))
        idx = basis._interval_index(t)
        out[np.arange(t.size), idx] = 1.0
        out[:, 0] = 1.0
    return out[0] if scalar else out


def _eval_natural(basis: SplineBasis, t: np.ndarray) -> np.ndarray:
    spline = basis._spline
    lo, hi = basis.boundary_knots
    inside = np.clip(t, lo, hi)
    vals = spline(inside)
    # linear continuation beyond the boundary knots
    below, above = t < lo, t > hi
    if below.any():
        vals[below] = spline(lo) + np.outer(t[below] - lo, spline(lo, 1))
    if above.any():
        vals[above] = spline(hi) + np.outer(t[above] - hi, spline(hi, 1))
    vals[:, 0] = 1.0
    return vals


def basis_derivative(basis: SplineBasis, t, order: int = 1) -> np.ndarray:
    """Analytic derivative of every basis column, shape ``(len(t), dimension)``."""
    if basis.kind != "natural-cubic":
        raise TypeError("derivatives are only provided for natural-cubic bases")
    t = _as_times(t)
    lo, hi = basis.boundary_knots
    out = basis._spline(np.clip(t, lo, hi), order)
    outside = (t < lo) | (t > hi)
    if order == 1:
        out[t < lo] = basis._spline(lo, 1)
        out[t > hi] = basis._spline(hi, 1)
    else:
        out[outside] = 0.0
    out[:, 0] = 0.0
    return out


def type7_quantile(values, probs) -> np.ndarray:
    """Empirical quantile with linear interpolation, ``h = (n - 1) p``."""
    x = np.sort(np.asarray(values, dtype=float))
    h = (x.size - 1) * np.asarray(probs, dtype=float)
    lo = np.floor(h).astype(int)
    hi = np.minimum(lo + 1, x.size - 1)
    return x[lo] + (h - lo) * (x[hi] - x[lo])


def place_knots(times, count: int, strategy: str = "percentile") -> list[float]:
    """Interior knots from pooled observation times.

    ``percentile`` puts knot ``j`` at the ``j / (count + 1)`` type-7
    quantile; ``equidistant`` splits ``[min, max]`` into ``count + 1``
    equal pieces.
    """
    if count < 1:
        raise KnotError("count must be >= 1")
    times = np.asarray(times, dtype=float).ravel()
    if times.size == 0 or not np.all(np.isfinite(times)):
        raise KnotError("times must be a non-empty finite array")
    lo, hi = times.min(), times.max()
    if lo == hi:
        raise KnotError("degenerate time range: all times are equal")
    probs = np.arange(1, count + 1) / (count + 1)
    if strategy == "equidistant":
        knots = lo + probs * (hi - lo)
    elif strategy == "percentile":
        if np.unique(times).size < count + 2:
            raise KnotError(f"need at least {count + 2} distinct times for {count} percentile knots")
        knots = type7_quantile(times, probs)
    else:
        raise ValueError(f"unknown knot strategy {strategy!r}")
    knots = knots.tolist()
    if any(b <= a for a, b in zip(knots, knots[1:])) or knots[0] <= lo or knots[-1] >= hi:
        raise KnotError(f"knot placement produced duplicate or boundary knots: {knots}")
    return knots


def weight_basis(window: float, n_knots: int, kind: str = "natural-cubic") -> SplineBasis:
    """Default weight basis on ``[-window, 0]``.

    Natural-cubic bases get ``n_knots`` equidistant interior knots.  For
    piecewise-constant bases ``n_knots`` is the number of intervals; each interval
    covers the same number of integer grid points when ``n_knots`` divides
    ``window + 1`` (24 years in 5 intervals gives breaks -24, -19, ..., -4, 0).
    """
    if kind == "natural-cubic":
        return build_natural_cubic_basis(
            place_knots([-window, 0.0], n_knots, "equidistant"), (-window, 0.0)
        )
    if kind in ("piecewise-constant", "piecewise"):
        width = (window + 1.0) / n_knots
        return build_piecewise_constant_basis([-window + k * width for k in range(n_knots)] + [0.0])
    raise ValueError(f"unknown basis kind {kind!r}")
