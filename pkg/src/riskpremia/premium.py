"""Compensating premia, premium curves on a parameter grid, and monotone interpolation.

The compensating premium pi_theta(X, Y) is the amount added to the
lower-utility lottery so that both sides have equal expected utility; it is
negative when X is preferred, via the sign flip pi(X, Y) = -pi(Y, X). The
solver works in certainty-equivalent units, which keeps residuals on the
monetary scale at every theta.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .exceptions import ConvergenceError
from .lotteries import (
    Lottery,
    UtilityFamily,
    certainty_equivalent,
    _ce_cara_scalar,
    _ce_crra_scalar,
    _require_support,
    outcome_span,
)

CE_TOL_FACTOR = 1e-10
MAX_BRACKET_FACTOR = 1e6
MAX_SOLVER_ITER = 200


@dataclass(frozen=True)
class GridSpec:
    """Ascending, uniformly spaced grid of risk parameters."""

    start: float = -20.0
    stop: float = 20.0
    step: float = 0.01

    def __post_init__(self) -> None:
        if not (self.step > 0 and self.stop > self.start):
            raise ValueError("grid requires stop > start and step > 0")

    @property
    def size(self) -> int:
        return int(round((self.stop - self.start) / self.step)) + 1

    def thetas(self) -> np.ndarray:
        return np.linspace(self.start, self.stop, self.size)

    def refined(self, factor: int = 10) -> "GridSpec":
        return GridSpec(self.start, self.stop, self.step / factor)


DEFAULT_GRID = GridSpec()


def premium_limits(x: Lottery, y: Lottery) -> tuple[float, float]:
    """(pi at theta=0, pi at theta=+inf) = (E[Y]-E[X], min Y - min X)."""
    return (y.expected_value - x.expected_value, y.min_outcome - x.min_outcome)


def _ce(family: UtilityFamily, theta: float, outs: tuple[float, ...], probs: tuple[float, ...]) -> float:
    if family is UtilityFamily.CARA:
        return _ce_cara_scalar(theta, outs, probs)
    return _ce_crra_scalar(theta, outs, probs)


def compensating_premium(
    family: UtilityFamily,
    theta: float,
    x: Lottery,
    y: Lottery,
    guess: float | None = None,
) -> float:
    """Solve E[u_theta(X + pi)] = E[u_theta(Y)] for the signed premium pi.

    Positive when Y is weakly preferred at theta, negative otherwise.
    theta may be math.inf (closed form: min Y - min X); theta = 0 uses the
    risk-neutral closed form E[Y] - E[X]. An optional ``guess`` seeds a tight
    warm-start bracket (used when sweeping a curve along a grid).
    """
    if math.isnan(theta) or theta == -math.inf:
        raise ValueError("theta must be finite or +inf")
    _require_support(family, x)
    _require_support(family, y)
    if theta == math.inf:
        return y.min_outcome - x.min_outcome
    if theta == 0.0:
        return y.expected_value - x.expected_value

    span = outcome_span(x, y)
    if span == 0.0:
        # both degenerate at the same value
        return y.outcomes[0] - x.outcomes[0]

    ce_x = _ce(family, theta, x.outcomes, x.probabilities)
    ce_y = _ce(family, theta, y.outcomes, y.probabilities)
    if ce_x > ce_y:
        rev_guess = -guess if guess is not None else None
        return -compensating_premium(family, theta, y, x, guess=rev_guess)

    outs, probs = x.outcomes, x.probabilities

    def g(pi: float) -> float:
        return _ce(family, theta, tuple(o + pi for o in outs), probs) - ce_y

    # In this branch the root is non-negative and bounded by max Y - min X.
    lo, hi = 0.0, max(y.max_outcome - x.min_outcome, 0.0) + 1e-9 * (1.0 + span)
    if guess is not None and guess > 0.0:
        delta = max(1e-4 * span, 1e-12)
        wlo, whi = max(lo, guess - delta), min(hi, guess + delta)
        while wlo > lo or whi < hi:
            if g(wlo) <= 0.0 <= g(whi):
                lo, hi = wlo, whi
                break
            delta *= 8.0
            wlo, whi = max(lo, guess - delta), min(hi, guess + delta)
    glo, ghi = g(lo), g(hi)
    if glo > 0.0 or ghi < 0.0:
        # mathematically unreachable; expand before giving up
        width = hi - lo
        while ghi < 0.0:
            hi += max(width, span)
            width = hi - lo
            if width > MAX_BRACKET_FACTOR * span:
                raise ConvergenceError("premium bracket expansion exceeded 1e6 * span")
            ghi = g(hi)
    if glo == 0.0:
        return lo
    root = float(brentq(g, lo, hi, xtol=1e-13 * (1.0 + span), rtol=8.9e-16, maxiter=MAX_SOLVER_ITER))
    if abs(g(root)) > CE_TOL_FACTOR * span:
        raise ConvergenceError(f"premium residual above tolerance at theta={theta!r}")
    return root


@dataclass(frozen=True, eq=False)
class PremiumCurve:
    """pi_theta(X, Y) precomputed on a grid, with monotone cubic interpolation.

    ``values`` holds exact solver output at each node; ``slopes`` the
    Fritsch-Carlson limited derivatives used by :func:`interpolate_premium`.
    Extrapolation beyond the grid is constant at the boundary values.
    """

    pair_id: str
    family: UtilityFamily
    grid_spec: GridSpec
    grid: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    slopes: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.grid.shape != self.values.shape or np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid must be strictly ascending and match values")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("curve values must be finite")
        for arr in (self.grid, self.values, self.slopes):
            arr.setflags(write=False)

    @property
    def left_limit(self) -> float:
        return float(self.values[0])

    @property
    def right_limit(self) -> float:
        return float(self.values[-1])


def _pchip_slopes(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Node derivatives for a monotonicity-preserving cubic Hermite interpolant.

    Fritsch-Carlson limiting: start from centered secant averages, zero the
    slopes flanking flat intervals, then shrink (a, b) = (m_i, m_{i+1}) / d_i
    onto the circle a^2 + b^2 <= 9 so each cubic piece stays monotone.
    """
    n = len(x)
    if n == 1:
        return np.zeros(1)
    h = np.diff(x)
    d = np.diff(y) / h
    m = np.empty(n)
    if n == 2:
        m[:] = d[0]
        return m
    m[1:-1] = 0.5 * (d[:-1] + d[1:])
    # one-sided three-point endpoint slopes, clamped to preserve shape
    for idx, (h0, h1, d0, d1) in ((0, (h[0], h[1], d[0], d[1])),
                                  (n - 1, (h[-1], h[-2], d[-1], d[-2]))):
        slope = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1)
        if slope * d0 <= 0.0:
            slope = 0.0
        elif d0 * d1 < 0.0 and abs(slope) > 3.0 * abs(d0):
            slope = 3.0 * d0
        m[idx] = slope
    for i in range(n - 1):
        if d[i] == 0.0:
            m[i] = 0.0
            m[i + 1] = 0.0
            continue
        a = m[i] / d[i]
        b = m[i + 1] / d[i]
        if a < 0.0:
            m[i] = 0.0
            a = 0.0
        if b < 0.0:
            m[i + 1] = 0.0
            b = 0.0
        s = a * a + b * b
        if s > 9.0:
            t = 3.0 / math.sqrt(s)
            m[i] = t * a * d[i]
            m[i + 1] = t * b * d[i]
    return m


def build_premium_curve(
    family: UtilityFamily,
    x: Lottery,
    y: Lottery,
    grid_spec: GridSpec = DEFAULT_GRID,
    pair_id: str = "pair",
) -> PremiumCurve:
    """Solve the premium at every grid node, sweeping with warm-started brackets."""
    thetas = grid_spec.thetas()
    values = np.empty_like(thetas)
    prev: float | None = None
    for i, th in enumerate(thetas):
        prev = compensating_premium(family, float(th), x, y, guess=prev)
        values[i] = prev
    slopes = _pchip_slopes(thetas, values)
    return PremiumCurve(pair_id, family, grid_spec, thetas, values, slopes)


@lru_cache(maxsize=512)
def cached_premium_curve(
    family: UtilityFamily, x: Lottery, y: Lottery, grid_spec: GridSpec = DEFAULT_GRID
) -> PremiumCurve:
    """Per-(pair, family, grid) cache in front of :func:`build_premium_curve`."""
    return build_premium_curve(family, x, y, grid_spec)


def _hermite(t: np.ndarray, y0, y1, d0, d1, h) -> np.ndarray:
    t2 = t * t
    t3 = t2 * t
    return (y0 * (2 * t3 - 3 * t2 + 1) + h * d0 * (t3 - 2 * t2 + t)
            + y1 * (-2 * t3 + 3 * t2) + h * d1 * (t3 - t2))


def interpolate_premium(curve: PremiumCurve, theta):
    """Evaluate the curve's monotone cubic interpolant; constant outside the grid.

    Accepts a scalar or an array of thetas.
    """
    scalar = np.isscalar(theta)
    th = np.atleast_1d(np.asarray(theta, dtype=float))
    g, v, s = curve.grid, curve.values, curve.slopes
    tcl = np.clip(th, g[0], g[-1])
    k = np.clip(np.searchsorted(g, tcl, side="right") - 1, 0, len(g) - 2)
    h = g[k + 1] - g[k]
    t = (tcl - g[k]) / h
    out = _hermite(t, v[k], v[k + 1], s[k], s[k + 1], h)
    exact = tcl == g[k]
    if np.any(exact):
        out[exact] = v[k[exact]]
    return float(out[0]) if scalar else out


def write_curve_csv(curve: PremiumCurve, path: str | Path) -> None:
    """Write the curve as CSV with header ``theta,premium``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["theta", "premium"])
        for th, val in zip(curve.grid, curve.values):
            writer.writerow([f"{th:.10g}", f"{val:.12g}"])
