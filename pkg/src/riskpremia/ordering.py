"""Numerical orderedness verdicts for lottery pairs.

A pair (X, Y) is increasing-premium ordered ("pi-ordered") when the
compensating premium is nondecreasing in the risk parameter, and
single-crossing ordered ("omega-ordered") when the premium switches sign at
most once, from negative to positive. Verdicts here are grid-based numerical
certificates: the default grid must pass a slack test and a 10x refinement
around near-flat regions must confirm it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .exceptions import AmbiguityError
from .lotteries import Lottery, UtilityFamily, ce_grid, outcome_span
from .premium import DEFAULT_GRID, GridSpec, build_premium_curve, compensating_premium

ZERO_BAND_FACTOR = 1e-9
SLACK_FACTOR = 1e-9
CROSSING_THETA_TOL = 1e-6
PEAK_THETA_TOL = 1e-4
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class OrderVerdict:
    """Diagnostics for one classified pair."""

    pi_ordered: bool
    omega_ordered: bool
    peak_theta: float | None
    peak_premium: float | None
    crossings: tuple[float, ...]
    grid_used: GridSpec

    def __post_init__(self) -> None:
        if self.pi_ordered and not self.omega_ordered:
            raise ValueError("pi-ordered implies omega-ordered")


def _signs(values: np.ndarray, zero_eps: float) -> np.ndarray:
    s = np.zeros(len(values), dtype=int)
    s[values > zero_eps] = 1
    s[values < -zero_eps] = -1
    return s


def _omega_verdict(signs: np.ndarray) -> bool:
    nz = signs[signs != 0]
    if len(nz) == 0:
        return True
    changes = np.nonzero(np.diff(nz) != 0)[0]
    if len(changes) == 0:
        return True
    if len(changes) > 1:
        return False
    return nz[changes[0]] == -1  # the single switch must be - to +


def _drawdown_ok(values: np.ndarray, slack: float) -> bool:
    return float(np.max(np.maximum.accumulate(values) - values)) <= slack


def _locate_crossings(
    premium_at: Callable[[float], float],
    thetas: np.ndarray,
    signs: np.ndarray,
) -> tuple[float, ...]:
    nz_idx = np.nonzero(signs != 0)[0]
    crossings = []
    for a, b in zip(nz_idx[:-1], nz_idx[1:]):
        if signs[a] == signs[b]:
            continue
        lo, hi = float(thetas[a]), float(thetas[b])
        flo = premium_at(lo)
        while hi - lo > CROSSING_THETA_TOL:
            mid = 0.5 * (lo + hi)
            fm = premium_at(mid)
            if (fm > 0) == (flo > 0):
                lo, flo = mid, fm
            else:
                hi = mid
        crossings.append(0.5 * (lo + hi))
    return tuple(crossings)


def _golden_max(f: Callable[[float], float], lo: float, hi: float, tol: float) -> tuple[float, float]:
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
    xm = 0.5 * (a + b)
    return xm, f(xm)


def classify_pair(
    family: UtilityFamily,
    x: Lottery,
    y: Lottery,
    grid_spec: GridSpec = DEFAULT_GRID,
    slack: float | None = None,
    zero_eps: float | None = None,
) -> OrderVerdict:
    """Classify a pair on a grid: monotonicity, sign pattern, crossings, peak.

    ``slack`` is the monotonicity tolerance (default 1e-9 * outcome span);
    ``zero_eps`` the band within which a premium counts as zero. Crossings are
    bisected to 1e-6 in theta; an interior premium maximum, when present, is
    refined by golden section to 1e-4.
    """
    span = outcome_span(x, y)
    if slack is None:
        slack = SLACK_FACTOR * span if span > 0 else 1e-12
    if zero_eps is None:
        zero_eps = ZERO_BAND_FACTOR * span if span > 0 else 1e-12

    curve = build_premium_curve(family, x, y, grid_spec)
    thetas, values = curve.grid, curve.values

    def premium_at(theta: float) -> float:
        return compensating_premium(family, theta, x, y)

    pi_ordered = _drawdown_ok(values, slack)
    if pi_ordered:
        pi_ordered = _confirm_near_flat(family, x, y, grid_spec, thetas, values, slack)

    signs = _signs(values, zero_eps)
    omega = _omega_verdict(signs)
    if pi_ordered and not omega:
        # a nondecreasing curve cannot have a +/- switch; zero-band artefacts only
        omega = True

    crossings = _locate_crossings(premium_at, thetas, signs)

    peak_theta = peak_premium = None
    i_star = int(np.argmax(values))
    if 0 < i_star < len(values) - 1 and values[i_star] > max(values[0], values[-1]):
        peak_theta, peak_premium = _golden_max(
            premium_at, float(thetas[i_star - 1]), float(thetas[i_star + 1]), PEAK_THETA_TOL
        )

    return OrderVerdict(pi_ordered, omega, peak_theta, peak_premium, crossings, grid_spec)


def _confirm_near_flat(
    family: UtilityFamily,
    x: Lottery,
    y: Lottery,
    grid_spec: GridSpec,
    thetas: np.ndarray,
    values: np.ndarray,
    slack: float,
    factor: int = 10,
    max_extra: int = 60000,
) -> bool:
    """Re-check barely-increasing intervals on a 10x finer local grid."""
    diffs = np.diff(values)
    flat = diffs <= 10.0 * slack
    if not np.any(flat):
        return True
    idx = np.nonzero(flat)[0]
    # merge adjacent flagged intervals into runs
    runs: list[tuple[int, int]] = []
    start = prev = idx[0]
    for i in idx[1:]:
        if i == prev + 1:
            prev = i
            continue
        runs.append((start, prev))
        start = prev = i
    runs.append((start, prev))
    step = grid_spec.step / factor
    budget = max_extra
    for a, b in runs:
        lo, hi = float(thetas[a]), float(thetas[b + 1])
        n = int(round((hi - lo) / step))
        n = min(n, budget)
        if n <= 1:
            continue
        budget -= n
        fine = np.linspace(lo, hi, n + 1)
        prev_val: float | None = float(values[a])
        sub = np.empty(n + 1)
        for j, th in enumerate(fine):
            prev_val = compensating_premium(family, float(th), x, y, guess=prev_val)
            sub[j] = prev_val
        if not _drawdown_ok(sub, slack):
            return False
        if budget <= 0:
            break
    return True


def indifference_threshold(
    family: UtilityFamily,
    x: Lottery,
    y: Lottery,
    search_interval: tuple[float, float] = (-20.0, 20.0),
    scan_points: int = 801,
    tol_factor: float = 1e-9,
) -> float | None:
    """The theta at which CE(X) = CE(Y), when the CE difference crosses zero once.

    Scans the interval, then bisects the single sign change until the CE
    difference is below ``tol_factor * span``. Returns None when there is no
    sign change; raises :class:`AmbiguityError` when the scan finds several.
    """
    lo, hi = search_interval
    if not hi > lo:
        raise ValueError("search interval must have positive width")
    span = outcome_span(x, y)
    tol = tol_factor * span if span > 0 else 1e-15
    grid = np.linspace(lo, hi, scan_points)
    d = ce_grid(family, grid, x) - ce_grid(family, grid, y)
    signs = _signs(d, 0.0)
    nz = np.nonzero(signs != 0)[0]
    if len(nz) == 0:
        return None
    flips = [(a, b) for a, b in zip(nz[:-1], nz[1:]) if signs[a] != signs[b]]
    if len(flips) == 0:
        return None
    if len(flips) > 1:
        raise AmbiguityError(
            f"{len(flips)} sign changes of the CE difference on {search_interval}; "
            "narrow the search interval"
        )

    def ce_diff(theta: float) -> float:
        xs = ce_grid(family, np.array([theta]), x)[0]
        ys = ce_grid(family, np.array([theta]), y)[0]
        return float(xs - ys)

    a, b = float(grid[flips[0][0]]), float(grid[flips[0][1]])
    fa = ce_diff(a)
    mid = 0.5 * (a + b)
    for _ in range(200):
        mid = 0.5 * (a + b)
        fm = ce_diff(mid)
        if abs(fm) < tol:
            return mid
        if (fm > 0) == (fa > 0):
            a, fa = mid, fm
        else:
            b = mid
        if b - a < 1e-15 * max(1.0, abs(mid)):
            break
    if abs(ce_diff(mid)) < tol:
        return mid
    raise AmbiguityError("bisection did not reach the indifference tolerance")


def mps_local_diagnostic(
    family: UtilityFamily,
    theta: float,
    y: Lottery,
    conditional_variance: Mapping[float, float] | Sequence[float],
) -> bool:
    """Sufficient local condition for premium monotonicity under a small spread.

    For X = Y + h*S with small h, the premium is increasing in theta when
    A_theta(y) * Var(S | Y = y) is nonincreasing across ascending outcomes y,
    where A is the Arrow-Pratt coefficient of absolute risk aversion.
    """
    if not theta > 0:
        raise ValueError("the local diagnostic applies to risk-averse theta > 0")
    if isinstance(conditional_variance, Mapping):
        var = [conditional_variance[o] for o in y.outcomes]
    else:
        var = list(conditional_variance)
        if len(var) != len(y.outcomes):
            raise ValueError("conditional variances must align with the outcomes of Y")
    order = sorted(range(len(y.outcomes)), key=lambda i: y.outcomes[i])
    if family is UtilityFamily.CARA:
        absolute_ra = [theta for _ in order]
    else:
        if y.min_outcome <= 0:
            raise ValueError("CRRA requires positive outcomes")
        absolute_ra = [theta / y.outcomes[i] for i in order]
    product = [a * var[i] for a, i in zip(absolute_ra, order)]
    tol = 1e-12 * max(1.0, max(abs(p) for p in product))
    return all(later <= earlier + tol for earlier, later in zip(product, product[1:]))


def ce_difference_grid(
    family: UtilityFamily, x: Lottery, y: Lottery, grid_spec: GridSpec = DEFAULT_GRID
) -> tuple[np.ndarray, np.ndarray]:
    """(thetas, CE(Y) - CE(X)) on the grid. The index difference of a CE-based RUM."""
    thetas = grid_spec.thetas()
    return thetas, ce_grid(family, thetas, y) - ce_grid(family, thetas, x)


def is_nonmonotone(values: np.ndarray, slack: float) -> bool:
    """True when the sequence moves both up and down by more than ``slack``."""
    diffs = np.diff(values)
    return bool(np.any(diffs > slack) and np.any(diffs < -slack))
