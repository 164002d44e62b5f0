"""Finite lotteries and CARA/CRRA utility, expected utility and certainty equivalents.

All certainty-equivalent computations run in a shifted log domain so that
parameter values up to |theta| * max|x| ~ 1e4 neither overflow nor underflow.
A second-order series replaces the closed form near the removable parameter
singularities (alpha near 0 for CARA, gamma near 1 for CRRA).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable

import numpy as np

from .exceptions import SupportError

PROB_SUM_TOL = 1e-12
# Switch point between the closed form and the series expansion of the CE.
SERIES_EPS = 1e-8


class UtilityFamily(enum.Enum):
    """Constant absolute (CARA) or constant relative (CRRA) risk aversion."""

    CARA = "cara"
    CRRA = "crra"

    @classmethod
    def from_string(cls, name: str) -> "UtilityFamily":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ValueError(f"unknown utility family: {name!r} (expected 'cara' or 'crra')")


@dataclass(frozen=True)
class Lottery:
    """A finite lottery: monetary outcomes with strictly positive probabilities.

    Outcomes are kept in the order given; use :meth:`canonical` for a sorted,
    duplicate-merged view. Instances are immutable and hashable.
    """

    outcomes: tuple[float, ...]
    probabilities: tuple[float, ...]

    def __post_init__(self) -> None:
        outs = tuple(float(x) for x in self.outcomes)
        probs = tuple(float(p) for p in self.probabilities)
        object.__setattr__(self, "outcomes", outs)
        object.__setattr__(self, "probabilities", probs)
        if len(outs) == 0 or len(outs) != len(probs):
            raise ValueError("outcomes and probabilities must have equal, nonzero length")
        if any(not math.isfinite(x) for x in outs):
            raise ValueError("outcomes must be finite")
        if any(p <= 0.0 or not math.isfinite(p) for p in probs):
            raise ValueError("probabilities must be strictly positive and finite")
        if abs(math.fsum(probs) - 1.0) > PROB_SUM_TOL:
            raise ValueError(f"probabilities must sum to 1 within {PROB_SUM_TOL}")

    @classmethod
    def of(cls, pairs: Iterable[tuple[float, float]]) -> "Lottery":
        """Build from (outcome, probability) pairs."""
        outs, probs = zip(*pairs)
        return cls(tuple(outs), tuple(probs))

    @classmethod
    def degenerate(cls, x: float) -> "Lottery":
        return cls((float(x),), (1.0,))

    @classmethod
    def from_text(cls, text: str) -> "Lottery":
        """Parse the text form ``"x1:p1,x2:p2,..."`` (e.g. ``"3850:0.4,100:0.6"``)."""
        pairs = []
        for field in text.split(","):
            field = field.strip()
            if not field:
                continue
            try:
                x_str, p_str = field.split(":")
                pairs.append((float(x_str), float(p_str)))
            except ValueError:
                raise ValueError(f"bad lottery field {field!r}; expected 'outcome:probability'")
        if not pairs:
            raise ValueError("empty lottery text")
        return cls.of(pairs)

    def to_text(self) -> str:
        return ",".join(f"{x:g}:{p:g}" for x, p in zip(self.outcomes, self.probabilities))

    @cached_property
    def _sorted_view(self) -> tuple[tuple[float, ...], tuple[float, ...]]:
        order = sorted(range(len(self.outcomes)), key=lambda i: self.outcomes[i])
        return (tuple(self.outcomes[i] for i in order),
                tuple(self.probabilities[i] for i in order))

    @property
    def min_outcome(self) -> float:
        return self._sorted_view[0][0]

    @property
    def max_outcome(self) -> float:
        return self._sorted_view[0][-1]

    @property
    def span(self) -> float:
        return self.max_outcome - self.min_outcome

    @cached_property
    def expected_value(self) -> float:
        return math.fsum(p * x for x, p in zip(self.outcomes, self.probabilities))

    def shifted(self, c: float) -> "Lottery":
        """The lottery paying ``x + c`` wherever this one pays ``x``."""
        return Lottery(tuple(x + c for x in self.outcomes), self.probabilities)

    def scaled(self, k: float) -> "Lottery":
        if k <= 0:
            raise ValueError("scale factor must be positive")
        return Lottery(tuple(k * x for x in self.outcomes), self.probabilities)

    def canonical(self) -> "Lottery":
        """Sorted outcomes with duplicates merged (probabilities summed)."""
        merged: dict[float, float] = {}
        for x, p in zip(self.outcomes, self.probabilities):
            merged[x] = merged.get(x, 0.0) + p
        items = sorted(merged.items())
        return Lottery(tuple(x for x, _ in items), tuple(p for _, p in items))

    def is_degenerate(self) -> bool:
        return self.min_outcome == self.max_outcome


def outcome_span(*lotteries: Lottery) -> float:
    """Span of the union of outcomes across the given lotteries."""
    lo = min(lot.min_outcome for lot in lotteries)
    hi = max(lot.max_outcome for lot in lotteries)
    return hi - lo


def _require_support(family: UtilityFamily, lottery: Lottery) -> None:
    if family is UtilityFamily.CRRA and lottery.min_outcome <= 0.0:
        raise SupportError("CRRA utility requires all outcomes to be strictly positive")


def utility(family: UtilityFamily, theta: float, x: float) -> float:
    """Utility u_theta(x) with the exact branches at alpha=0 and gamma=1."""
    if not math.isfinite(theta):
        raise ValueError("utility requires a finite parameter")
    if family is UtilityFamily.CARA:
        if theta == 0.0:
            return x
        return -math.exp(-theta * x) / theta
    if x <= 0.0:
        raise SupportError("CRRA utility requires x > 0")
    if theta == 1.0:
        return math.log(x)
    b = 1.0 - theta
    return math.exp(b * math.log(x)) / b


def expected_utility(family: UtilityFamily, theta: float, lottery: Lottery) -> float:
    """Sum p_i u_theta(x_i), evaluated in a shifted log domain.

    The shift keeps the result finite whenever it is representable in double
    precision; values whose true magnitude exceeds the float range still
    saturate to +/-inf (only reachable for CARA with theta < 0 and huge stakes).
    """
    if not math.isfinite(theta):
        raise ValueError("expected_utility requires a finite parameter")
    _require_support(family, lottery)
    xs, ps = lottery.outcomes, lottery.probabilities
    if family is UtilityFamily.CARA:
        if theta == 0.0:
            return lottery.expected_value
        m = lottery.min_outcome if theta > 0 else lottery.max_outcome
        s = math.fsum(p * math.exp(-theta * (x - m)) for x, p in zip(xs, ps))
        return -math.exp(-theta * m + math.log(s)) / theta
    if theta == 1.0:
        return math.fsum(p * math.log(x) for x, p in zip(xs, ps))
    b = 1.0 - theta
    zs = [b * math.log(x) for x in xs]
    m = max(zs)
    s = math.fsum(p * math.exp(z - m) for z, p in zip(zs, ps))
    return math.exp(m + math.log(s)) / b


def _moments(values: list[float], probs: tuple[float, ...]) -> tuple[float, float, float]:
    mu = math.fsum(p * v for v, p in zip(values, probs))
    var = math.fsum(p * (v - mu) ** 2 for v, p in zip(values, probs))
    m3 = math.fsum(p * (v - mu) ** 3 for v, p in zip(values, probs))
    return mu, var, m3


def _ce_cara_scalar(alpha: float, xs: tuple[float, ...], ps: tuple[float, ...]) -> float:
    if alpha == 0.0:
        return math.fsum(p * x for x, p in zip(xs, ps))
    if abs(alpha) < SERIES_EPS:
        mu, var, m3 = _moments(list(xs), ps)
        return mu - 0.5 * alpha * var + alpha * alpha * m3 / 6.0
    m = min(xs) if alpha > 0 else max(xs)
    # expm1/log1p keeps full precision both near alpha=0 and deep in the tails
    s = math.fsum(p * math.expm1(-alpha * (x - m)) for x, p in zip(xs, ps))
    return m - math.log1p(s) / alpha


def _ce_crra_scalar(gamma: float, xs: tuple[float, ...], ps: tuple[float, ...]) -> float:
    lx = [math.log(x) for x in xs]
    if gamma == 1.0:
        return math.exp(math.fsum(p * z for z, p in zip(lx, ps)))
    b = 1.0 - gamma
    if abs(gamma - 1.0) < SERIES_EPS:
        mu, var, m3 = _moments(lx, ps)
        return math.exp(mu + 0.5 * b * var + b * b * m3 / 6.0)
    m = max(b * z for z in lx)
    s = math.fsum(p * math.exp(b * z - m) for z, p in zip(lx, ps))
    return math.exp((m + math.log(s)) / b)


def certainty_equivalent(family: UtilityFamily, theta: float, lottery: Lottery) -> float:
    """CE_theta(L): the sure amount with the same utility as the lottery.

    ``theta`` may be ``math.inf``, the infinitely risk-averse limit whose CE is
    the worst outcome. CE_0 equals the mean for both families.
    """
    if math.isnan(theta) or theta == -math.inf:
        raise ValueError("theta must be finite or +inf")
    _require_support(family, lottery)
    if theta == math.inf:
        return lottery.min_outcome
    xs, ps = lottery.outcomes, lottery.probabilities
    if family is UtilityFamily.CARA:
        return _ce_cara_scalar(theta, xs, ps)
    return _ce_crra_scalar(theta, xs, ps)


# ---------------------------------------------------------------------------
# Vectorized kernels over arrays of theta. Used by grid scans and estimation.
# ---------------------------------------------------------------------------

def ce_grid(family: UtilityFamily, thetas: np.ndarray, lottery: Lottery) -> np.ndarray:
    """Certainty equivalents at every (finite) theta in ``thetas``."""
    _require_support(family, lottery)
    thetas = np.asarray(thetas, dtype=float)
    xs = np.asarray(lottery.outcomes)
    ps = np.asarray(lottery.probabilities)
    if family is UtilityFamily.CARA:
        return _ce_cara_grid(thetas, xs, ps)
    return _ce_crra_grid(thetas, xs, ps)


def _ce_cara_grid(alphas: np.ndarray, xs: np.ndarray, ps: np.ndarray) -> np.ndarray:
    alphas = np.atleast_1d(alphas)
    a = alphas[:, None]
    m = np.where(alphas >= 0, xs.min(), xs.max())
    with np.errstate(over="ignore"):
        s = np.sum(ps * np.expm1(-a * (xs - m[:, None])), axis=1)
    denom = np.where(alphas == 0.0, 1.0, alphas)
    out = m - np.log1p(s) / denom
    small = np.abs(alphas) < SERIES_EPS
    if np.any(small):
        mu = float(np.sum(ps * xs))
        var = float(np.sum(ps * (xs - mu) ** 2))
        m3 = float(np.sum(ps * (xs - mu) ** 3))
        asm = alphas[small]
        out[small] = mu - 0.5 * asm * var + asm * asm * m3 / 6.0
    return out


def _ce_crra_grid(gammas: np.ndarray, xs: np.ndarray, ps: np.ndarray) -> np.ndarray:
    gammas = np.atleast_1d(gammas)
    lx = np.log(xs)
    b = 1.0 - gammas
    z = b[:, None] * lx
    m = z.max(axis=1)
    s = np.sum(ps * np.exp(z - m[:, None]), axis=1)
    bb = np.where(b == 0.0, 1.0, b)
    out = np.exp((m + np.log(s)) / bb)
    small = np.abs(gammas - 1.0) < SERIES_EPS
    if np.any(small):
        mu = float(np.sum(ps * lx))
        var = float(np.sum(ps * (lx - mu) ** 2))
        m3 = float(np.sum(ps * (lx - mu) ** 3))
        bs = b[small]
        out[small] = np.exp(mu + 0.5 * bs * var + bs * bs * m3 / 6.0)
    return out
