"""Maximum-likelihood estimation of stochastic choice models on choice datasets.

Fitting follows a two-stage scheme: a seeded population-based global search
(differential evolution) able to escape multimodal likelihoods, then
quasi-Newton refinement with central-difference gradients. lambda and kappa
are optimized on unconstrained transformed coordinates (log / logit); the
risk parameter is searched on the box [-20, 20] and flagged when an estimate
lands on the edge.

Three specifications are supported: pooled (one parameter triple for
everyone), heteroskedastic (a triple per subject, solved independently) and
homoskedastic (shared lambda and kappa in an outer search, per-subject risk
parameters by warm-started univariate quasi-Newton inner steps).
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import differential_evolution, minimize
from scipy.special import expit

from .data import Battery, ChoiceDataset, Response
from .exceptions import OrientationError
from .lotteries import Lottery, UtilityFamily, SERIES_EPS
from .models import ModelKind, ModelParams
from .premium import DEFAULT_GRID, GridSpec, cached_premium_curve, compensating_premium
from .ordering import indifference_threshold

PROB_FLOOR = 1e-300
GAMMA_BOX = (-20.0, 20.0)
EDGE_TOL = 1e-6


class Scheme(enum.Enum):
    POOLED = "pooled"
    HOMOSKEDASTIC = "homo"
    HETEROSKEDASTIC = "hetero"

    @classmethod
    def from_string(cls, name: str) -> "Scheme":
        aliases = {"pooled": cls.POOLED, "homo": cls.HOMOSKEDASTIC,
                   "homoskedastic": cls.HOMOSKEDASTIC, "hetero": cls.HETEROSKEDASTIC,
                   "heteroskedastic": cls.HETEROSKEDASTIC}
        try:
            return aliases[name.strip().lower()]
        except KeyError:
            raise ValueError(f"unknown scheme {name!r}")


@dataclass(frozen=True)
class OptimizerSettings:
    """Global-stage population and generations, refinement tolerance, seed."""

    population: int = 50
    generations: int = 100
    outer_population: int = 16
    outer_generations: int = 30
    refine_tol: float = 1e-6
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self) -> None:
        if min(self.population, self.generations, self.outer_population,
               self.outer_generations) < 1 or self.refine_tol <= 0:
            raise ValueError("optimizer settings must be positive")


@dataclass(frozen=True)
class EstimationSpec:
    model: ModelKind
    family: UtilityFamily = UtilityFamily.CRRA
    scheme: Scheme = Scheme.POOLED
    optimizer: OptimizerSettings = OptimizerSettings()
    grid: GridSpec = DEFAULT_GRID
    exact_premium: bool = False  # bypass curve interpolation inside likelihoods


@dataclass(frozen=True)
class HomoskedasticParams:
    """Per-subject risk parameters with shared precision and tremble."""

    gammas: tuple[float, ...]
    lam: float
    kappa: float


@dataclass(frozen=True)
class SubjectFit:
    subject_id: str
    gamma: float
    lam: float
    kappa: float
    loglik: float
    flag: str = ""


@dataclass(frozen=True)
class FitResult:
    model: ModelKind
    family: UtilityFamily
    scheme: Scheme
    subjects: tuple[SubjectFit, ...]
    log_likelihood: float
    pooled: ModelParams | None = None
    shared_lam: float | None = None
    shared_kappa: float | None = None
    diagnostics: tuple[tuple[str, float], ...] = ()

    def subject(self, subject_id: str) -> SubjectFit:
        for s in self.subjects:
            if s.subject_id == subject_id:
                return s
        raise KeyError(subject_id)


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    scheme: Scheme
    n_reps: int
    n_failed: int
    se_gamma: float | None
    se_lam: float
    se_kappa: float
    estimates: np.ndarray = field(repr=False)  # (n_ok, 3 or 2)


def transform_params(lam: float, kappa: float) -> tuple[float, float]:
    """(lambda, kappa) -> unconstrained (log lambda, logit kappa)."""
    if not lam > 0:
        raise ValueError("lambda must be positive to transform")
    k = min(max(kappa, 1e-12), 1.0 - 1e-12)
    return math.log(lam), math.log(k / (1.0 - k))


def untransform_params(lam_t: float, kappa_t: float) -> tuple[float, float]:
    return math.exp(lam_t), float(expit(kappa_t))


# ---------------------------------------------------------------------------
# Row-level dataset representation and model evaluator
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class _Rows:
    subj: np.ndarray
    pair: np.ndarray
    wx: np.ndarray
    wy: np.ndarray
    n_subjects: int
    subject_ids: tuple[str, ...]

    @classmethod
    def from_dataset(cls, dataset: ChoiceDataset) -> "_Rows":
        battery = dataset.battery
        index = {p.pair_id: i for i, p in enumerate(battery.pairs)}
        subj, pair, wx, wy = [], [], [], []
        for si, subject in enumerate(dataset.subjects):
            for pid, resp in zip(subject.pair_ids, subject.responses):
                subj.append(si)
                pair.append(index[pid])
                if resp is Response.X:
                    wx.append(1.0); wy.append(0.0)
                elif resp is Response.Y:
                    wx.append(0.0); wy.append(1.0)
                else:  # indifference counts half to each side
                    wx.append(0.5); wy.append(0.5)
        return cls(np.asarray(subj), np.asarray(pair), np.asarray(wx), np.asarray(wy),
                   len(dataset.subjects), tuple(s.subject_id for s in dataset.subjects))

    def for_subject(self, si: int) -> "_Rows":
        mask = self.subj == si
        return _Rows(np.zeros(int(mask.sum()), dtype=self.subj.dtype), self.pair[mask],
                     self.wx[mask], self.wy[mask], 1, (self.subject_ids[si],))

    def resampled(self, sample: np.ndarray) -> "_Rows":
        by_subject = [np.nonzero(self.subj == s)[0] for s in range(self.n_subjects)]
        subj, pair, wx, wy = [], [], [], []
        for new_idx, orig in enumerate(sample):
            rows = by_subject[orig]
            subj.append(np.full(len(rows), new_idx))
            pair.append(self.pair[rows])
            wx.append(self.wx[rows])
            wy.append(self.wy[rows])
        return _Rows(np.concatenate(subj), np.concatenate(pair),
                     np.concatenate(wx), np.concatenate(wy),
                     len(sample), tuple(f"r{j}" for j in range(len(sample))))


def _pad_stack(lotteries: Sequence[Lottery], width: int) -> tuple[np.ndarray, np.ndarray]:
    outs = np.zeros((len(lotteries), width))
    logp = np.full((len(lotteries), width), -np.inf)
    for i, lot in enumerate(lotteries):
        k = len(lot.outcomes)
        outs[i, :k] = lot.outcomes
        logp[i, :k] = np.log(lot.probabilities)
    return outs, logp


class _Evaluator:
    """Vectorized row-level choice probabilities for one model/battery/grid."""

    def __init__(self, kind: ModelKind, family: UtilityFamily, battery: Battery,
                 grid_spec: GridSpec = DEFAULT_GRID, exact_premium: bool = False):
        self.kind = kind
        self.family = family
        self.battery = battery
        self.grid_spec = grid_spec
        self.exact_premium = exact_premium
        xs = [p.x for p in battery.pairs]
        ys = [p.y for p in battery.pairs]
        if family is UtilityFamily.CRRA and min(min(l.min_outcome for l in xs),
                                                min(l.min_outcome for l in ys)) <= 0:
            raise ValueError("CRRA requires strictly positive outcomes in every pair")
        width = max(max(len(l.outcomes) for l in xs), max(len(l.outcomes) for l in ys))
        self.xo_x, self.lp_x = _pad_stack(xs, width)
        self.xo_y, self.lp_y = _pad_stack(ys, width)
        with np.errstate(divide="ignore"):
            self.lx_x = np.where(np.isfinite(self.lp_x), np.log(np.maximum(self.xo_x, 1e-300)), 0.0)
            self.lx_y = np.where(np.isfinite(self.lp_y), np.log(np.maximum(self.xo_y, 1e-300)), 0.0)
        self.mean_x = np.array([l.expected_value for l in xs])
        self.mean_y = np.array([l.expected_value for l in ys])
        self.min_x = np.array([l.min_outcome for l in xs])
        self.max_x = np.array([l.max_outcome for l in xs])
        self.min_y = np.array([l.min_outcome for l in ys])
        self.max_y = np.array([l.max_outcome for l in ys])
        self.gmin = np.minimum(self.min_x, self.min_y)
        self.gmax = np.maximum(self.max_x, self.max_y)
        self._log_moments_x = self._log_moments(xs)
        self._log_moments_y = self._log_moments(ys)

        if kind in (ModelKind.PI_RUM, ModelKind.CUM_PI_RUM) and not exact_premium:
            curves = [cached_premium_curve(family, p.x, p.y, grid_spec) for p in battery.pairs]
            self.grid = curves[0].grid
            self.curve_val = np.vstack([c.values for c in curves])
            self.curve_slo = np.vstack([c.slopes for c in curves])
        if kind is ModelKind.RPM:
            self._init_rpm()

    def _log_moments(self, lots: Sequence[Lottery]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self.family is not UtilityFamily.CRRA:
            lots_vals = [(np.asarray(l.outcomes), np.asarray(l.probabilities)) for l in lots]
        else:
            lots_vals = [(np.log(np.asarray(l.outcomes)), np.asarray(l.probabilities)) for l in lots]
        mu = np.array([float(np.sum(p * v)) for v, p in lots_vals])
        var = np.array([float(np.sum(p * (v - m) ** 2)) for (v, p), m in zip(lots_vals, mu)])
        m3 = np.array([float(np.sum(p * (v - m) ** 3)) for (v, p), m in zip(lots_vals, mu)])
        return mu, var, m3

    def _init_rpm(self) -> None:
        thresh = np.full(len(self.battery.pairs), np.nan)
        base = np.full(len(self.battery.pairs), np.nan)
        for i, pair in enumerate(self.battery.pairs):
            t = pair.threshold
            if t is None and pair.x.is_degenerate() and pair.y.is_degenerate():
                pass  # battery dominance pair, handled below
            elif t is None:
                t = indifference_threshold(self.family, pair.x, pair.y,
                                           (self.grid_spec.start, self.grid_spec.stop))
            if t is None:
                mid = np.array([0.5 * (self.grid_spec.start + self.grid_spec.stop)])
                idx = np.array([i])
                x_pref = self._ce_rows(mid, idx, "x")[0] >= self._ce_rows(mid, idx, "y")[0]
                base[i] = 1.0 if x_pref else 0.0
            else:
                probe = 0.5 * (self.grid_spec.start + t)
                s = self._ce_rows(np.array([probe]), np.array([i]), "x") \
                    - self._ce_rows(np.array([probe]), np.array([i]), "y")
                if s[0] < 0:
                    raise OrientationError(
                        f"pair {pair.pair_id}: X preferred above the threshold; the "
                        "parameter-shock model expects the opposite orientation")
                thresh[i] = t
        self.rpm_threshold = thresh
        self.rpm_base = base

    # -- per-row kernels ---------------------------------------------------

    def _ce_rows(self, g: np.ndarray, pair: np.ndarray, side: str) -> np.ndarray:
        lp = (self.lp_x if side == "x" else self.lp_y)[pair]
        if self.family is UtilityFamily.CRRA:
            lx = (self.lx_x if side == "x" else self.lx_y)[pair]
            b = 1.0 - g
            z = b[:, None] * lx + lp
            m = z.max(axis=1)
            ls = m + np.log(np.exp(z - m[:, None]).sum(axis=1))
            bb = np.where(b == 0.0, 1.0, b)
            out = np.exp(ls / bb)
            small = np.abs(b) < SERIES_EPS
        else:
            xo = (self.xo_x if side == "x" else self.xo_y)[pair]
            mn = (self.min_x if side == "x" else self.min_y)[pair]
            mx = (self.max_x if side == "x" else self.max_y)[pair]
            shift = np.where(g >= 0, mn, mx)
            z = -g[:, None] * (xo - shift[:, None]) + lp
            m = z.max(axis=1)
            ls = m + np.log(np.exp(z - m[:, None]).sum(axis=1))
            gg = np.where(g == 0.0, 1.0, g)
            out = shift - ls / gg
            small = np.abs(g) < SERIES_EPS
        if np.any(small):
            mu, var, m3 = self._log_moments_x if side == "x" else self._log_moments_y
            mu, var, m3 = mu[pair][small], var[pair][small], m3[pair][small]
            if self.family is UtilityFamily.CRRA:
                bs = (1.0 - g)[small]
                out[small] = np.exp(mu + 0.5 * bs * var + bs * bs * m3 / 6.0)
            else:
                gs = g[small]
                out[small] = mu - 0.5 * gs * var + gs * gs * m3 / 6.0
        return out

    def _eu_diff_rows(self, g: np.ndarray, pair: np.ndarray) -> np.ndarray:
        """EU(Y) - EU(X) per row, computed from one stable scaled difference."""
        lp_x, lp_y = self.lp_x[pair], self.lp_y[pair]
        if self.family is UtilityFamily.CRRA:
            b = 1.0 - g
            zx = b[:, None] * self.lx_x[pair] + lp_x
            zy = b[:, None] * self.lx_y[pair] + lp_y
            m = np.maximum(zx.max(axis=1), zy.max(axis=1))
            diff = (np.exp(zy - m[:, None]).sum(axis=1)
                    - np.exp(zx - m[:, None]).sum(axis=1))
            bb = np.where(b == 0.0, 1.0, b)
            with np.errstate(over="ignore"):
                scale = np.exp(np.where(diff == 0.0, 0.0, m))
                out = scale * diff / bb
            zero = b == 0.0
            if np.any(zero):
                out[zero] = (self._log_moments_y[0][pair] - self._log_moments_x[0][pair])[zero]
            return out
        shift = np.where(g >= 0, self.gmin[pair], self.gmax[pair])
        zx = -g[:, None] * (self.xo_x[pair] - shift[:, None]) + lp_x
        zy = -g[:, None] * (self.xo_y[pair] - shift[:, None]) + lp_y
        m = np.maximum(zx.max(axis=1), zy.max(axis=1))
        diff = np.exp(zy - m[:, None]).sum(axis=1) - np.exp(zx - m[:, None]).sum(axis=1)
        gg = np.where(g == 0.0, 1.0, g)
        with np.errstate(over="ignore"):
            scale = np.exp(np.where(diff == 0.0, 0.0, -g * shift + m))
            out = -scale * diff / gg
        zero = g == 0.0
        if np.any(zero):
            out[zero] = (self.mean_y - self.mean_x)[pair][zero]
        return out

    def _coneu_diff_rows(self, g: np.ndarray, pair: np.ndarray) -> np.ndarray:
        """EU difference rescaled by the utility span of the pair's extremes."""
        zmin, zmax = self.gmin[pair], self.gmax[pair]
        lp_x, lp_y = self.lp_x[pair], self.lp_y[pair]
        if self.family is UtilityFamily.CRRA:
            b = 1.0 - g
            lzmin, lzmax = np.log(zmin), np.log(zmax)
            anchor = np.where(b >= 0, lzmax, lzmin)
            ex = np.where(np.isfinite(lp_x), np.exp(lp_x), 0.0)
            ey = np.where(np.isfinite(lp_y), np.exp(lp_y), 0.0)
            num = (ey * np.expm1(b[:, None] * (self.lx_y[pair] - anchor[:, None]))).sum(axis=1) \
                - (ex * np.expm1(b[:, None] * (self.lx_x[pair] - anchor[:, None]))).sum(axis=1)
            # (zmax^b - zmin^b) / e^{b*anchor}; anchoring keeps every exponent <= 0
            den = np.where(b >= 0,
                           -np.expm1(b * (lzmin - lzmax)),
                           np.expm1(b * (lzmax - lzmin)))
            tiny = np.abs(b) < 1e-13
            out = np.where(tiny, 1.0, num) / np.where(tiny, 1.0, den)
            if np.any(tiny):
                mu_y, mu_x = self._log_moments_y[0][pair], self._log_moments_x[0][pair]
                out[tiny] = ((mu_y - mu_x) / (lzmax - lzmin))[tiny]
            return out
        anchor = np.where(g >= 0, zmin, zmax)
        ex = np.where(np.isfinite(lp_x), np.exp(lp_x), 0.0)
        ey = np.where(np.isfinite(lp_y), np.exp(lp_y), 0.0)
        num = (ex * np.expm1(-g[:, None] * (self.xo_x[pair] - anchor[:, None]))).sum(axis=1) \
            - (ey * np.expm1(-g[:, None] * (self.xo_y[pair] - anchor[:, None]))).sum(axis=1)
        # (e^{-g*zmin} - e^{-g*zmax}) / e^{-g*anchor}
        den = np.where(g >= 0,
                       -np.expm1(-g * (zmax - zmin)),
                       np.expm1(-g * (zmin - zmax)))
        tiny = np.abs(g) < 1e-13
        out = np.where(tiny, 1.0, num) / np.where(tiny, 1.0, den)
        if np.any(tiny):
            out[tiny] = ((self.mean_y - self.mean_x)[pair] / (zmax - zmin))[tiny]
        return out

    def _interp_rows(self, g: np.ndarray, pair: np.ndarray) -> np.ndarray:
        grid = self.grid
        t = np.clip(g, grid[0], grid[-1])
        k = np.clip(np.searchsorted(grid, t, side="right") - 1, 0, len(grid) - 2)
        h = grid[k + 1] - grid[k]
        u = (t - grid[k]) / h
        y0 = self.curve_val[pair, k]
        y1 = self.curve_val[pair, k + 1]
        d0 = self.curve_slo[pair, k]
        d1 = self.curve_slo[pair, k + 1]
        u2 = u * u
        u3 = u2 * u
        return (y0 * (2 * u3 - 3 * u2 + 1) + h * d0 * (u3 - 2 * u2 + u)
                + y1 * (-2 * u3 + 3 * u2) + h * d1 * (u3 - u2))

    def _signed_diff(self, g: np.ndarray, pair: np.ndarray) -> np.ndarray:
        """s with P(choose X) = expit(-lambda * s); the index difference V_Y - V_X."""
        if self.kind is ModelKind.EU_RUM:
            return self._eu_diff_rows(g, pair)
        if self.kind is ModelKind.CE_RUM:
            return self._ce_rows(g, pair, "y") - self._ce_rows(g, pair, "x")
        if self.kind is ModelKind.CON_EU:
            return self._coneu_diff_rows(g, pair)
        if self.kind in (ModelKind.PI_RUM, ModelKind.CUM_PI_RUM):
            if self.exact_premium:
                out = np.empty(len(g))
                for i, (gv, pi) in enumerate(zip(g, pair)):
                    bp = self.battery.pairs[int(pi)]
                    out[i] = compensating_premium(self.family, float(gv), bp.x, bp.y)
                return out
            return self._interp_rows(g, pair)
        assert self.kind is ModelKind.RPM
        return g - self.rpm_threshold[pair]

    def prob_x(self, g: np.ndarray, lam: np.ndarray, pair: np.ndarray) -> np.ndarray:
        s = self._signed_diff(g, pair)
        with np.errstate(over="ignore", invalid="ignore"):
            p = expit(-lam * s)
        if self.kind is ModelKind.RPM:
            dom = np.isnan(self.rpm_threshold[pair])
            if np.any(dom):
                p = np.where(dom, self.rpm_base[pair], p)
        return p

    def lambda_scale(self) -> float:
        """1 / median absolute index difference at a mid-range theta; optimizer scaling."""
        n = len(self.battery.pairs)
        pair = np.arange(n)
        if self.family is UtilityFamily.CRRA:
            probe = np.full(n, 0.5)
        else:
            span = float(self.gmax.max() - self.gmin.min())
            probe = np.full(n, 0.5 / max(span, 1.0))
        s = np.abs(self._signed_diff(probe, pair))
        if self.kind is ModelKind.RPM:
            s = s[~np.isnan(self.rpm_threshold)]
        s = s[np.isfinite(s) & (s > 0)]
        if len(s) == 0:
            return 1.0
        return float(1.0 / np.median(s))


def _per_subject_ll(ev: _Evaluator, rows: _Rows, gam: np.ndarray,
                    lam: np.ndarray, kap: np.ndarray) -> np.ndarray:
    g = gam[rows.subj]
    l = lam[rows.subj]
    k = kap[rows.subj]
    p = ev.prob_x(g, l, rows.pair)
    pt = (1.0 - k) * p + k * (1.0 - p)
    ll = rows.wx * np.log(np.maximum(pt, PROB_FLOOR)) \
        + rows.wy * np.log(np.maximum(1.0 - pt, PROB_FLOOR))
    return np.bincount(rows.subj, weights=ll, minlength=rows.n_subjects)


def _total_ll_scalar(ev: _Evaluator, rows: _Rows, gamma: float, lam: float, kappa: float) -> float:
    n = len(rows.subj)
    g = np.broadcast_to(np.float64(gamma), n)
    p = ev.prob_x(g, np.float64(lam), rows.pair)
    pt = (1.0 - kappa) * p + kappa * (1.0 - p)
    ll = rows.wx * np.log(np.maximum(pt, PROB_FLOOR)) \
        + rows.wy * np.log(np.maximum(1.0 - pt, PROB_FLOOR))
    return float(ll.sum())


# ---------------------------------------------------------------------------
# Public likelihood
# ---------------------------------------------------------------------------

def _prepare(spec: EstimationSpec, dataset: ChoiceDataset) -> tuple[_Rows, _Evaluator]:
    rows = _Rows.from_dataset(dataset)
    ev = _Evaluator(spec.model, spec.family, dataset.battery, spec.grid, spec.exact_premium)
    return rows, ev


def log_likelihood(spec: EstimationSpec, dataset: ChoiceDataset, params) -> float:
    """The estimation objective: sum over subjects and pairs of
    (D_X + D_I/2) log p + (D_Y + D_I/2) log(1 - p), with tremble-mixed p
    floored at 1e-300.

    ``params`` must match the scheme: a single :class:`ModelParams` for
    POOLED, a sequence of them (one per subject) for HETEROSKEDASTIC, or a
    :class:`HomoskedasticParams` for HOMOSKEDASTIC.
    """
    rows, ev = _prepare(spec, dataset)
    S = rows.n_subjects
    if spec.scheme is Scheme.POOLED:
        if not isinstance(params, ModelParams):
            raise ValueError("pooled scheme takes a single ModelParams")
        return _total_ll_scalar(ev, rows, params.theta, params.lam, params.kappa)
    if spec.scheme is Scheme.HOMOSKEDASTIC:
        if not isinstance(params, HomoskedasticParams):
            raise ValueError("homoskedastic scheme takes HomoskedasticParams")
        if len(params.gammas) != S:
            raise ValueError(f"expected {S} gammas, got {len(params.gammas)}")
        gam = np.asarray(params.gammas, dtype=float)
        lam = np.full(S, params.lam)
        kap = np.full(S, params.kappa)
        return float(_per_subject_ll(ev, rows, gam, lam, kap).sum())
    if isinstance(params, (ModelParams, HomoskedasticParams)) or len(params) != S:
        raise ValueError(f"heteroskedastic scheme takes one ModelParams per subject ({S})")
    gam = np.array([p.theta for p in params])
    lam = np.array([p.lam for p in params])
    kap = np.array([p.kappa for p in params])
    return float(_per_subject_ll(ev, rows, gam, lam, kap).sum())


# ---------------------------------------------------------------------------
# Optimization machinery
# ---------------------------------------------------------------------------

def _central_grad(fun, x: np.ndarray, rel: float = 1e-6) -> np.ndarray:
    g = np.empty_like(x)
    for i in range(len(x)):
        h = rel * (1.0 + abs(x[i]))
        xp = x.copy(); xp[i] += h
        xm = x.copy(); xm[i] -= h
        g[i] = (fun(xp) - fun(xm)) / (2.0 * h)
    return g


def _projected_grad_norm(grad: np.ndarray, x: np.ndarray, bounds) -> float:
    proj = grad.copy()
    for i, (lo, hi) in enumerate(bounds):
        if x[i] <= lo + EDGE_TOL and grad[i] > 0:
            proj[i] = 0.0
        if x[i] >= hi - EDGE_TOL and grad[i] < 0:
            proj[i] = 0.0
    return float(np.max(np.abs(proj)))


def _two_stage_minimize(fun, bounds, population: int, generations: int,
                        refine_tol: float, seed_seq: np.random.SeedSequence,
                        extra_points: Sequence[np.ndarray] = ()) -> tuple[np.ndarray, float, dict]:
    rng = np.random.default_rng(seed_seq)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    pop_n = max(population, 5)
    pop = lo + (hi - lo) * rng.random((pop_n, len(bounds)))
    for j, pt in enumerate(extra_points[: pop_n]):
        pop[j] = np.clip(pt, lo, hi)
    de = differential_evolution(fun, bounds, init=pop, maxiter=generations,
                                seed=rng, polish=False, tol=0.01)
    res = minimize(fun, de.x, method="L-BFGS-B", bounds=bounds,
                   jac=lambda z: _central_grad(fun, z),
                   options={"maxiter": 400, "ftol": 1e-14, "gtol": refine_tol / 10.0})
    if res.fun <= de.fun:
        x, f = np.asarray(res.x), float(res.fun)
    else:
        x, f = np.asarray(de.x), float(de.fun)
    gnorm = _projected_grad_norm(_central_grad(fun, x), x, bounds)
    diag = {"de_nfev": float(de.nfev), "refine_nfev": float(res.nfev),
            "grad_inf_norm": gnorm, "converged": float(gnorm < refine_tol)}
    return x, f, diag


def _triple_bounds(lam_scale: float) -> list[tuple[float, float]]:
    lt0 = math.log(lam_scale)
    return [GAMMA_BOX, (lt0 - 9.0, lt0 + 9.0), (-9.0, 9.0)]


def _start_points(lam_scale: float) -> list[np.ndarray]:
    lt0 = math.log(lam_scale)
    kt = transform_params(1.0, 0.05)[1]
    return [np.array([0.5, lt0, kt]), np.array([0.0, lt0 + 1.0, kt]),
            np.array([1.0, lt0 - 1.0, kt])]


def _edge_flag(gamma: float) -> str:
    return "edge" if min(gamma - GAMMA_BOX[0], GAMMA_BOX[1] - gamma) <= EDGE_TOL else ""


def _fit_pooled_rows(ev: _Evaluator, rows: _Rows, settings: OptimizerSettings,
                     seed_seq: np.random.SeedSequence):
    lam_scale = ev.lambda_scale()
    n = max(len(rows.subj), 1)  # per-choice scaling keeps gradients well conditioned

    def neg(u: np.ndarray) -> float:
        lam, kap = untransform_params(u[1], u[2])
        return -_total_ll_scalar(ev, rows, float(u[0]), lam, kap) / n

    x, f, diag = _two_stage_minimize(neg, _triple_bounds(lam_scale), settings.population,
                                     settings.generations, settings.refine_tol, seed_seq,
                                     extra_points=_start_points(lam_scale))
    lam, kap = untransform_params(x[1], x[2])
    return ModelParams(float(x[0]), lam, kap), -f * n, diag


def _fit_one_subject(args) -> SubjectFit:
    ev, rows, si, settings, seed_seq = args
    sub = rows.for_subject(si)
    params, ll, diag = _fit_pooled_rows(ev, sub, settings, seed_seq)
    return SubjectFit(rows.subject_ids[si], params.theta, params.lam, params.kappa,
                      ll, _edge_flag(params.theta))


def _newton_refine_gammas(f_per_subject, gam0: np.ndarray, iters: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized safeguarded quasi-Newton loop on [-20, 20], one gamma per subject.

    Derivatives come from a central stencil wide enough that the second
    difference is above the roundoff floor of the log-likelihood; a
    per-subject trust radius shrinks whenever a step fails to improve.
    """
    g = gam0.copy().astype(float)
    fg = f_per_subject(g)
    radius = np.full_like(g, 0.5)
    for _ in range(iters):
        h = 1e-3 * (1.0 + 0.1 * np.abs(g))
        fp = f_per_subject(np.clip(g + h, *GAMMA_BOX))
        fm = f_per_subject(np.clip(g - h, *GAMMA_BOX))
        d1 = (fp - fm) / (2.0 * h)
        d2 = (fp - 2.0 * fg + fm) / (h * h)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = -d1 / d2
        step = np.where((d2 < -1e-9) & np.isfinite(newton), newton,
                        np.sign(d1) * radius)
        step = np.clip(step, -radius, radius)
        trial = np.clip(g + step, *GAMMA_BOX)
        ft = f_per_subject(trial)
        accept = ft >= fg
        g = np.where(accept, trial, g)
        fg = np.where(accept, ft, fg)
        radius = np.where(accept, np.minimum(2.0 * radius, 1.0), 0.25 * radius)
        if bool((np.abs(step) < 1e-7).all()):
            break
    return g, fg


def fit(spec: EstimationSpec, dataset: ChoiceDataset) -> FitResult:
    """Maximum-likelihood fit under the spec's scheme. Deterministic given the seed."""
    rows, ev = _prepare(spec, dataset)
    return _fit_rows(spec, ev, rows)


def _fit_rows(spec: EstimationSpec, ev: _Evaluator, rows: _Rows) -> FitResult:
    settings = spec.optimizer
    root = np.random.SeedSequence(settings.seed)
    if spec.scheme is Scheme.POOLED:
        params, ll, diag = _fit_pooled_rows(ev, rows, settings, root)
        flag = _edge_flag(params.theta)
        diag_t = tuple(sorted(diag.items())) + (("edge", 1.0 if flag else 0.0),)
        return FitResult(spec.model, spec.family, spec.scheme, (), ll,
                         pooled=params, diagnostics=diag_t)

    if spec.scheme is Scheme.HETEROSKEDASTIC:
        seeds = root.spawn(rows.n_subjects)
        tasks = [(ev, rows, si, settings, seeds[si]) for si in range(rows.n_subjects)]
        if settings.n_jobs != 1 and rows.n_subjects > 1:
            chunks = np.array_split(np.arange(rows.n_subjects), max(settings.n_jobs, 1))
            with ProcessPoolExecutor(max_workers=settings.n_jobs) as pool:
                parts = list(pool.map(_fit_subject_chunk,
                                      [[tasks[i] for i in chunk] for chunk in chunks]))
            subjects = tuple(s for part in parts for s in part)
        else:
            subjects = tuple(_fit_one_subject(t) for t in tasks)
        total = float(sum(s.loglik for s in subjects))
        diag_t = (("n_edge", float(sum(1 for s in subjects if s.flag == "edge"))),)
        return FitResult(spec.model, spec.family, spec.scheme, subjects, total,
                         diagnostics=diag_t)

    assert spec.scheme is Scheme.HOMOSKEDASTIC
    return _fit_homo(spec, ev, rows, settings, root)


def _fit_subject_chunk(tasks) -> list[SubjectFit]:
    return [_fit_one_subject(t) for t in tasks]


def _fit_homo(spec: EstimationSpec, ev: _Evaluator, rows: _Rows,
              settings: OptimizerSettings, root: np.random.SeedSequence) -> FitResult:
    S = rows.n_subjects
    lam_scale = ev.lambda_scale()
    lt0 = math.log(lam_scale)
    # the coarse rescan per evaluation keeps the outer objective honest when a
    # new (lambda, kappa) moves a subject's optimum far from the warm start
    scan = np.linspace(GAMMA_BOX[0], GAMMA_BOX[1], 81)
    state: dict[str, np.ndarray | None] = {"gam": None}

    def inner(lam: float, kap: float) -> tuple[np.ndarray, np.ndarray]:
        lam_s = np.full(S, lam)
        kap_s = np.full(S, kap)

        def f(gam: np.ndarray) -> np.ndarray:
            return _per_subject_ll(ev, rows, gam, lam_s, kap_s)

        table = np.vstack([f(np.full(S, gv)) for gv in scan])
        start = scan[np.argmax(table, axis=0)]
        if state["gam"] is not None:
            warm = state["gam"]
            start = np.where(f(warm) >= table.max(axis=0), warm, start)
        gam, ll = _newton_refine_gammas(f, start)
        state["gam"] = gam
        return gam, ll

    n = max(len(rows.subj), 1)

    def neg_outer(u: np.ndarray) -> float:
        lam, kap = untransform_params(u[0], u[1])
        return -float(inner(lam, kap)[1].sum()) / n

    bounds = [(lt0 - 9.0, lt0 + 9.0), (-9.0, 9.0)]
    kt = transform_params(1.0, 0.05)[1]
    x, f_opt, diag = _two_stage_minimize(neg_outer, bounds, settings.outer_population,
                                         settings.outer_generations, settings.refine_tol,
                                         root, extra_points=[np.array([lt0, kt])])
    lam, kap = untransform_params(x[0], x[1])
    gam, ll_s = inner(lam, kap)
    subjects = tuple(
        SubjectFit(rows.subject_ids[i], float(gam[i]), lam, kap, float(ll_s[i]),
                   _edge_flag(float(gam[i])))
        for i in range(S)
    )
    diag_t = tuple(sorted(diag.items()))
    return FitResult(spec.model, spec.family, spec.scheme, subjects, float(ll_s.sum()),
                     shared_lam=lam, shared_kappa=kap, diagnostics=diag_t)


# ---------------------------------------------------------------------------
# Bootstrap, post-processing, profiles
# ---------------------------------------------------------------------------

def block_bootstrap(spec: EstimationSpec, dataset: ChoiceDataset, reps: int,
                    seed: int | None = None) -> BootstrapResult:
    """Resample whole subjects with replacement and refit; SDs of the estimates.

    Defined for the pooled scheme (gamma, lambda, kappa) and the homoskedastic
    scheme (lambda, kappa; per-subject risk parameters are not resamplable).
    Failed replicates are counted, reported, and excluded from the SDs.
    """
    if reps < 2:
        raise ValueError("bootstrap needs reps >= 2; a single replicate has no spread")
    if spec.scheme is Scheme.HETEROSKEDASTIC:
        raise ValueError("block bootstrap is defined for pooled and homoskedastic fits")
    rows, ev = _prepare(spec, dataset)
    master = np.random.SeedSequence(spec.optimizer.seed if seed is None else seed)
    rep_seeds = master.spawn(reps)
    tasks = [(spec, ev, rows, rep_seeds[r]) for r in range(reps)]
    if spec.optimizer.n_jobs != 1 and reps > 1:
        chunks = np.array_split(np.arange(reps), max(spec.optimizer.n_jobs, 1))
        with ProcessPoolExecutor(max_workers=spec.optimizer.n_jobs) as pool:
            parts = list(pool.map(_bootstrap_chunk, [[tasks[i] for i in c] for c in chunks]))
        outcomes = [o for part in parts for o in part]
    else:
        outcomes = _bootstrap_chunk(tasks)
    ok = [est for est in outcomes if est is not None]
    n_failed = len(outcomes) - len(ok)
    if not ok:
        raise RuntimeError("all bootstrap replicates failed")
    est = np.asarray(ok)
    if spec.scheme is Scheme.POOLED:
        se = est.std(axis=0, ddof=1)
        return BootstrapResult(spec.scheme, reps, n_failed, float(se[0]), float(se[1]),
                               float(se[2]), est)
    se = est.std(axis=0, ddof=1)
    return BootstrapResult(spec.scheme, reps, n_failed, None, float(se[0]), float(se[1]), est)


def _bootstrap_chunk(tasks) -> list:
    out = []
    for spec, ev, rows, rep_seed in tasks:
        rng = np.random.default_rng(rep_seed)
        sample = rng.integers(0, rows.n_subjects, rows.n_subjects)
        boot_rows = rows.resampled(sample)
        boot_spec = replace(spec, optimizer=replace(
            spec.optimizer, seed=int(rng.integers(0, 2**31 - 1)), n_jobs=1))
        try:
            result = _fit_rows(boot_spec, ev, boot_rows)
        except Exception:
            out.append(None)
            continue
        if spec.scheme is Scheme.POOLED:
            p = result.pooled
            out.append((p.theta, p.lam, p.kappa))
        else:
            out.append((result.shared_lam, result.shared_kappa))
    return out


def postprocess_consistent(fit_result: FitResult, dataset: ChoiceDataset) -> FitResult:
    """Replace risk-parameter estimates of deterministically consistent subjects.

    A subject whose responses match noise-free choice at some risk parameter
    gets the midpoint of their feasible threshold interval; subjects feasible
    only above their largest (below their smallest) threshold get +5 (-5).
    Applies to heteroskedastic fits; everyone else is returned untouched with
    a flag recording the rule applied.
    """
    if fit_result.scheme is not Scheme.HETEROSKEDASTIC:
        raise ValueError("post-processing applies to heteroskedastic fits")
    battery = dataset.battery
    by_id = {s.subject_id: s for s in dataset.subjects}
    new_subjects = []
    for sf in fit_result.subjects:
        subject = by_id[sf.subject_id]
        lower, upper = -math.inf, math.inf
        consistent = True
        for pid, resp in zip(subject.pair_ids, subject.responses):
            pair = battery[pid]
            if resp is Response.INDIFFERENT:
                consistent = False
                break
            if pair.threshold is None:
                if resp is not Response.X:  # dominance pair answered against dominance
                    consistent = False
                    break
                continue
            if resp is Response.X:
                upper = min(upper, pair.threshold)
            else:
                lower = max(lower, pair.threshold)
        if not consistent or not lower < upper:
            new_subjects.append(sf)
            continue
        if math.isinf(lower) and math.isinf(upper):
            new_subjects.append(sf)
            continue
        if math.isinf(upper):
            gamma, flag = 5.0, "consistent_above"
        elif math.isinf(lower):
            gamma, flag = -5.0, "consistent_below"
        else:
            gamma, flag = 0.5 * (lower + upper), "consistent_midpoint"
        new_subjects.append(replace(sf, gamma=gamma, flag=flag))
    return replace(fit_result, subjects=tuple(new_subjects))


def profile_loglik(spec: EstimationSpec, dataset: ChoiceDataset, subject_id: str,
                   gammas: np.ndarray, lam: float, kappa: float) -> np.ndarray:
    """One subject's log-likelihood over a gamma grid at fixed lambda and kappa."""
    rows, ev = _prepare(spec, dataset)
    ids = list(rows.subject_ids)
    si = ids.index(subject_id)
    sub = rows.for_subject(si)
    gammas = np.asarray(gammas, dtype=float)
    G = len(gammas)
    nq = len(sub.pair)
    rep = _Rows(np.repeat(np.arange(G), nq), np.tile(sub.pair, G),
                np.tile(sub.wx, G), np.tile(sub.wy, G), G, tuple(str(i) for i in range(G)))
    return _per_subject_ll(ev, rep, gammas, np.full(G, lam), np.full(G, kappa))


def count_local_maxima(values: np.ndarray, tol: float = 1e-9) -> int:
    """Local maxima of a sequence, merging plateaus of width ``tol``."""
    reps: list[float] = []
    anchor = None
    for v in np.asarray(values, dtype=float):
        if anchor is None or abs(v - anchor) > tol:
            reps.append(float(v))
            anchor = float(v)
    n = len(reps)
    count = 0
    for i, r in enumerate(reps):
        left = i == 0 or reps[i - 1] < r
        right = i == n - 1 or reps[i + 1] < r
        if left and right:
            count += 1
    return count


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

def write_fit_csv(fit_result: FitResult, path) -> None:
    """Per-subject estimates as ``subject_id,gamma,lambda,kappa,loglik,flag``."""
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "gamma", "lambda", "kappa", "loglik", "flag"])
        if fit_result.scheme is Scheme.POOLED:
            p = fit_result.pooled
            flag = dict(fit_result.diagnostics).get("edge", 0.0)
            writer.writerow(["ALL", f"{p.theta:.8f}", f"{p.lam:.8g}", f"{p.kappa:.8f}",
                             f"{fit_result.log_likelihood:.8f}", "edge" if flag else ""])
            return
        for s in fit_result.subjects:
            writer.writerow([s.subject_id, f"{s.gamma:.8f}", f"{s.lam:.8g}",
                             f"{s.kappa:.8f}", f"{s.loglik:.8f}", s.flag])


def write_pooled_summary_csv(entries, path) -> None:
    """Rows of ``model,gamma,se_gamma,lambda,se_lambda,kappa,se_kappa``.

    ``entries`` is an iterable of (name, FitResult, BootstrapResult or None).
    """
    import csv

    def fmt(v):
        return "" if v is None else f"{v:.6g}"

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "gamma", "se_gamma", "lambda", "se_lambda", "kappa", "se_kappa"])
        for name, fit_result, boot in entries:
            p = fit_result.pooled
            if p is None:
                raise ValueError("summary rows require pooled fits")
            writer.writerow([name, fmt(p.theta), fmt(boot.se_gamma if boot else None),
                             fmt(p.lam), fmt(boot.se_lam if boot else None),
                             fmt(p.kappa), fmt(boot.se_kappa if boot else None)])
