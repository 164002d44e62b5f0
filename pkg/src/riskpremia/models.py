"""Stochastic choice models over lottery menus.

Six models map a risk parameter theta, a precision lambda and a tremble
probability kappa to choice probabilities. Five are random utility models
driven by a preference index per option (expected utility, certainty
equivalent, premium-to-best, cumulative premium, rescaled expected utility);
the sixth perturbs the risk parameter itself and picks the deterministic
optimum of the perturbed agent. All use logistic errors.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .exceptions import OrientationError, AmbiguityError
from .lotteries import Lottery, UtilityFamily, certainty_equivalent, expected_utility, utility
from .premium import compensating_premium


class ModelKind(enum.Enum):
    EU_RUM = "eu"
    CE_RUM = "ce"
    PI_RUM = "pi"
    CUM_PI_RUM = "cumpi"
    RPM = "rpm"
    CON_EU = "coneu"

    @classmethod
    def from_string(cls, name: str) -> "ModelKind":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ValueError(f"unknown model kind: {name!r} "
                             f"(expected one of {', '.join(k.value for k in cls)})")


RUM_KINDS = (ModelKind.EU_RUM, ModelKind.CE_RUM, ModelKind.PI_RUM,
             ModelKind.CUM_PI_RUM, ModelKind.CON_EU)


@dataclass(frozen=True)
class ModelParams:
    """Risk parameter, precision and tremble probability."""

    theta: float
    lam: float
    kappa: float = 0.0

    def __post_init__(self) -> None:
        if not self.lam >= 0.0:
            raise ValueError("lambda must be >= 0")
        if not 0.0 <= self.kappa <= 1.0:
            raise ValueError("kappa must lie in [0, 1]")


@dataclass(frozen=True)
class Menu:
    """An ordered collection of at least two lotteries; slot 0 is the risky X."""

    lotteries: tuple[Lottery, ...]

    def __post_init__(self) -> None:
        if len(self.lotteries) < 2:
            raise ValueError("a menu needs at least two lotteries")

    def __len__(self) -> int:
        return len(self.lotteries)


@dataclass(frozen=True)
class ChoiceModelSpec:
    """Model kind plus family, with parameters when the use needs them."""

    kind: ModelKind
    family: UtilityFamily
    params: ModelParams | None = None


def parse_model_spec(text: str) -> ChoiceModelSpec:
    """Parse ``model=pi;family=crra;theta=..;lambda=..;kappa=..``.

    ``theta``, ``lambda`` and ``kappa`` are optional together: when none is
    given the spec carries no parameters.
    """
    fields: dict[str, str] = {}
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        if "=" not in chunk:
            raise ValueError(f"bad model spec field {chunk!r}")
        key, value = chunk.split("=", 1)
        fields[key.strip().lower()] = value.strip()
    try:
        kind = ModelKind.from_string(fields.pop("model"))
        family = UtilityFamily.from_string(fields.pop("family"))
    except KeyError as missing:
        raise ValueError(f"model spec is missing the {missing} field")
    params = None
    present = {"theta", "lambda", "kappa"} & fields.keys()
    if present:
        if "theta" not in present or "lambda" not in present:
            raise ValueError("model spec parameters need at least theta and lambda")
        params = ModelParams(
            theta=float(fields.pop("theta")),
            lam=float(fields.pop("lambda")),
            kappa=float(fields.pop("kappa", "0")),
        )
    if fields:
        raise ValueError(f"unknown model spec fields: {sorted(fields)}")
    return ChoiceModelSpec(kind, family, params)


def format_model_spec(spec: ChoiceModelSpec) -> str:
    base = f"model={spec.kind.value};family={spec.family.value}"
    if spec.params is not None:
        p = spec.params
        base += f";theta={p.theta:g};lambda={p.lam:g};kappa={p.kappa:g}"
    return base


def logistic(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def value_index(kind: ModelKind, family: UtilityFamily, theta: float, menu: Menu) -> list[float]:
    """Preference indices V_i for the RUM kinds; the parameter-shock model has none."""
    if kind is ModelKind.RPM:
        raise ValueError("the random parameter model has no value index")
    lots = menu.lotteries
    if kind is ModelKind.EU_RUM:
        return [expected_utility(family, theta, lot) for lot in lots]
    if kind is ModelKind.CE_RUM:
        return [certainty_equivalent(family, theta, lot) for lot in lots]
    if kind is ModelKind.CON_EU:
        z_max = max(lot.max_outcome for lot in lots)
        z_min = min(lot.min_outcome for lot in lots)
        if z_max == z_min:
            return [0.0 for _ in lots]
        denom = utility(family, theta, z_max) - utility(family, theta, z_min)
        return [expected_utility(family, theta, lot) / denom for lot in lots]

    eus = [expected_utility(family, theta, lot) for lot in lots]
    if kind is ModelKind.PI_RUM:
        best = int(np.argmax(eus))  # ties: lowest index; irrelevant for the value
        out = []
        for i, lot in enumerate(lots):
            if i == best:
                out.append(0.0)
            else:
                out.append(-compensating_premium(family, theta, lot, lots[best]))
        return out
    assert kind is ModelKind.CUM_PI_RUM
    order = sorted(range(len(lots)), key=lambda i: (-eus[i], i))  # lexicographic ties
    v = [0.0] * len(lots)
    acc = 0.0
    for rank in range(1, len(order)):
        lower, higher = order[rank], order[rank - 1]
        acc -= compensating_premium(family, theta, lots[lower], lots[higher])
        v[lower] = acc
    return v


def _rpm_base_prob_x(family: UtilityFamily, params: ModelParams, x: Lottery, y: Lottery,
                     threshold: float | None = None,
                     scan_interval: tuple[float, float] = (-20.0, 20.0)) -> float:
    """Probability that a perturbed-parameter agent prefers X.

    Requires the battery orientation (X preferred below the unique threshold)
    or an everywhere-preferred option. ``threshold`` may be passed in when it
    is already known (e.g. from a battery).
    """
    from .ordering import indifference_threshold  # local import to avoid a cycle

    if threshold is None:
        try:
            threshold = indifference_threshold(family, x, y, scan_interval)
        except AmbiguityError as exc:
            raise OrientationError(
                "pair has several indifference points; the parameter-shock model "
                "is only defined for single-threshold or dominated pairs"
            ) from exc
    if threshold is None:
        # no crossing: one side is preferred at every scanned theta
        mid = 0.5 * (scan_interval[0] + scan_interval[1])
        x_preferred = certainty_equivalent(family, mid, x) >= certainty_equivalent(family, mid, y)
        return 1.0 if x_preferred else 0.0
    probe = 0.5 * (scan_interval[0] + threshold)
    if certainty_equivalent(family, probe, x) < certainty_equivalent(family, probe, y):
        raise OrientationError(
            "pair is oriented with X preferred above the threshold; "
            "swap the pair to use the parameter-shock model"
        )
    return logistic(params.lam * (threshold - params.theta))


def choice_prob_pair(
    kind: ModelKind,
    family: UtilityFamily,
    params: ModelParams,
    x: Lottery,
    y: Lottery,
    rpm_threshold: float | None = None,
) -> float:
    """Tremble-mixed probability of choosing X from the pair (X, Y)."""
    if kind is ModelKind.RPM:
        base = _rpm_base_prob_x(family, params, x, y, threshold=rpm_threshold)
    else:
        v = value_index(kind, family, params.theta, Menu((x, y)))
        base = logistic(params.lam * (v[0] - v[1]))
    mixed = (1.0 - params.kappa) * base + params.kappa * (1.0 - base)
    return min(1.0, max(0.0, mixed))


def choice_prob_menu(
    kind: ModelKind, family: UtilityFamily, params: ModelParams, menu: Menu
) -> list[float]:
    """Softmax choice probabilities over a menu. Trembles apply to pairs only."""
    if kind not in RUM_KINDS:
        raise ValueError("menu probabilities are defined for the RUM kinds only")
    if params.kappa != 0.0:
        raise ValueError("menu probabilities do not take a tremble; use kappa=0")
    v = np.asarray(value_index(kind, family, params.theta, menu))
    z = params.lam * v
    z -= z.max()
    e = np.exp(z)
    probs = e / e.sum()
    return [float(p) for p in probs]
