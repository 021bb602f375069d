"""Data-generating processes and the closed-form estimands of the two-step examples.

The two built-in processes keep the textbook labels A_1, A_2 for the two
randomized treatments. Time 0 exists (time is 0-indexed throughout) but
treatment is unavailable there, so A_0 = 0 always. The single outcome follows
A_2 and is therefore endpoint k = 3 = T + 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import expit, ndtri

from .errors import NonEnumerableError, ValidationError
from .trajectories import EligibilitySpec, Protocol

__all__ = [
    "BASELINE_MEAN",
    "Discrete",
    "Dgp",
    "EffectModifierParams",
    "Gaussian",
    "TwoStepParams",
    "effect_modifier_conditional_mean",
    "effect_modifier_dgp",
    "secondary_excursion_beta",
    "two_step_closed_form_beta",
    "two_step_conditional_blip",
    "two_step_dgp",
    "two_step_outcome_mean",
]

# E{Y_2(a_1, 0)} in both two-step examples; the log 4 offset is -log of this.
BASELINE_MEAN = 0.25
OUTCOME_ENDPOINT = 3
TWO_STEP_HORIZON = 2
PROB_TOL = 1e-9


@dataclass(frozen=True)
class Discrete:
    values: tuple[float, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        if len(self.values) != len(self.probs) or not self.values:
            raise ValidationError("discrete law needs matching non-empty values and probs")
        if any(p < 0 or p > 1 for p in self.probs):
            raise ValidationError(f"probabilities {self.probs} outside [0, 1]")
        if abs(sum(self.probs) - 1.0) > PROB_TOL:
            raise ValidationError(f"probabilities {self.probs} do not sum to 1")

    @classmethod
    def bernoulli(cls, p: float) -> "Discrete":
        return cls((0.0, 1.0), (1.0 - p, p))

    def support(self) -> list[tuple[float, float]]:
        return [(v, p) for v, p in zip(self.values, self.probs) if p > 0]

    def sample(self, u: float) -> float:
        acc = 0.0
        for v, p in zip(self.values, self.probs):
            acc += p
            if u < acc:
                return v
        return self.values[-1]


@dataclass(frozen=True)
class Gaussian:
    """Normal law; the oracle integrates it by Gauss-Hermite quadrature.

    ``method="monte-carlo"`` replaces the nodes by a fixed-seed equal-weight
    sample, for integrands where quadrature is a poor fit.
    """

    mean: float = 0.0
    sd: float = 1.0
    nodes: int = 64
    method: str = "quadrature"
    mc_draws: int = 4096
    mc_seed: int = 0

    @cached_property
    def _support(self) -> list[tuple[float, float]]:
        if self.method == "quadrature":
            z, w = hermegauss(self.nodes)
            w = w / math.sqrt(2.0 * math.pi)
        elif self.method == "monte-carlo":
            z = np.random.default_rng(self.mc_seed).standard_normal(self.mc_draws)
            w = np.full(self.mc_draws, 1.0 / self.mc_draws)
        else:
            raise NonEnumerableError(f"unknown integration method {self.method!r}")
        return [(float(self.mean + self.sd * zi), float(wi)) for zi, wi in zip(z, w)]

    def support(self) -> list[tuple[float, float]]:
        return self._support

    def sample(self, u: float) -> float:
        return float(self.mean + self.sd * ndtri(u))


Prefix = tuple
CovariateFn = Callable[[int, Prefix, Prefix, Prefix], Optional[object]]
OutcomeFn = Callable[[int, Prefix, Prefix, Prefix], float]


def _no_covariates(t, a, x, y):
    return None


@dataclass(frozen=True)
class Dgp:
    """A factorized law over trajectories.

    ``covariate(t, a, x, y)`` returns the law of X_t (or ``None`` when no
    covariate is recorded at t) given A_0..A_{t-1}, X_0..X_{t-1}, Y_0..Y_{t-1}.
    ``outcome(k, a, x, y)`` returns P(Y_k = 1) given A_0..A_{k-1}, X_0..X_k,
    Y_0..Y_{k-1}; it is only called for k in ``endpoints``.
    """

    horizon: int
    outcome: OutcomeFn
    endpoints: tuple[int, ...]
    covariate: CovariateFn = _no_covariates
    eligibility: EligibilitySpec = field(default_factory=EligibilitySpec)
    absorbing: bool = False
    default_protocol: Protocol | None = None
    name: str = "dgp"

    def __post_init__(self):
        if self.horizon < 0:
            raise ValidationError("horizon must be non-negative")
        bad = [k for k in self.endpoints if not 1 <= k <= self.horizon + 1]
        if bad:
            raise ValidationError(f"endpoints {bad} outside 1..{self.horizon + 1}")

    def covariate_law(self, t: int, a: Prefix, x: Prefix, y: Prefix):
        return self.covariate(t, a, x, y)

    def outcome_probability(self, k: int, a: Prefix, x: Prefix, y: Prefix) -> float | None:
        if k not in self.endpoints:
            return None
        if self.absorbing and any(v == 1 for v in y):
            return 1.0
        q = float(self.outcome(k, a, x, y))
        if not 0.0 <= q <= 1.0:
            raise ValidationError(f"outcome probability {q} for Y_{k} outside [0, 1]")
        return q


@dataclass(frozen=True)
class TwoStepParams:
    theta: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValidationError(f"theta={self.theta} outside [0, 1]")


@dataclass(frozen=True)
class EffectModifierParams:
    theta: float = 0.5
    alpha0: float = 2.666
    alpha1: float = -0.905
    nodes: int = 64

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValidationError(f"theta={self.theta} outside [0, 1]")
        if self.nodes < 1:
            raise ValidationError("need at least one quadrature node")


def _two_step_eligibility() -> EligibilitySpec:
    return EligibilitySpec.unavailable_at([0])


def two_step_outcome_mean(a1: int, a2: int) -> float:
    """E{Y_2(a_1, a_2)} = exp(-a_2 + 2 a_1 a_2) / 4."""
    return math.exp(-a2 + 2 * a1 * a2) * BASELINE_MEAN


def two_step_dgp(params: TwoStepParams | float = TwoStepParams()) -> Dgp:
    if not isinstance(params, TwoStepParams):
        params = TwoStepParams(float(params))

    def outcome(k, a, x, y):
        return two_step_outcome_mean(a[1], a[2])

    return Dgp(
        horizon=TWO_STEP_HORIZON,
        outcome=outcome,
        endpoints=(OUTCOME_ENDPOINT,),
        eligibility=_two_step_eligibility(),
        default_protocol=Protocol.constant(params.theta, horizon=TWO_STEP_HORIZON),
        name=f"two-step(theta={params.theta!r})",
    )


def two_step_closed_form_beta(theta: float) -> float:
    """Marginal excursion effect of A_2 on Y_2 when both treatments have P = theta."""
    if not 0.0 <= theta <= 1.0:
        raise ValidationError(f"theta={theta} outside [0, 1]")
    return math.log((1.0 - theta) / math.e + theta * math.e)


def two_step_conditional_blip(a1: int) -> float:
    if a1 not in (0, 1):
        raise ValidationError("a1 must be 0 or 1")
    return -1.0 + 2.0 * a1


def effect_modifier_conditional_mean(a1: int, a2: int, x2: float, params: EffectModifierParams) -> float:
    """E{Y_2(a_1, a_2) | X_2 = x2}."""
    if a2 == 0:
        return BASELINE_MEAN
    if a1 == 1:
        return float(expit(-(params.alpha1 + x2)))
    return float(expit(-(params.alpha0 - x2)))


def effect_modifier_dgp(params: EffectModifierParams = EffectModifierParams()) -> Dgp:
    law = Gaussian(nodes=params.nodes)

    def covariate(t, a, x, y):
        return law if t == 2 else None

    def outcome(k, a, x, y):
        return effect_modifier_conditional_mean(a[1], a[2], x[2], params)

    return Dgp(
        horizon=TWO_STEP_HORIZON,
        outcome=outcome,
        endpoints=(OUTCOME_ENDPOINT,),
        covariate=covariate,
        eligibility=_two_step_eligibility(),
        default_protocol=Protocol.constant(params.theta, horizon=TWO_STEP_HORIZON),
        name=f"effect-modifier(theta={params.theta!r})",
    )


def secondary_excursion_beta(x2: float | Sequence[float] | np.ndarray, params: EffectModifierParams = EffectModifierParams()):
    """Excursion effect of A_2 given the modifier X_2, marginal over A_1 ~ Bernoulli(theta)."""
    x2 = np.asarray(x2, dtype=float)
    th = params.theta
    value = np.log(th * expit(-(params.alpha1 + x2)) + (1.0 - th) * expit(-(params.alpha0 - x2))) - math.log(BASELINE_MEAN)
    return float(value) if value.ndim == 0 else value


def central_slope(fn: Callable[[float], float], x: float = 0.0, h: float = 1e-5) -> float:
    return (fn(x + h) - fn(x - h)) / (2.0 * h)
