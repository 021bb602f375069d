"""Exact counterfactual means and blip functions by g-formula enumeration.

Every estimand here is an iterated expectation over the DGP's conditional
laws with treatments set by a regime. Finite laws are summed exactly; a
Gaussian covariate contributes its quadrature nodes as ordinary support
points, so the same code path serves both.

Histories before a regime starts are drawn from the protocol, which is why
the protocol is a required argument: excursion effects marginal over past
treatment depend on it.
"""

from __future__ import annotations

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

import numpy as np

from .dgp import Dgp
from .errors import (
    ConditioningError,
    IdentificationError,
    NonEnumerableError,
    UndefinedBlipError,
    ValidationError,
)
from .trajectories import EligibilitySpec, History, Protocol, Regime, Summary, check_identified

__all__ = [
    "BlipTable",
    "Condition",
    "EstimandSpec",
    "HrMsmSurface",
    "NullPreservationReport",
    "WeightedAverageReport",
    "check_null_preservation",
    "check_weighted_average",
    "conditional_blips",
    "continuous_vs_never_blip",
    "counterfactual_mean",
    "excursion_blip",
    "history_distribution",
    "hr_msm_surface",
    "project_cumulative_exposure",
    "regime_blip",
]

CONTRASTS = ("blip-to-zero", "continuous-vs-never", "regime-specific")
MAX_HR_MSM_DELTA = 20


class _Engine:
    """Shared enumeration state for one (dgp, protocol, eligibility) triple."""

    def __init__(self, dgp: Dgp, protocol: Protocol | None, eligibility: EligibilitySpec | None = None):
        if protocol is not None and protocol.horizon is not None and protocol.horizon != dgp.horizon:
            raise ValidationError(f"protocol horizon {protocol.horizon} != DGP horizon {dgp.horizon}")
        self.dgp = dgp
        self.protocol = protocol
        self.eligibility = eligibility or dgp.eligibility
        self._branches: dict[tuple, list] = {}
        self._histories: dict[int, dict[History, float]] = {}
        self._avail: dict[History, int] = {}

    def branches(self, t: int, a: tuple, x: tuple, y: tuple) -> list[tuple[Any, Any, float]]:
        """Joint support of (X_t, Y_t) given the prefix before time t."""
        key = (t, a, x, y)
        out = self._branches.get(key)
        if out is not None:
            return out
        law = self.dgp.covariate_law(t, a, x, y)
        if law is None:
            xs = [(None, 1.0)]
        else:
            support = getattr(law, "support", None)
            if support is None:
                raise NonEnumerableError(f"law of X_{t} has no enumerable support")
            xs = law.support()
        out = []
        for xv, px in xs:
            if px <= 0:
                continue
            q = self.dgp.outcome_probability(t, a, x + (xv,), y)
            if q is None:
                out.append((xv, None, px))
                continue
            if q < 1:
                out.append((xv, 0, px * (1.0 - q)))
            if q > 0:
                out.append((xv, 1, px * q))
        self._branches[key] = out
        return out

    def available(self, h: History) -> int:
        v = self._avail.get(h)
        if v is None:
            v = self._avail[h] = self.eligibility.availability(h)
        return v

    def natural_probability(self, h: History) -> float:
        if self.protocol is None:
            raise ValidationError(f"a protocol is needed to draw A_{h.time} before the regime starts")
        return self.protocol.probability(h, self.available(h))

    def histories(self, t: int) -> dict[History, float]:
        """Law of H_t under the protocol, restricted to positive-probability histories."""
        if t in self._histories:
            return self._histories[t]
        if not 0 <= t <= self.dgp.horizon + 1:
            raise ValidationError(f"t={t} outside 0..{self.dgp.horizon + 1}")
        level: dict[History, float] = defaultdict(float)
        for xv, yv, p in self.branches(0, (), (), ()):
            level[History(0, (), (xv,), (yv,))] += p
        for s in range(t):
            nxt: dict[History, float] = defaultdict(float)
            for h, ph in level.items():
                p1 = self.natural_probability(h)
                for a, pa in ((0, 1.0 - p1), (1, p1)):
                    if pa <= 0:
                        continue
                    a2 = h.past_treatments + (a,)
                    for xv, yv, pr in self.branches(s + 1, a2, h.past_covariates, h.past_outcomes):
                        nxt[History(s + 1, a2, h.past_covariates + (xv,), h.past_outcomes + (yv,))] += ph * pa * pr
            level = nxt
        self._histories[t] = dict(level)
        return self._histories[t]

    def mean_function(self, regime: Regime, endpoint: int) -> Callable[[History], float]:
        """h -> E{Y_k(regime) | H = h}, treatments before the regime starts drawn from the protocol."""
        if endpoint not in self.dgp.endpoints:
            raise ValidationError(f"Y_{endpoint} is not an endpoint of {self.dgp.name}")
        memo: dict[History, float] = {}

        def value(h: History) -> float:
            got = memo.get(h)
            if got is not None:
                return got
            s = h.time
            if s >= endpoint:
                out = float(h.past_outcomes[endpoint])
            else:
                if s < regime.start_time:
                    p1 = self.natural_probability(h)
                else:
                    p1 = check_identified(regime, h, self.available(h))
                out = 0.0
                for a, pa in ((0, 1.0 - p1), (1, p1)):
                    if pa <= 0:
                        continue
                    a2 = h.past_treatments + (a,)
                    for xv, yv, pr in self.branches(s + 1, a2, h.past_covariates, h.past_outcomes):
                        out += pa * pr * value(History(s + 1, a2, h.past_covariates + (xv,), h.past_outcomes + (yv,)))
            memo[h] = out
            return out

        return value


@dataclass(frozen=True)
class Condition:
    """Condition on S_time(H) = value, and on trial eligibility unless disabled."""

    time: int
    summary: Summary = Summary()
    value: Any = ()
    eligible_only: bool = True


def history_distribution(dgp: Dgp, protocol: Protocol, t: int, eligibility: EligibilitySpec | None = None) -> dict[History, float]:
    return dict(_Engine(dgp, protocol, eligibility).histories(t))


def counterfactual_mean(
    dgp: Dgp,
    regime: Regime,
    endpoint: int,
    condition: Condition | None = None,
    protocol: Protocol | None = None,
    eligibility: EligibilitySpec | None = None,
) -> float:
    """E{Y_k(regime) | condition} by the g-formula."""
    engine = _Engine(dgp, protocol, eligibility)
    value = engine.mean_function(regime, endpoint)
    tau = regime.start_time if condition is None else condition.time
    if condition is not None and condition.time > regime.start_time:
        raise ValidationError("the conditioning time must not follow the regime start")
    num = mass = 0.0
    for h, p in engine.histories(tau).items():
        if condition is not None:
            if condition.eligible_only and not engine.eligibility.eligible(h):
                continue
            if condition.summary(h) != condition.value:
                continue
        num += p * value(h)
        mass += p
    if mass <= 0:
        raise ConditioningError("conditioning event has probability zero")
    return num / mass


@dataclass(frozen=True)
class EstimandSpec:
    t: int
    delta: int
    summary: Summary = Summary()
    contrast: str = "blip-to-zero"
    regime: Regime | None = None

    def __post_init__(self):
        if self.t < 0 or self.delta < 1:
            raise ValidationError("need t >= 0 and delta >= 1")
        if self.contrast not in CONTRASTS:
            raise ValidationError(f"unknown contrast {self.contrast!r}")
        if self.contrast == "regime-specific" and self.regime is None:
            raise ValidationError("regime-specific contrasts need a regime")

    @property
    def endpoint(self) -> int:
        return self.t + self.delta

    @classmethod
    def from_endpoint(cls, t: int, k: int, **kwargs) -> "EstimandSpec":
        return cls(t=t, delta=k - t, **kwargs)

    def follow_up(self) -> Regime:
        if self.contrast == "blip-to-zero":
            return Regime.never()
        if self.contrast == "continuous-vs-never":
            return Regime.carry_forward()
        return self.regime


def _sorted_keys(keys: Iterable) -> list:
    keys = list(keys)
    try:
        return sorted(keys)
    except TypeError:
        return sorted(keys, key=repr)


@dataclass(frozen=True)
class BlipTable:
    """Log-ratio contrasts indexed by summary value."""

    contrast: str
    t: int
    delta: int
    summary: Summary
    entries: dict
    numerators: dict = field(repr=False)
    denominators: dict = field(repr=False)
    masses: dict = field(repr=False)
    regime: str = ""

    @property
    def endpoint(self) -> int:
        return self.t + self.delta

    def __getitem__(self, key):
        return self.entries[key]

    def __len__(self) -> int:
        return len(self.entries)

    def values(self) -> np.ndarray:
        return np.array([self.entries[k] for k in _sorted_keys(self.entries)])

    def rows(self) -> list[tuple[str, int, int, str, float]]:
        return [
            (self.contrast, self.t, self.delta, self.summary.format_value(k), self.entries[k])
            for k in _sorted_keys(self.entries)
        ]

    def to_csv(self, header: bool = True) -> str:
        lines = ["contrast,t,delta,summary_value,value"] if header else []
        for contrast, t, delta, s, v in self.rows():
            lines.append(f"{contrast},{t},{delta},{s},{v:.9g}")
        return "\n".join(lines) + "\n"


def _log_ratio(num: float, den: float, where: str) -> float:
    if den <= 0 or num <= 0:
        raise UndefinedBlipError(f"log-ratio undefined at {where}: numerator {num!r}, denominator {den!r}")
    return math.log(num / den)


def _blip_table(engine: _Engine, t: int, endpoint: int, follow: Regime, summary: Summary, contrast: str) -> BlipTable:
    T = engine.dgp.horizon
    if not 0 <= t < endpoint <= T + 1:
        raise ValidationError(f"need 0 <= t < t + delta <= T + 1, got t={t}, endpoint={endpoint}, T={T}")
    treated = engine.mean_function(follow.then(1, at=t), endpoint)
    control = engine.mean_function(follow.then(0, at=t), endpoint)
    num: dict = defaultdict(float)
    den: dict = defaultdict(float)
    mass: dict = defaultdict(float)
    for h, p in engine.histories(t).items():
        if not engine.eligibility.eligible(h):
            continue
        s = summary(h)
        num[s] += p * treated(h)
        den[s] += p * control(h)
        mass[s] += p
    if not mass:
        raise ConditioningError(f"no trial-eligible history at t={t}")
    entries = {
        s: _log_ratio(num[s], den[s], f"t={t}, {summary.name}={summary.format_value(s)}") for s in mass
    }
    return BlipTable(contrast, t, endpoint - t, summary, entries, dict(num), dict(den), dict(mass), follow.name)


def excursion_blip(dgp: Dgp, protocol: Protocol, spec: EstimandSpec, eligibility: EligibilitySpec | None = None) -> BlipTable:
    """Blip a_t = 1 vs a_t = 0, no treatment for the next delta - 1 steps, past treatment from the protocol."""
    engine = _Engine(dgp, protocol, eligibility)
    return _blip_table(engine, spec.t, spec.endpoint, Regime.never(), spec.summary, "blip-to-zero")


def continuous_vs_never_blip(dgp: Dgp, protocol: Protocol, spec: EstimandSpec, eligibility: EligibilitySpec | None = None) -> BlipTable:
    engine = _Engine(dgp, protocol, eligibility)
    return _blip_table(engine, spec.t, spec.endpoint, Regime.carry_forward(), spec.summary, "continuous-vs-never")


def regime_blip(
    dgp: Dgp,
    protocol: Protocol,
    g: Regime,
    t: int,
    k: int,
    summary: Summary | None = None,
    eligibility: EligibilitySpec | None = None,
) -> BlipTable:
    """gamma^g_{t,k}: blip a_t then follow ``g`` from t + 1; conditions on the full history by default."""
    engine = _Engine(dgp, protocol, eligibility)
    summary = Summary(identity=True) if summary is None else summary
    return _blip_table(engine, t, k, g, summary, "regime-specific")


def blip(dgp: Dgp, protocol: Protocol, spec: EstimandSpec, eligibility: EligibilitySpec | None = None) -> BlipTable:
    engine = _Engine(dgp, protocol, eligibility)
    return _blip_table(engine, spec.t, spec.endpoint, spec.follow_up(), spec.summary, spec.contrast)


def conditional_blips(
    dgp: Dgp, protocol: Protocol, g: Regime, t: int, k: int, eligibility: EligibilitySpec | None = None,
    availability_only: bool = False,
) -> dict[History, tuple[float, float, float]]:
    """Per-history (P(H_t), E{Y_k(1, g)|H_t}, E{Y_k(0, g)|H_t})."""
    engine = _Engine(dgp, protocol, eligibility)
    treated = engine.mean_function(g.then(1, at=t), k)
    control = engine.mean_function(g.then(0, at=t), k)
    keep = engine.available if availability_only else engine.eligibility.eligible
    return {h: (p, treated(h), control(h)) for h, p in engine.histories(t).items() if keep(h)}


@dataclass(frozen=True)
class HrMsmSurface:
    """E{Y(A_bar_{t-1}, a_t..a_{t+delta}) | S_t, I_t = 1} for every future path."""

    t: int
    delta: int
    endpoint: int
    summary: Summary
    means: dict
    contrasts: dict

    def paths(self) -> list[tuple[int, ...]]:
        return list(itertools.product((0, 1), repeat=self.delta + 1))


def hr_msm_surface(dgp: Dgp, protocol: Protocol, t: int, delta: int, summary: Summary | None = None,
                   eligibility: EligibilitySpec | None = None) -> HrMsmSurface:
    """Surface over the delta + 1 treatments a_t..a_{t+delta}; the endpoint follows a_{t+delta}."""
    if delta > MAX_HR_MSM_DELTA:
        raise ValidationError(f"delta={delta} exceeds the enumeration guard {MAX_HR_MSM_DELTA}")
    if delta < 0:
        raise ValidationError("delta must be non-negative")
    summary = summary or Summary()
    endpoint = t + delta + 1
    if endpoint > dgp.horizon + 1:
        raise ValidationError(f"endpoint {endpoint} beyond T + 1 = {dgp.horizon + 1}")
    engine = _Engine(dgp, protocol, eligibility)
    hist = [(h, p) for h, p in engine.histories(t).items() if engine.eligibility.eligible(h)]
    if not hist:
        raise ConditioningError(f"no trial-eligible history at t={t}")
    means = {}
    paths = list(itertools.product((0, 1), repeat=delta + 1))
    for path in paths:
        value = engine.mean_function(Regime.static(path, start_time=t), endpoint)
        num: dict = defaultdict(float)
        mass: dict = defaultdict(float)
        for h, p in hist:
            s = summary(h)
            num[s] += p * value(h)
            mass[s] += p
        for s in mass:
            means[(s, path)] = num[s] / mass[s]
    zero = paths[0]
    contrasts = {
        (s, path): _log_ratio(m, means[(s, zero)], f"path {path}, {summary.name}={summary.format_value(s)}")
        for (s, path), m in means.items()
    }
    return HrMsmSurface(t, delta, endpoint, summary, means, contrasts)


def project_cumulative_exposure(surface: HrMsmSurface) -> tuple[dict, float, float]:
    """Least-squares fit of log mean = b(s) + beta * sum(path); returns (b, beta, max |residual|).

    A zero residual means the log-linear cumulative-exposure model holds exactly.
    """
    levels = _sorted_keys({s for s, _ in surface.means})
    index = {s: i for i, s in enumerate(levels)}
    rows, rhs = [], []
    for (s, path), m in surface.means.items():
        if m <= 0:
            raise UndefinedBlipError(f"zero mean on path {path}")
        row = np.zeros(len(levels) + 1)
        row[index[s]] = 1.0
        row[-1] = sum(path)
        rows.append(row)
        rhs.append(math.log(m))
    X, z = np.array(rows), np.array(rhs)
    coef, *_ = np.linalg.lstsq(X, z, rcond=None)
    resid = z - X @ coef
    return {s: float(coef[index[s]]) for s in levels}, float(coef[-1]), float(np.max(np.abs(resid)))


@dataclass
class NullPreservationReport:
    passed: bool
    violations: list[tuple[int, History, float]]
    spread: float | None
    regimes_checked: int
    regimes_skipped: int
    tol: float

    def violation_times(self) -> set[int]:
        return {t for t, _, _ in self.violations}


def _masked(rule: Callable[[History], int], engine: _Engine) -> Callable[[History], int]:
    return lambda h: rule(h) if engine.available(h) else 0


def _regime_library(engine: _Engine, k: int) -> list[Regime]:
    regimes = [Regime.static(path) for path in itertools.product((0, 1), repeat=k)]

    def last_x(h: History):
        return h.past_covariates[-1]

    dynamic = {
        "treat-if-available": lambda h: 1,
        "carry-forward-from-1": lambda h: 1 if h.time == 0 else h.last_treatment,
        "treat-if-x": lambda h: int(last_x(h) not in (None, 0, 0.0)),
        "treat-unless-x": lambda h: int(last_x(h) in (None, 0, 0.0)),
        "alternate": lambda h: int(h.time % 2 == 0),
        "treat-if-event": lambda h: int(any(v == 1 for v in h.past_outcomes)),
    }
    for name, rule in dynamic.items():
        regimes.append(Regime.dynamic(_masked(rule, engine), name=name))
    regimes.append(Regime.random_policy(_masked(lambda h: 0.3, engine), name="random-0.3"))
    return regimes


def check_null_preservation(dgp: Dgp, protocol: Protocol, k: int, tol: float = 1e-9,
                            eligibility: EligibilitySpec | None = None) -> NullPreservationReport:
    """If every gamma_{t,k}(H_t) with g = 0 vanishes, no regime may move E{Y_k}."""
    engine = _Engine(dgp, protocol, eligibility)
    never = Regime.never()
    violations = []
    for t in range(k):
        treated = engine.mean_function(never.then(1, at=t), k)
        control = engine.mean_function(never.then(0, at=t), k)
        for h in engine.histories(t):
            if not engine.available(h):
                continue
            m1, m0 = treated(h), control(h)
            if abs(m1 - m0) <= tol * max(1.0, abs(m0)):
                continue
            gamma = math.log(m1 / m0) if m1 > 0 and m0 > 0 else math.copysign(math.inf, m1 - m0)
            if abs(gamma) > tol:
                violations.append((t, h, gamma))
    if violations:
        return NullPreservationReport(False, violations, None, 0, 0, tol)
    means, skipped = [], 0
    start = engine.histories(0)
    for regime in _regime_library(engine, k):
        value = engine.mean_function(regime, k)
        try:
            means.append(sum(p * value(h) for h, p in start.items()))
        except IdentificationError:
            skipped += 1
    spread = max(means) - min(means) if means else 0.0
    return NullPreservationReport(spread <= tol, [], spread, len(means), skipped, tol)


@dataclass
class WeightedAverageReport:
    passed: bool
    cells: list[tuple[Any, float, float, float, bool]]
    tol: float

    @property
    def failures(self) -> list:
        return [c for c in self.cells if not c[-1]]


def check_weighted_average(dgp: Dgp, protocol: Protocol, g: Regime, t: int, k: int, summary: Summary,
                           tol: float = 1e-9, eligibility: EligibilitySpec | None = None) -> WeightedAverageReport:
    """exp gamma(s) must lie between the extreme exp gamma(H) over histories with S(H) = s."""
    per_history = conditional_blips(dgp, protocol, g, t, k, eligibility)
    coarse = regime_blip(dgp, protocol, g, t, k, summary, eligibility)
    groups: dict = defaultdict(list)
    for h, (p, m1, m0) in per_history.items():
        if m0 > 0:
            groups[summary(h)].append(m1 / m0)
        elif m1 > 0:
            groups[summary(h)].append(math.inf)
    cells = []
    for s in _sorted_keys(coarse.entries):
        value = math.exp(coarse.entries[s])
        ratios = groups.get(s, [])
        lo, hi = (min(ratios), max(ratios)) if ratios else (math.nan, math.nan)
        if summary.identity:
            ok = abs(value - lo) <= tol and abs(value - hi) <= tol
        else:
            ok = lo - tol <= value <= hi + tol
        cells.append((s, value, lo, hi, ok))
    return WeightedAverageReport(all(c[-1] for c in cells), cells, tol)
