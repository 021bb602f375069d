"""Excursion-effect estimation by emulating a series of target trials.

Each subject is enrolled in trial t = 0..T-Delta+1 whenever I_t = 1. Trial t
compares A_t = 1 against A_t = 0 followed by no treatment through
t + Delta - 1, with outcome Y_{t+Delta}. The estimating equation is

    sum_rows w (Y - mu) (g, A_t f) = 0,   mu = exp(g'alpha + A_t f'beta),

with w = W_t * J_t, where W_t = 1/P(A_t | H_t) is the inverse probability of
the observed blip treatment and J_t = prod_{j=t+1}^{t+Delta-1}
1(A_j = 0) / {1 - p_j(H_j)} reweights the follow-up to "no treatment". With a
saturated nuisance design, exp(beta) is the ratio of the two inverse-weighted
trial arms within each level of the blip features.

Standard errors come from a sandwich clustered on subject. When the
propensities are estimated, the logistic scores are stacked with the outcome
scores so the variance accounts for the estimation.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.special import expit

from .errors import (
    ConvergenceError,
    NoDataError,
    PositivityError,
    RankDeficiencyError,
    SeparationError,
    ValidationError,
)
from .trajectories import Dataset, EligibilitySpec, History, Protocol, Summary, history_at

__all__ = [
    "EstimationResult",
    "ExcursionModel",
    "PersonTrialTable",
    "PropensityModel",
    "compute_weights",
    "emulate_series",
    "fit_excursion_model",
    "fit_propensities",
    "stack_person_trials",
    "summary_features",
]

MAX_ITER = 100
SCORE_TOL = 1e-10
# Under separation Newton drives the logit toward infinity; the mean score
# reaches 1e-10 only near |logit| = 23, so 15 is crossed first.
ETA_SEPARATION = 15.0
BASE_COLUMNS = ("subject", "t", "eligible", "a_t", "y", "weight", "j_weight")

FeatureFn = Callable[[History], float]


def summary_features(summary: Summary) -> dict[str, FeatureFn]:
    """One numeric feature per summary component, named like ``a1``."""
    if summary.identity:
        raise ValidationError("the full history is not a finite feature vector; list components instead")
    return {f"{k}{j}": (lambda h, k=k, j=j: float(h.value(k, j))) for k, j in summary.components}


# ---------------------------------------------------------------- stacking


@dataclass
class PersonTrialTable:
    """Stacked (subject, enrollment time) rows plus the per-subject arrays weights need."""

    frame: pd.DataFrame
    delta: int
    horizon: int
    feature_names: tuple[str, ...]
    treatments: np.ndarray  # (n, T + 1)
    availability: np.ndarray  # (n, T + 1)
    dataset: Dataset = field(repr=False)
    probabilities: np.ndarray | None = None  # p_t(H_t), (n, T + 1)
    propensity_source: str | None = None
    propensity_model: "PropensityModel | None" = None
    propensity_design: dict | None = field(default=None, repr=False)
    truncation: float | None = None

    @property
    def n_subjects(self) -> int:
        return self.treatments.shape[0]

    def history(self, subject: int, t: int) -> History:
        return history_at(self.dataset[subject], t)

    def times_needed(self) -> list[int]:
        """Times whose assignment probabilities enter some row's weight."""
        starts = set(int(t) for t in self.frame["t"].unique())
        return sorted({t + lag for t in starts for lag in range(self.delta)})

    def analysis_rows(self) -> pd.DataFrame:
        """Rows entering estimation: trial-eligible with an observed outcome."""
        f = self.frame
        return f[(f["eligible"] == 1) & f["y"].notna()]

    def trial_counts(self) -> dict[int, int]:
        rows = self.frame[self.frame["eligible"] == 1]
        counts = rows.groupby("t").size()
        return {int(t): int(counts.get(t, 0)) for t in sorted(self.frame["t"].unique())}

    def to_csv(self, target=None, comments: Sequence[str] = ()) -> str | None:
        buf = io.StringIO()
        for line in comments:
            buf.write(f"# {line}\n")
        extra = [c for c in self.feature_names if c not in BASE_COLUMNS]
        cols = list(BASE_COLUMNS) + extra
        out = self.frame.reindex(columns=cols)
        out.to_csv(buf, index=False, lineterminator="\n", float_format="%.9g")
        text = buf.getvalue()
        if target is None:
            return text
        with open(target, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        return None


def stack_person_trials(
    dataset: Dataset,
    eligibility: EligibilitySpec,
    delta: int,
    features: Mapping[str, FeatureFn] | None = None,
    times: Sequence[int] | None = None,
) -> PersonTrialTable:
    """One row per subject and enrollment time t = 0..T-delta+1 (optionally only ``times``)."""
    T = dataset.horizon
    if delta < 1:
        raise ValidationError("delta must be at least 1")
    if delta > T + 1:
        raise ValidationError(f"delta={delta} exceeds the horizon: Y_(t+delta) needs t + delta <= T + 1 = {T + 1}")
    if len(dataset) == 0:
        raise NoDataError("dataset has no subjects")
    trial_times = list(range(T - delta + 2))
    if times is not None:
        bad = [t for t in times if t not in trial_times]
        if bad:
            raise ValidationError(f"enrollment times {bad} outside 0..{T - delta + 1}")
        trial_times = sorted(set(int(t) for t in times))
    features = dict(features or {})
    names = ("intercept", "t") + tuple(n for n in features if n not in ("intercept", "t"))

    A = np.array([tr.treatments for tr in dataset], dtype=np.int64)
    S = np.array([tr.availability for tr in dataset], dtype=np.int64)

    records = []
    for s, tr in enumerate(dataset):
        for t in trial_times:
            h = history_at(tr, t)
            eligible = eligibility.eligible(h)
            y = tr.outcomes[t + delta]
            row = {"subject": s, "t": t, "eligible": eligible, "a_t": tr.treatments[t],
                   "y": math.nan if y is None else float(y), "weight": math.nan, "j_weight": math.nan,
                   "intercept": 1.0, "t_value": float(t)}
            usable = eligible and y is not None
            for name, fn in features.items():
                if name not in ("intercept", "t"):
                    row[name] = float(fn(h)) if usable else math.nan
            records.append(row)
    frame = pd.DataFrame.from_records(records)
    return PersonTrialTable(frame, delta, T, names, A, S, dataset)


def _column(frame: pd.DataFrame, name: str) -> np.ndarray:
    return frame["t_value" if name == "t" else name].to_numpy(dtype=float)


# ------------------------------------------------------------- propensities


@dataclass
class PropensityModel:
    """Per-time logistic laws of A_t given features of H_t, fit on available rows."""

    coefficients: dict[int, np.ndarray]
    std_errors: dict[int, np.ndarray]
    feature_map: Callable[[History], Sequence[float]] | None
    converged: dict[int, bool]
    iterations: dict[int, int]
    horizon: int
    fitted: bool = True

    def design(self, history: History) -> np.ndarray:
        if self.feature_map is None:
            return np.ones(1)
        return np.atleast_1d(np.asarray(self.feature_map(history), dtype=float))

    def probability(self, history: History, available: int = 1) -> float:
        if not available:
            return 0.0
        coef = self.coefficients.get(history.time)
        if coef is None:
            raise ValidationError(f"no propensity model was fit at t={history.time}")
        return float(expit(self.design(history) @ coef))

    def offsets(self) -> dict[int, slice]:
        out, start = {}, 0
        for t in sorted(self.coefficients):
            d = len(self.coefficients[t])
            out[t] = slice(start, start + d)
            start += d
        return out

    @property
    def n_params(self) -> int:
        return sum(len(c) for c in self.coefficients.values())


def _design_by_time(table: PersonTrialTable, model: PropensityModel) -> dict[int, np.ndarray]:
    """Propensity features per time, zero rows where treatment is unavailable."""
    out = {}
    n = table.n_subjects
    for t, coef in model.coefficients.items():
        Z = np.zeros((n, len(coef)))
        for s in np.flatnonzero(table.availability[:, t]):
            Z[s] = model.design(table.history(s, t))
        out[t] = Z
    return out


def _logistic_fit(Z: np.ndarray, y: np.ndarray, t: int) -> tuple[np.ndarray, np.ndarray, bool, int]:
    if y.min() == y.max():
        raise SeparationError(f"A_{t} is {int(y[0])} on every available row: the logistic MLE does not exist")
    if np.linalg.matrix_rank(Z) < Z.shape[1]:
        raise RankDeficiencyError(f"propensity features at t={t} are collinear")
    n = len(y)
    coef = np.zeros(Z.shape[1])

    def loglik(c):
        eta = Z @ c
        return float(np.sum(y * eta - np.logaddexp(0.0, eta)))

    converged, it = False, 0
    for it in range(MAX_ITER + 1):
        eta = Z @ coef
        if np.max(np.abs(eta)) > ETA_SEPARATION:
            raise SeparationError(f"propensity fit at t={t} diverges (|logit| > {ETA_SEPARATION:g}): monotone likelihood")
        p = expit(eta)
        grad = Z.T @ (y - p)
        if np.max(np.abs(grad)) / n <= SCORE_TOL:
            converged = True
            break
        if it == MAX_ITER:
            break
        info = (Z * (p * (1 - p))[:, None]).T @ Z
        step = np.linalg.solve(info, grad)
        f0, scale = loglik(coef), 1.0
        while scale > 1e-10:
            cand = coef + scale * step
            if loglik(cand) >= f0 - 1e-12 * abs(f0):
                break
            scale /= 2
        coef = cand
    p = expit(Z @ coef)
    info = (Z * (p * (1 - p))[:, None]).T @ Z
    se = np.sqrt(np.diag(np.linalg.inv(info)))
    return coef, se, converged, it


def fit_propensities(
    dataset: Dataset,
    feature_map: Callable[[History], Sequence[float]] | None = None,
    times: Sequence[int] | None = None,
) -> PropensityModel:
    """Maximum-likelihood logistic fit of A_t on ``feature_map(H_t)`` at every time with available rows.

    ``feature_map=None`` means an intercept only. Non-convergence after 100
    iterations is flagged in ``converged`` rather than raised.
    """
    T = dataset.horizon
    if len(dataset) == 0:
        raise NoDataError("dataset has no subjects")
    A = np.array([tr.treatments for tr in dataset], dtype=float)
    S = np.array([tr.availability for tr in dataset], dtype=bool)
    coefs, ses, conv, iters = {}, {}, {}, {}
    for t in range(T + 1) if times is None else times:
        rows = np.flatnonzero(S[:, t])
        if rows.size == 0:
            continue
        if feature_map is None:
            Z = np.ones((rows.size, 1))
        else:
            Z = np.array([np.atleast_1d(np.asarray(feature_map(history_at(dataset[s], t)), dtype=float)) for s in rows])
        coefs[t], ses[t], conv[t], iters[t] = _logistic_fit(Z, A[rows, t], t)
    return PropensityModel(coefs, ses, feature_map, conv, iters, T)


# ----------------------------------------------------------------- weights


def compute_weights(
    table: PersonTrialTable,
    propensities: PropensityModel | Protocol,
    truncation: float | None = None,
) -> PersonTrialTable:
    """Attach w = W_t * J_t to every row; ``truncation`` clips p into [eps, 1 - eps] and is recorded."""
    if truncation is not None and not 0.0 < truncation < 0.5:
        raise ValidationError("truncation epsilon must lie in (0, 0.5)")
    A, S = table.treatments, table.availability
    n, width = A.shape
    is_model = isinstance(propensities, PropensityModel)
    times = set(table.times_needed())
    if is_model:
        times |= set(propensities.coefficients)
    P = np.full((n, width), np.nan)
    for t in sorted(times):
        P[:, t] = 0.0
        for s in np.flatnonzero(S[:, t]):
            P[s, t] = propensities.probability(table.history(s, t), 1)
    if truncation is not None:
        P = np.where(S == 1, np.clip(P, truncation, 1.0 - truncation), P)

    frame = table.frame.copy()
    subj = frame["subject"].to_numpy()
    tt = frame["t"].to_numpy()
    eligible = frame["eligible"].to_numpy() == 1
    a_t = A[subj, tt]
    p_t = P[subj, tt]
    observed = np.where(a_t == 1, p_t, 1.0 - p_t)
    bad = eligible & (observed <= 0)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise PositivityError(f"P(A_t = {a_t[i]}) = 0 at subject {subj[i]}, t={tt[i]}")
    with np.errstate(divide="ignore"):
        W = np.where(eligible, 1.0 / np.where(observed > 0, observed, 1.0), 0.0)
    J = np.ones(len(frame))
    for lag in range(1, table.delta):
        j = tt + lag
        a_j, p_j = A[subj, j], P[subj, j]
        untreated = a_j == 0
        zero_den = eligible & untreated & (p_j >= 1.0)
        if zero_den.any():
            i = int(np.flatnonzero(zero_den)[0])
            raise PositivityError(f"1 - p_{j[i]} = 0 in the follow-up weight at subject {subj[i]}, t={tt[i]}")
        J *= np.where(untreated, 1.0 / np.where(p_j < 1.0, 1.0 - p_j, 1.0), 0.0)
    frame["p_t"] = p_t
    frame["j_weight"] = np.where(eligible, J, np.nan)
    frame["weight"] = np.where(eligible, W * J, np.nan)

    design = _design_by_time(table, propensities) if is_model else None
    return replace(
        table,
        frame=frame,
        probabilities=P,
        propensity_source="estimated" if is_model else "known",
        propensity_model=propensities if is_model else None,
        propensity_design=design,
        truncation=truncation,
    )


# -------------------------------------------------------------- outcome fit


@dataclass(frozen=True)
class ExcursionModel:
    """Names of the blip features f (multiplied by A_t) and the nuisance features g."""

    blip: tuple[str, ...] = ("intercept",)
    nuisance: tuple[str, ...] = ("intercept",)

    def __post_init__(self):
        if not self.blip:
            raise ValidationError("the blip design needs at least one feature")

    @property
    def names(self) -> list[str]:
        return [f"alpha_{n}" for n in self.nuisance] + [f"beta_{n}" for n in self.blip]


@dataclass
class EstimationResult:
    names: list[str]
    estimates: np.ndarray
    covariance: np.ndarray
    n_alpha: int
    n_person_trials: int
    n_subjects: int
    iterations: int
    max_abs_mean_score: float
    propensity_mode: str
    truncation: float | None = None
    se_fixed_weights: np.ndarray | None = None
    trial_counts: dict = field(default_factory=dict)

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def alpha_hat(self) -> np.ndarray:
        return self.estimates[: self.n_alpha]

    @property
    def beta_hat(self) -> np.ndarray:
        return self.estimates[self.n_alpha :]

    @property
    def beta_se(self) -> np.ndarray:
        return self.std_errors[self.n_alpha :]

    def coefficient(self, name: str) -> tuple[float, float]:
        i = self.names.index(name)
        return float(self.estimates[i]), float(self.std_errors[i])

    def diagnostics(self) -> list[str]:
        lines = [
            f"propensities={self.propensity_mode}",
            f"truncation={'none' if self.truncation is None else format(self.truncation, '.9g')}",
            f"n_subjects={self.n_subjects}",
            f"n_person_trials={self.n_person_trials}",
            "trial_counts=" + ";".join(f"{t}:{c}" for t, c in sorted(self.trial_counts.items())),
            f"newton_iterations={self.iterations}",
            f"max_abs_mean_score={self.max_abs_mean_score:.9g}",
        ]
        if self.se_fixed_weights is not None:
            diff = self.se_fixed_weights - self.std_errors
            lines.append(
                "se_reduction_from_estimated_propensities="
                + ";".join(f"{n}:{d:.9g}" for n, d in zip(self.names, diff))
            )
        return lines

    def to_csv(self, comments: Sequence[str] = ()) -> str:
        lines = [f"# {c}" for c in comments]
        lines += [f"# {d}" for d in self.diagnostics()]
        lines.append("name,estimate,se")
        for n, e, s in zip(self.names, self.estimates, self.std_errors):
            lines.append(f"{n},{e:.9g},{s:.9g}")
        return "\n".join(lines) + "\n"


def _poisson_objective(X, y, w, theta):
    eta = np.clip(X @ theta, -700.0, 700.0)
    return float(np.sum(w * (y * eta - np.exp(eta))))


def _solve_log_link(X: np.ndarray, y: np.ndarray, w: np.ndarray, start: np.ndarray, scale: float):
    """Damped Newton for sum w (y - exp(X theta)) X = 0; stops when max |score| / scale <= 1e-10."""
    theta = start.astype(float).copy()
    for it in range(MAX_ITER + 1):
        mu = np.exp(np.clip(X @ theta, -700.0, 700.0))
        score = X.T @ (w * (y - mu))
        if np.max(np.abs(score)) / scale <= SCORE_TOL:
            return theta, it, float(np.max(np.abs(score)) / scale)
        if it == MAX_ITER:
            break
        H = (X * (w * mu)[:, None]).T @ X
        step = np.linalg.solve(H, score)
        f0, s = _poisson_objective(X, y, w, theta), 1.0
        while s > 1e-10:
            cand = theta + s * step
            f1 = _poisson_objective(X, y, w, cand)
            if math.isfinite(f1) and f1 >= f0 - 1e-12 * abs(f0):
                break
            s /= 2
        theta = cand
    raise ConvergenceError(f"log-link Newton did not converge in {MAX_ITER} iterations")


def fit_excursion_model(table: PersonTrialTable, model: ExcursionModel = ExcursionModel()) -> EstimationResult:
    if table.propensity_source is None:
        raise ValidationError("compute_weights must run before fitting")
    for name in model.blip + model.nuisance:
        if name not in table.feature_names:
            raise ValidationError(f"unknown feature {name!r}; available: {', '.join(table.feature_names)}")
    rows = table.analysis_rows()
    rows = rows[rows["weight"] > 0]
    if rows.empty:
        raise NoDataError("no eligible person-trial rows with an observed outcome and positive weight")
    y = rows["y"].to_numpy(dtype=float)
    w = rows["weight"].to_numpy(dtype=float)
    a = rows["a_t"].to_numpy(dtype=float)
    G = np.column_stack([_column(rows, n) for n in model.nuisance]) if model.nuisance else np.zeros((len(rows), 0))
    F = np.column_stack([_column(rows, n) for n in model.blip])
    X = np.hstack([G, a[:, None] * F])
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise RankDeficiencyError("the stacked (nuisance, treatment x blip) design is not of full column rank")
    n = table.n_subjects

    # alpha from an unweighted log-linear fit, beta from zero
    start = np.zeros(X.shape[1])
    if G.shape[1]:
        start[: G.shape[1]], _, _ = _solve_log_link(G, y, np.ones_like(y), np.zeros(G.shape[1]), n)
    theta, iterations, max_score = _solve_log_link(X, y, w, start, n)

    mu = np.exp(X @ theta)
    resid = w * (y - mu)
    subj = rows["subject"].to_numpy()
    psi = np.zeros((n, X.shape[1]))
    np.add.at(psi, subj, X * resid[:, None])
    bread = (X * (w * mu)[:, None]).T @ X
    inv = np.linalg.inv(bread)
    cov_fixed = inv @ (psi.T @ psi) @ inv.T

    se_fixed = None
    cov = cov_fixed
    if table.propensity_source == "estimated":
        cov = _stacked_covariance(table, rows, X, resid, mu, w, psi, bread)
        se_fixed = np.sqrt(np.diag(cov_fixed))
    cov = (cov + cov.T) / 2.0
    return EstimationResult(
        names=model.names,
        estimates=theta,
        covariance=cov,
        n_alpha=G.shape[1],
        n_person_trials=len(rows),
        n_subjects=n,
        iterations=iterations,
        max_abs_mean_score=max_score,
        propensity_mode=table.propensity_source,
        truncation=table.truncation,
        se_fixed_weights=se_fixed,
        trial_counts=table.trial_counts(),
    )


def _stacked_covariance(table, rows, X, resid, mu, w, psi_out, bread_out) -> np.ndarray:
    """Sandwich for (gamma, alpha, beta) with the logistic propensity scores stacked on top."""
    model: PropensityModel = table.propensity_model
    Zs = table.propensity_design
    A, S, P = table.treatments, table.availability, table.probabilities
    n = table.n_subjects
    off = model.offsets()
    q, d = model.n_params, X.shape[1]

    psi_prop = np.zeros((n, q))
    bread_prop = np.zeros((q, q))
    for t, sl in off.items():
        Z = Zs[t]
        r = S[:, t] * (A[:, t] - P[:, t])
        psi_prop[:, sl] = Z * r[:, None]
        bread_prop[sl, sl] = (Z * (S[:, t] * P[:, t] * (1 - P[:, t]))[:, None]).T @ Z

    # d log w / d gamma for each analysis row
    subj = rows["subject"].to_numpy()
    tt = rows["t"].to_numpy()
    dlogw = np.zeros((len(rows), q))
    for t, sl in off.items():
        at_t = tt == t
        if at_t.any():
            s = subj[at_t]
            dlogw[at_t, sl] += -(A[s, t] - P[s, t])[:, None] * Zs[t][s]
        for lag in range(1, table.delta):
            hit = tt + lag == t
            if hit.any():
                s = subj[hit]
                dlogw[hit, sl] += (S[s, t] * P[s, t])[:, None] * Zs[t][s]
    cross = X.T @ (resid[:, None] * dlogw)  # d psi_out / d gamma

    M = np.zeros((q + d, q + d))
    M[:q, :q] = bread_prop
    M[q:, q:] = bread_out
    M[q:, :q] = -cross
    psi = np.hstack([psi_prop, psi_out])
    Minv = np.linalg.inv(M)
    full = Minv @ (psi.T @ psi) @ Minv.T
    return full[q:, q:]


# ------------------------------------------------------------ end to end


def emulate_series(
    dataset: Dataset,
    eligibility: EligibilitySpec,
    delta: int,
    model: ExcursionModel = ExcursionModel(),
    propensity_mode: str = "known",
    protocol: Protocol | None = None,
    feature_map: Callable[[History], Sequence[float]] | None = None,
    features: Mapping[str, FeatureFn] | None = None,
    times: Sequence[int] | None = None,
    truncation: float | None = None,
) -> EstimationResult:
    """stack -> (fit propensities) -> weights -> log-link fit."""
    table = stack_person_trials(dataset, eligibility, delta, features=features, times=times)
    if propensity_mode == "known":
        if protocol is None:
            raise ValidationError("known propensities need the protocol")
        source: PropensityModel | Protocol = protocol
    elif propensity_mode == "estimated":
        source = fit_propensities(dataset, feature_map)
    else:
        raise ValidationError(f"propensity mode must be 'known' or 'estimated', got {propensity_mode!r}")
    return fit_excursion_model(compute_weights(table, source, truncation), model)
