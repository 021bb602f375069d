"""Search for a joint law realizing prescribed multiplicative blips.

The probe model is a small binary SRE: treatments A_0..A_T, a binary
covariate X_m before each A_m for m >= 1, and one binary endpoint Y_{T+1}.
Targets fix gamma_{m,k}(H_m) with g = 0 and k = T + 1 to a common value for
every history H_m; an optional ``baseline`` pins E{Y_k(0, ..., 0)}.

Under homogeneous blips E{Y_k(a)} = baseline * exp(sum_m gamma_m a_m) for
every static path a, so a pinned baseline with
baseline * exp(sum_m max(gamma_m, 0)) > 1 forces a Bernoulli mean above one.
That is the infeasibility certificate. Otherwise the law is searched for
numerically and the result re-checked with the g-formula oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.optimize import least_squares
from scipy.special import expit

from .dgp import Dgp, Discrete
from .errors import ValidationError
from .oracle import counterfactual_mean, regime_blip
from .trajectories import Protocol, Regime, Summary

__all__ = ["ProbeResult", "variation_independence_probe"]


@dataclass
class ProbeResult:
    status: str  # "feasible", "infeasible" or "not-converged"
    max_residual: float
    dgp: Dgp | None = None
    protocol: Protocol | None = None
    covariate_probs: dict | None = None
    outcome_probs: dict | None = None
    certificate: dict | None = None
    nfev: int = 0

    @property
    def feasible(self) -> bool:
        return self.status == "feasible"


class _ProbeModel:
    def __init__(self, horizon: int):
        self.T = horizon
        # hist[m]: keys (a_0, x_1, a_1, ..., x_m) of length 2m
        self.hist = [[()]]
        for m in range(1, horizon + 1):
            self.hist.append([h + (a, x) for h in self.hist[-1] for a in (0, 1) for x in (0, 1)])
        self.cov_keys = [[h + (a,) for h in self.hist[m - 1] for a in (0, 1)] for m in range(1, horizon + 1)]
        self.out_keys = [h + (a,) for h in self.hist[horizon] for a in (0, 1)]
        keys = [k for block in self.cov_keys for k in block] + self.out_keys
        self.index = {("x", k) if len(k) < 2 * horizon + 1 else ("y", k): i for i, k in enumerate(keys)}
        self.size = len(keys)

    def tables(self, probs: np.ndarray) -> tuple[dict, dict]:
        cov = {k: float(probs[self.index[("x", k)]]) for block in self.cov_keys for k in block}
        out = {k: float(probs[self.index[("y", k)]]) for k in self.out_keys}
        return cov, out

    def recursion(self, probs: np.ndarray) -> tuple[list[dict], list[dict]]:
        """D(H_m) = E{Y(A_bar_{m-1}, 0, 0..)|H_m} and U(H_m) = E{Y(A_bar_{m-1}, 1, 0..)|H_m}."""
        T = self.T
        idx = self.index
        D = [dict() for _ in range(T + 1)]
        U = [dict() for _ in range(T + 1)]
        for h in self.hist[T]:
            D[T][h] = probs[idx[("y", h + (0,))]]
            U[T][h] = probs[idx[("y", h + (1,))]]
        for m in range(T - 1, -1, -1):
            for h in self.hist[m]:
                vals = []
                for a in (0, 1):
                    px = probs[idx[("x", h + (a,))]]
                    vals.append((1.0 - px) * D[m + 1][h + (a, 0)] + px * D[m + 1][h + (a, 1)])
                D[m][h], U[m][h] = vals
        return D, U

    def to_dgp(self, probs: np.ndarray) -> Dgp:
        cov, out = self.tables(probs)
        T = self.T

        def key(a, x, upto):
            k = ()
            for j in range(upto):
                k += (a[j],) if j == 0 else (int(x[j]), a[j])
            return k

        def covariate(t, a, x, y):
            if t == 0 or t > T:
                return None
            k = (a[0],) if t == 1 else key(a, x, t - 1) + (int(x[t - 1]), a[t - 1])
            return Discrete.bernoulli(cov[k])

        def outcome(k_, a, x, y):
            return out[key(a, x, T) + (int(x[T]), a[T])] if T >= 1 else out[(a[0],)]

        return Dgp(horizon=T, outcome=outcome, endpoints=(T + 1,), covariate=covariate, name="probe")


def _certificate(targets: Mapping[int, float], baseline: float | None, k: int) -> dict | None:
    if baseline is None:
        return None
    if not 0.0 < baseline < 1.0:
        return {"reason": "baseline mean must lie in (0, 1) for finite blips", "baseline": baseline}
    path = tuple(int(targets.get(m, 0.0) > 0) for m in range(k))
    implied = baseline * math.exp(sum(g for g in targets.values() if g > 0))
    if implied > 1.0:
        return {
            "reason": "static path forces a Bernoulli mean above 1",
            "path": path,
            "implied_mean": implied,
            "baseline": baseline,
        }
    return None


def variation_independence_probe(
    targets: Mapping[tuple[int, int], float],
    model_size: int = 2,
    baseline: float | None = None,
    tol: float = 1e-6,
    max_nfev: int = 5000,
) -> ProbeResult:
    """Find a law on the binary model of horizon ``model_size`` matching every target blip.

    ``targets`` maps (m, delta) with m + delta = model_size + 1 to gamma_{m,k}.
    """
    T = int(model_size)
    if T < 0 or T > 3:
        raise ValidationError("the probe supports horizons 0..3")
    k = T + 1
    by_time: dict[int, float] = {}
    for (m, delta), value in targets.items():
        if m + delta != k or not 0 <= m <= T:
            raise ValidationError(f"target ({m}, {delta}) does not end at k={k}")
        if not math.isfinite(value):
            raise ValidationError(f"target ({m}, {delta}) is not finite")
        by_time[m] = float(value)

    cert = _certificate(by_time, baseline, k)
    if cert is not None:
        return ProbeResult("infeasible", math.inf, certificate=cert)

    model = _ProbeModel(T)
    times = sorted(by_time)

    def residuals(z: np.ndarray) -> np.ndarray:
        probs = expit(z)
        D, U = model.recursion(probs)
        res = [math.log(U[m][h]) - math.log(D[m][h]) - by_time[m] for m in times for h in model.hist[m]]
        if baseline is not None:
            res.append(D[0][()] - baseline)
        return np.asarray(res)

    z0 = np.zeros(model.size)
    if not times and baseline is None:
        fit_x, nfev = z0, 0
    else:
        fit = least_squares(residuals, z0, method="trf", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=max_nfev)
        fit_x, nfev = fit.x, fit.nfev
    probs = expit(fit_x)
    dgp = model.to_dgp(probs)
    protocol = Protocol.constant(0.5, horizon=T)

    # Independent check through the generic g-formula enumeration.
    worst = 0.0
    for m in times:
        table = regime_blip(dgp, protocol, Regime.never(), m, k, Summary(identity=True))
        worst = max(worst, max(abs(v - by_time[m]) for v in table.entries.values()))
    if baseline is not None:
        mean0 = counterfactual_mean(dgp, Regime.static((0,) * k), k)
        worst = max(worst, abs(mean0 - baseline))
    cov, out = model.tables(probs)
    status = "feasible" if worst <= tol else "not-converged"
    return ProbeResult(status, worst, dgp, protocol, cov, out, nfev=nfev)


def random_admissible_targets(rng: np.random.Generator, model_size: int = 2) -> tuple[dict, float | None]:
    k = model_size + 1
    gammas = rng.uniform(-1.0, 1.0, size=k)
    targets = {(m, k - m): float(g) for m, g in enumerate(gammas)}
    baseline = None
    if rng.random() < 0.5:
        cap = 0.9 * math.exp(-float(np.clip(gammas, 0, None).sum()))
        baseline = float(rng.uniform(0.05 * cap, cap))
    return targets, baseline


def out_of_range_targets(model_size: int = 2) -> list[tuple[dict, float]]:
    """Target sets whose pinned baseline pushes some static-path mean above one."""
    k = model_size + 1
    last = k - 1
    return [
        ({(last, 1): math.log(5.0)}, 0.5),
        ({(m, k - m): 1.0 for m in range(k)}, 0.2),
        ({(0, k): 3.0}, 0.1),
        ({(m, k - m): 0.5 for m in range(k)}, 0.3),
        ({(0, k): 2.0, (last, 1): -1.0}, 0.2),
    ]
