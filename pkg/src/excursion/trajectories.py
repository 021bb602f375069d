"""Longitudinal data model and the sequentially randomized experiment simulator.

Time runs over t = 0..T for treatments and t = 0..T+1 for covariates and
outcomes. Within one time point the order of events is

    X_t  ->  Y_t  ->  (I*_t, I_t)  ->  A_t

so the history H_t = (A_0..A_{t-1}, X_0..X_t, Y_0..Y_t) is everything recorded
before A_t is assigned. Endpoint Y_k is therefore affected by A_0..A_{k-1}, and
the trial outcome Y_{t,delta} is Y_{t+delta}.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Iterable, Iterator, Literal, Sequence

import numpy as np

from .errors import IdentificationError, PositivityError, UsageError, ValidationError

if TYPE_CHECKING:
    from .dgp import Dgp

__all__ = [
    "Dataset",
    "EligibilitySpec",
    "History",
    "Protocol",
    "Regime",
    "Summary",
    "Trajectory",
    "history_at",
    "regime_action",
    "simulate_sre",
    "subject_uniforms",
]

# Uniform slots consumed per (subject, t): covariate, outcome, treatment.
N_SLOTS = 3
# Subjects per uniform block, bounding memory for large n.
MAX_CHUNK = 8192


@dataclass(frozen=True)
class History:
    """H_t: the data recorded before treatment at time ``time`` is assigned."""

    time: int
    past_treatments: tuple[int, ...]
    past_covariates: tuple[float | None, ...]
    past_outcomes: tuple[int | None, ...]

    def __post_init__(self):
        t = self.time
        if (
            len(self.past_treatments) != t
            or len(self.past_covariates) != t + 1
            or len(self.past_outcomes) != t + 1
        ):
            raise ValidationError(f"inconsistent history lengths at t={t}")

    def value(self, kind: str, j: int):
        if kind == "a":
            seq = self.past_treatments
        elif kind == "x":
            seq = self.past_covariates
        elif kind == "y":
            seq = self.past_outcomes
        else:
            raise ValidationError(f"unknown history component {kind!r}")
        if not 0 <= j < len(seq):
            raise ValidationError(f"{kind}{j} is not part of H_{self.time}")
        return seq[j]

    @property
    def last_treatment(self) -> int:
        return self.past_treatments[-1] if self.past_treatments else 0


@dataclass(frozen=True)
class Trajectory:
    covariates: tuple[float | None, ...]
    treatments: tuple[int, ...]
    availability: tuple[int, ...]
    eligibility: tuple[int, ...]
    outcomes: tuple[int | None, ...]

    def __post_init__(self):
        T = len(self.treatments) - 1
        if not (
            len(self.covariates) == T + 2
            and len(self.outcomes) == T + 2
            and len(self.availability) == T + 1
            and len(self.eligibility) == T + 1
        ):
            raise ValidationError("trajectory component lengths disagree")
        for t in range(T + 1):
            if self.treatments[t] not in (0, 1):
                raise ValidationError(f"A_{t} must be binary")
            if self.availability[t] == 0 and self.treatments[t] == 1:
                raise ValidationError(f"A_{t}=1 while unavailable (I*_{t}=0)")

    @property
    def horizon(self) -> int:
        return len(self.treatments) - 1

    def endpoint(self, k: int) -> int | None:
        return self.outcomes[k]


def history_at(trajectory: Trajectory, t: int) -> History:
    T = trajectory.horizon
    if not 0 <= t <= T + 1:
        raise ValidationError(f"t={t} outside 0..{T + 1}")
    return History(
        time=t,
        past_treatments=trajectory.treatments[:t],
        past_covariates=trajectory.covariates[: t + 1],
        past_outcomes=trajectory.outcomes[: t + 1],
    )


def _always(history: History) -> int:
    return 1


@dataclass(frozen=True)
class EligibilitySpec:
    """Treatment availability I*_t and trial eligibility I_t as rules of H_t.

    Trial eligibility is only consulted where the subject is available, so
    I_t = 0 whenever I*_t = 0 holds by construction.
    """

    availability_rule: Callable[[History], int] = _always
    trial_eligibility_rule: Callable[[History], int] = _always

    def availability(self, history: History) -> int:
        return int(bool(self.availability_rule(history)))

    def eligible(self, history: History) -> int:
        if not self.availability(history):
            return 0
        return int(bool(self.trial_eligibility_rule(history)))

    @classmethod
    def unavailable_at(cls, times: Iterable[int]) -> "EligibilitySpec":
        blocked = frozenset(times)
        return cls(availability_rule=lambda h: h.time not in blocked)

    def excluding_recent_treatment(self) -> "EligibilitySpec":
        """Add the rule A_{t-1} = 1 => I_t = 0 on top of the current trial rule."""
        base = self.trial_eligibility_rule

        def rule(h: History) -> int:
            return int(base(h) and h.last_treatment == 0)

        return EligibilitySpec(self.availability_rule, rule)


@dataclass(frozen=True)
class Protocol:
    """Assignment probabilities p_t(H_t) of a sequentially randomized experiment."""

    prob: Callable[[History], float]
    horizon: int | None = None
    positive: bool = False
    name: str = "protocol"

    @classmethod
    def constant(cls, theta: float, horizon: int | None = None) -> "Protocol":
        if not 0.0 <= theta <= 1.0:
            raise ValidationError(f"assignment probability {theta} outside [0, 1]")
        return cls(lambda h: theta, horizon=horizon, positive=0.0 < theta < 1.0, name=f"constant({theta!r})")

    def probability(self, history: History, available: int = 1) -> float:
        """P(A_t = 1 | H_t); zero when treatment is unavailable."""
        if not available:
            return 0.0
        p = float(self.prob(history))
        if not 0.0 <= p <= 1.0 or math.isnan(p):
            raise ValidationError(f"protocol probability {p} at t={history.time} outside [0, 1]")
        if self.positive and not 0.0 < p < 1.0:
            raise PositivityError(f"protocol declared positive but p_{history.time}={p}")
        return p


RegimeKind = Literal["static-path", "deterministic-dynamic", "random-policy"]


@dataclass(frozen=True)
class Regime:
    """A treatment rule governing times >= ``start_time``.

    ``rule`` maps a history to an action in {0, 1}, or to P(A_t = 1) for a
    random policy.
    """

    kind: RegimeKind
    rule: Callable[[History], float]
    start_time: int = 0
    name: str = ""

    @classmethod
    def static(cls, actions: Sequence[int], start_time: int = 0) -> "Regime":
        path = tuple(int(a) for a in actions)
        if any(a not in (0, 1) for a in path):
            raise ValidationError(f"static path {path} is not binary")

        def rule(h: History) -> int:
            offset = h.time - start_time
            if not 0 <= offset < len(path):
                raise ValidationError(f"static path {path} from t={start_time} undefined at t={h.time}")
            return path[offset]

        return cls("static-path", rule, start_time, name="static" + "".join(map(str, path)))

    @classmethod
    def dynamic(cls, rule: Callable[[History], int], start_time: int = 0, name: str = "dynamic") -> "Regime":
        return cls("deterministic-dynamic", rule, start_time, name)

    @classmethod
    def random_policy(cls, rule: Callable[[History], float], start_time: int = 0, name: str = "random") -> "Regime":
        return cls("random-policy", rule, start_time, name)

    @classmethod
    def never(cls, start_time: int = 0) -> "Regime":
        return cls("static-path", lambda h: 0, start_time, name="never")

    @classmethod
    def carry_forward(cls, start_time: int = 0) -> "Regime":
        """g_t(H_t) = A_{t-1}."""
        return cls("deterministic-dynamic", lambda h: h.last_treatment, start_time, name="carry-forward")

    def then(self, action: int, at: int) -> "Regime":
        """Set a_t = ``action`` at time ``at`` and follow this regime afterwards."""
        inner = self.rule

        def rule(h: History) -> float:
            return action if h.time == at else inner(h)

        return Regime(self.kind, rule, at, name=f"{action}@{at}+{self.name}")

    def action_probability(self, history: History) -> float:
        value = float(self.rule(history))
        if self.kind == "random-policy":
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"random policy probability {value} outside [0, 1]")
            return value
        if value not in (0.0, 1.0):
            raise ValidationError(f"{self.kind} rule returned non-binary action {value}")
        return value


def regime_action(regime: Regime, history: History, draw: float | None = None) -> int:
    if history.time < regime.start_time:
        raise ValidationError(f"regime starts at t={regime.start_time}, history is at t={history.time}")
    if regime.kind == "random-policy":
        if draw is None:
            raise UsageError("random-policy regimes need a uniform draw")
        return int(draw < regime.action_probability(history))
    return int(regime.action_probability(history))


@dataclass(frozen=True)
class Summary:
    """A coarsening S_t of the history, built from named components like ``a1``."""

    components: tuple[tuple[str, int], ...] = ()
    identity: bool = False

    def __call__(self, history: History):
        if self.identity:
            return (history.past_treatments, history.past_covariates, history.past_outcomes)
        values = tuple(history.value(kind, j) for kind, j in self.components)
        return values[0] if len(values) == 1 else values

    @classmethod
    def parse(cls, text: str | None) -> "Summary":
        text = (text or "").strip().lower()
        if text in ("", "none", "empty"):
            return cls()
        if text in ("h", "history", "full"):
            return cls(identity=True)
        parts = []
        for token in text.split(","):
            token = token.strip()
            if len(token) < 2 or token[0] not in "axy" or not token[1:].isdigit():
                raise ValidationError(f"cannot parse summary component {token!r}")
            parts.append((token[0], int(token[1:])))
        return cls(tuple(parts))

    @property
    def name(self) -> str:
        if self.identity:
            return "h"
        if not self.components:
            return "none"
        return ",".join(f"{k}{j}" for k, j in self.components)

    def format_value(self, value) -> str:
        if self.identity:
            a, x, y = value
            return "a=" + "".join(map(str, a)) + ";x=" + ",".join(_fmt_opt(v) for v in x) + ";y=" + ",".join(_fmt_opt(v) for v in y)
        if not self.components:
            return "all"
        values = (value,) if len(self.components) == 1 else value
        return ";".join(f"{k}{j}={_fmt_opt(v)}" for (k, j), v in zip(self.components, values))


def _fmt_opt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


@dataclass(frozen=True)
class Dataset:
    horizon: int
    trajectories: tuple[Trajectory, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self) -> Iterator[Trajectory]:
        return iter(self.trajectories)

    def __getitem__(self, i: int) -> Trajectory:
        return self.trajectories[i]

    def treatments(self) -> np.ndarray:
        return np.array([tr.treatments for tr in self.trajectories], dtype=int)

    def to_csv(self, target=None, comments: Sequence[str] = ()) -> str | None:
        """Write one row per (subject, t). Floats are written losslessly."""
        buf = io.StringIO()
        for line in comments:
            buf.write(f"# {line}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["subject", "t", "x", "a", "istar", "i", "y"])
        T = self.horizon
        for s, tr in enumerate(self.trajectories):
            for t in range(T + 2):
                x = tr.covariates[t]
                y = tr.outcomes[t]
                treat = (tr.treatments[t], tr.availability[t], tr.eligibility[t]) if t <= T else ("", "", "")
                writer.writerow([s, t, "" if x is None else repr(float(x)), *treat, "" if y is None else y])
        text = buf.getvalue()
        if target is None:
            return text
        Path(target).write_text(text, encoding="utf-8", newline="")
        return None

    @classmethod
    def from_csv(cls, source) -> "Dataset":
        """Read from a path, or from CSV text (any string containing a newline)."""
        if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source):
            text = Path(source).read_text(encoding="utf-8")
        else:
            text = str(source)
        lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
        reader = csv.DictReader(lines)
        rows: dict[int, list[dict]] = {}
        for row in reader:
            rows.setdefault(int(row["subject"]), []).append(row)
        if not rows:
            return cls(horizon=0)
        trajectories = []
        horizon = None
        for s in sorted(rows):
            recs = sorted(rows[s], key=lambda r: int(r["t"]))
            T = len(recs) - 2
            if horizon is None:
                horizon = T
            elif T != horizon:
                raise ValidationError(f"subject {s} has horizon {T}, expected {horizon}")
            trajectories.append(
                Trajectory(
                    covariates=tuple(None if r["x"] == "" else float(r["x"]) for r in recs),
                    treatments=tuple(int(r["a"]) for r in recs[:-1]),
                    availability=tuple(int(r["istar"]) for r in recs[:-1]),
                    eligibility=tuple(int(r["i"]) for r in recs[:-1]),
                    outcomes=tuple(None if r["y"] == "" else int(r["y"]) for r in recs),
                )
            )
        return cls(horizon=horizon, trajectories=tuple(trajectories))


def _block_width(horizon: int) -> int:
    """Doubles reserved per subject: whole Philox blocks of four 64-bit outputs."""
    return 4 * math.ceil((horizon + 2) * N_SLOTS / 4)


def uniform_chunk(seed: int, start: int, stop: int, horizon: int) -> np.ndarray:
    """Uniforms for subjects start..stop-1, shape (stop-start, T+2, N_SLOTS).

    Philox is keyed by the seed and subject s owns counter blocks
    [s*w/4, (s+1)*w/4), so entry [s, t, slot] depends only on
    (seed, s, t, slot) and not on how subjects are chunked across threads.
    """
    if not 0 <= seed < 2**64 or not 0 <= start <= stop:
        raise ValidationError("seed must lie in [0, 2**64) and subject indices be non-negative")
    width = _block_width(horizon)
    gen = np.random.Generator(np.random.Philox(key=seed, counter=[start * width // 4, 0, 0, 0]))
    used = (horizon + 2) * N_SLOTS
    return gen.random((stop - start, width))[:, :used].reshape(stop - start, horizon + 2, N_SLOTS)


def subject_uniforms(seed: int, subject: int, horizon: int) -> np.ndarray:
    """Uniforms for one subject, shape (T+2, N_SLOTS)."""
    return uniform_chunk(seed, subject, subject + 1, horizon)[0]


def _simulate_subject(T: int, u: np.ndarray, cov_law, outcome_prob, avail, elig, assign) -> Trajectory:
    a: tuple[int, ...] = ()
    x: tuple[float | None, ...] = ()
    y: tuple[int | None, ...] = ()
    istar: list[int] = []
    ielig: list[int] = []
    for t in range(T + 2):
        law = cov_law(t, a, x, y)
        x = x + (None if law is None else float(law.sample(u[t, 0])),)
        q = outcome_prob(t, a, x, y)
        y = y + (None if q is None else int(u[t, 1] < q),)
        if t == T + 1:
            break
        h = History(t, a, x, y)
        s = avail(h)
        istar.append(s)
        ielig.append(elig(h))
        p = assign(h, s)
        a = a + (int(u[t, 2] < p),)
    return Trajectory(x, a, tuple(istar), tuple(ielig), y)


def simulate_sre(
    dgp: "Dgp",
    protocol: Protocol,
    eligibility: EligibilitySpec | None = None,
    n: int = 1,
    seed: int = 0,
    threads: int = 1,
) -> Dataset:
    """Draw ``n`` independent trajectories, alternating DGP draws and protocol draws."""
    if n < 1:
        raise ValidationError("n must be at least 1")
    if protocol.horizon is not None and protocol.horizon != dgp.horizon:
        raise ValidationError(f"protocol horizon {protocol.horizon} != DGP horizon {dgp.horizon}")
    eligibility = eligibility or dgp.eligibility
    T = dgp.horizon

    # Laws are pure functions of the prefix, so memoizing them is safe across threads.
    # Rules of H_t are left uncached: hashing a History costs more than most rules.
    cov_law = lru_cache(maxsize=None)(dgp.covariate_law)
    outcome_prob = lru_cache(maxsize=None)(dgp.outcome_probability)
    avail, elig, assign = eligibility.availability, eligibility.eligible, protocol.probability

    def run(chunk: range) -> list[Trajectory]:
        u = uniform_chunk(seed, chunk.start, chunk.stop, T)
        return [_simulate_subject(T, u[i], cov_law, outcome_prob, avail, elig, assign) for i in range(len(chunk))]

    threads = max(1, int(threads))
    size = min(math.ceil(n / threads), MAX_CHUNK)
    chunks = [range(i, min(i + size, n)) for i in range(0, n, size)]
    if threads == 1:
        parts = [run(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    return Dataset(horizon=T, trajectories=tuple(tr for part in parts for tr in part))


def check_identified(regime: Regime, history: History, available: int) -> float:
    """Regime probability of a_t = 1, refusing treatment where it is unavailable."""
    p = regime.action_probability(history)
    if p > 0 and not available:
        raise IdentificationError(
            f"regime {regime.name or regime.kind} requests a_{history.time}=1 where I*_{history.time}=0"
        )
    return p
