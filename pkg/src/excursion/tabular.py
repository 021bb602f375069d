"""Finite-state DGPs from plain-text probability tables.

Grammar (one statement per line, ``#`` starts a comment)::

    horizon = 2               # required, T
    absorbing = false         # optional; true makes Y_k = 1 once any Y_j = 1

    [covariate 1]             # law of X_1; omit a time to record no covariate
    support = 0, 1            # optional, default "0, 1"
    history = a0=1, x0=0; prob = 0.3, 0.7
    history = *;          prob = 0.5, 0.5

    [outcome 3]               # law of the endpoint Y_3, support is always 0, 1
    history = a1=1, a2=1; prob = 0.25, 0.75
    history = *;          prob = 0.75, 0.25

    [availability 0]          # I*_0; must be degenerate, default always 1
    history = *; prob = 1, 0

    [eligibility 2]           # trial rule on top of availability, default 1
    history = a1=1; prob = 1, 0
    history = *;    prob = 0, 1

    [protocol 1]              # P(A_1 = 0), P(A_1 = 1); read by load_tabular_protocol
    history = *; prob = 0.5, 0.5

``prob`` lists the probability of each support value in order and must sum to
one within 1e-9. ``history`` is ``*`` or a comma-separated list of ``a<j>``,
``x<j>``, ``y<j>`` assignments; the first matching row wins and every
combination of the referenced variables must be matched by some row. A table
at time t may reference A_j for j < t; X_j and Y_j for j < t in covariate
tables, X_j for j <= t and Y_j for j < t in outcome tables, and X_j, Y_j for
j <= t elsewhere. Numbers are parsed with ``float`` so the format does not
depend on the locale.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

from .dgp import PROB_TOL, Dgp, Discrete
from .errors import IncompleteTableError, ParseError, ProbabilitySumError, ValidationError
from .trajectories import EligibilitySpec, History, Protocol

__all__ = ["TabularConfig", "load_tabular_dgp", "load_tabular_protocol", "parse_tabular"]

KINDS = ("covariate", "outcome", "availability", "eligibility", "protocol")
BINARY = (0.0, 1.0)
_SECTION = re.compile(r"^\[\s*([a-z]+)\s+(\d+)\s*\]$")
_VAR = re.compile(r"^([axy])(\d+)$")


@dataclass
class Table:
    kind: str
    time: int
    support: tuple[float, ...] = BINARY
    rows: list[tuple[tuple[tuple[str, int, float], ...], tuple[float, ...]]] = field(default_factory=list)
    line: int = 0

    def lookup(self, a, x, y) -> tuple[float, ...]:
        prefix = {"a": a, "x": x, "y": y}
        for constraints, probs in self.rows:
            if all(prefix[k][j] == v for k, j, v in constraints):
                return probs
        raise IncompleteTableError(f"[{self.kind} {self.time}] has no row for this history")


@dataclass
class TabularConfig:
    horizon: int
    absorbing: bool
    tables: dict[tuple[str, int], Table]


def _read(config) -> str:
    if isinstance(config, Path):
        return config.read_text(encoding="utf-8")
    return str(config)


def parse_tabular(config: str | Path) -> TabularConfig:
    text = _read(config)
    horizon = None
    absorbing = False
    tables: dict[tuple[str, int], Table] = {}
    current: Table | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _SECTION.match(line)
        if m:
            kind, t = m.group(1), int(m.group(2))
            if kind not in KINDS:
                raise ParseError(f"line {lineno}: unknown section kind {kind!r}")
            if (kind, t) in tables:
                raise ParseError(f"line {lineno}: duplicate section [{kind} {t}]")
            current = tables[(kind, t)] = Table(kind, t, line=lineno)
            continue
        if current is None:
            key, value = _split_kv(line, lineno)
            if key == "horizon":
                try:
                    horizon = int(value)
                except ValueError:
                    raise ParseError(f"line {lineno}: horizon must be an integer") from None
            elif key == "absorbing":
                if value.lower() not in ("true", "false"):
                    raise ParseError(f"line {lineno}: absorbing must be true or false")
                absorbing = value.lower() == "true"
            else:
                raise ParseError(f"line {lineno}: unknown setting {key!r}")
            continue
        if line.startswith("support"):
            key, value = _split_kv(line, lineno)
            if current.kind != "covariate":
                raise ParseError(f"line {lineno}: only covariate tables declare a support")
            if current.rows:
                raise ParseError(f"line {lineno}: support must precede the rows")
            current.support = tuple(_floats(value, lineno))
            if len(set(current.support)) != len(current.support):
                raise ParseError(f"line {lineno}: repeated support value")
            continue
        current.rows.append(_parse_row(line, lineno))
    if horizon is None:
        raise ParseError("missing 'horizon = T' setting")
    config_ = TabularConfig(horizon, absorbing, tables)
    _validate(config_)
    return config_


def _split_kv(text: str, lineno: int) -> tuple[str, str]:
    if "=" not in text:
        raise ParseError(f"line {lineno}: expected 'key = value'")
    key, value = text.split("=", 1)
    return key.strip().lower(), value.strip()


def _floats(text: str, lineno: int) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise ParseError(f"line {lineno}: cannot parse numbers in {text!r}") from None


def _parse_row(line: str, lineno: int):
    parts = [p.strip() for p in line.split(";") if p.strip()]
    fields = dict(_split_kv(p, lineno) for p in parts)
    if set(fields) != {"history", "prob"}:
        raise ParseError(f"line {lineno}: rows need exactly 'history=...; prob=...'")
    constraints = []
    pattern = fields["history"]
    if pattern != "*":
        for item in pattern.split(","):
            name, value = _split_kv(item, lineno)
            m = _VAR.match(name)
            if not m:
                raise ParseError(f"line {lineno}: bad history variable {name!r}")
            try:
                constraints.append((m.group(1), int(m.group(2)), float(value)))
            except ValueError:
                raise ParseError(f"line {lineno}: bad value {value!r}") from None
    return tuple(constraints), tuple(_floats(fields["prob"], lineno))


def _allowed(kind: str, t: int, var: str, j: int) -> bool:
    if var == "a":
        return j < t
    if kind == "covariate":
        return j < t
    if kind == "outcome":
        return j <= t if var == "x" else j < t
    return j <= t


def _validate(cfg: TabularConfig) -> None:
    T = cfg.horizon
    if T < 0:
        raise ValidationError("horizon must be non-negative")
    limits = {"covariate": (0, T + 1), "outcome": (1, T + 1)}
    endpoints = {t for (k, t) in cfg.tables if k == "outcome"}
    for (kind, t), table in cfg.tables.items():
        lo, hi = limits.get(kind, (0, T))
        if not lo <= t <= hi:
            raise ValidationError(f"[{kind} {t}] outside {lo}..{hi} for horizon {T}")
        if not table.rows:
            raise IncompleteTableError(f"[{kind} {t}] has no rows")
        support = table.support
        referenced: dict[tuple[str, int], tuple[float, ...]] = {}
        for constraints, probs in table.rows:
            if len(probs) != len(support):
                raise ParseError(f"[{kind} {t}] row lists {len(probs)} probabilities for {len(support)} support values")
            if any(p < 0 or p > 1 for p in probs):
                raise ValidationError(f"[{kind} {t}] probability outside [0, 1]: {probs}")
            if abs(sum(probs) - 1.0) > PROB_TOL:
                raise ProbabilitySumError(f"[{kind} {t}] row {probs} sums to {sum(probs)!r}, not 1")
            if kind in ("availability", "eligibility") and probs not in ((1.0, 0.0), (0.0, 1.0)):
                raise ValidationError(f"[{kind} {t}] must be deterministic, got {probs}")
            for var, j, value in constraints:
                if not _allowed(kind, t, var, j):
                    raise ValidationError(f"[{kind} {t}] may not reference {var}{j}")
                if var == "x":
                    cov = cfg.tables.get(("covariate", j))
                    if cov is None:
                        raise ValidationError(f"[{kind} {t}] references x{j} but X_{j} is not recorded")
                    dom = cov.support
                elif var == "y":
                    if j not in endpoints:
                        raise ValidationError(f"[{kind} {t}] references y{j} but Y_{j} is not an endpoint")
                    dom = BINARY
                else:
                    dom = BINARY
                if value not in dom:
                    raise ValidationError(f"[{kind} {t}] value {var}{j}={value} outside its support")
                referenced[(var, j)] = dom
        names = sorted(referenced)
        for combo in itertools.product(*(referenced[n] for n in names)):
            assignment = dict(zip(names, combo))
            if not any(all(assignment[(v, j)] == val for v, j, val in c) for c, _ in table.rows):
                shown = ", ".join(f"{v}{j}={val:g}" for (v, j), val in assignment.items())
                raise IncompleteTableError(f"[{kind} {t}] has no row for {shown}")


def load_tabular_dgp(config: str | Path) -> Dgp:
    cfg = config if isinstance(config, TabularConfig) else parse_tabular(config)
    tables = cfg.tables
    endpoints = tuple(sorted(t for (k, t) in tables if k == "outcome"))

    @lru_cache(maxsize=None)
    def law(t: int, support: tuple[float, ...], probs: tuple[float, ...]) -> Discrete:
        return Discrete(support, probs)

    def covariate(t, a, x, y):
        table = tables.get(("covariate", t))
        if table is None:
            return None
        return law(t, table.support, table.lookup(a, x, y))

    def outcome(k, a, x, y):
        return tables[("outcome", k)].lookup(a, x, y)[1]

    def rule(kind: str):
        def fn(h: History) -> int:
            table = tables.get((kind, h.time))
            if table is None:
                return 1
            return int(table.lookup(h.past_treatments, h.past_covariates, h.past_outcomes)[1])

        return fn

    protocol = _protocol_from(cfg)
    return Dgp(
        horizon=cfg.horizon,
        outcome=outcome,
        endpoints=endpoints,
        covariate=covariate,
        eligibility=EligibilitySpec(rule("availability"), rule("eligibility")),
        absorbing=cfg.absorbing,
        default_protocol=protocol,
        name="tabular",
    )


def _protocol_from(cfg: TabularConfig) -> Protocol | None:
    times = sorted(t for (k, t) in cfg.tables if k == "protocol")
    if not times:
        return None
    missing = set(range(cfg.horizon + 1)) - set(times)
    if missing:
        raise IncompleteTableError(f"protocol tables missing for t in {sorted(missing)}")

    def prob(h: History) -> float:
        table = cfg.tables[("protocol", h.time)]
        return table.lookup(h.past_treatments, h.past_covariates, h.past_outcomes)[1]

    return Protocol(prob, horizon=cfg.horizon, name="tabular")


def load_tabular_protocol(config: str | Path) -> Protocol | None:
    """The ``[protocol t]`` tables of a config, or ``None`` if it has none."""
    cfg = config if isinstance(config, TabularConfig) else parse_tabular(config)
    return _protocol_from(cfg)
