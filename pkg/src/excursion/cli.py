"""Command-line front end.

    excursion simulate       --dgp two-step --theta 0.5 --n 1000 --seed 1
    excursion oracle         --dgp two-step --theta 0.5 --t 2 --delta 1 --summary a1
    excursion estimate       --dgp two-step --theta 0.5 --n 20000 --propensities estimated
    excursion sweep-theta    --theta 0,0.25,0.5,0.75,1 --n 20000 --threads 4
    excursion sweep-modifier --theta 0.05,0.5,0.95 --x2=-2,-1,0,1,2
    excursion check          --seed 0 --config configs/faulty.dgp

Exit codes: 0 success, 1 validation error, 2 numerical or identification
error, 3 property-check failure.
"""

from __future__ import annotations

import argparse
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .batteries import SUITES, run_batteries
from .dgp import (
    EffectModifierParams,
    TwoStepParams,
    central_slope,
    effect_modifier_dgp,
    secondary_excursion_beta,
    two_step_closed_form_beta,
    two_step_dgp,
)
from .errors import NumericalError, UsageError, ValidationError
from .estimator import ExcursionModel, emulate_series, summary_features
from .oracle import EstimandSpec, excursion_blip
from .tabular import load_tabular_dgp
from .trajectories import Protocol, Summary, simulate_sre

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_PROPERTY = 0, 1, 2, 3
COMMANDS = ("simulate", "oracle", "estimate", "sweep-theta", "sweep-modifier", "check")
BUILTIN_DGPS = ("two-step", "effect-modifier", "tabular")
DEFAULT_THETA_GRID = tuple(round(i / 20, 2) for i in range(21))
DEFAULT_MODIFIER_THETAS = (0.05, 0.5, 0.95)
DEFAULT_X2_GRID = tuple(x / 2 for x in range(-4, 5))
EXECUTION_ONLY = ("threads", "out")


def fmt(v: float) -> str:
    return format(float(v), ".9g")


def parse_floats(text: str | None, what: str) -> tuple[float, ...]:
    if text is None:
        return ()
    items = [s.strip() for s in text.split(",") if s.strip()]
    try:
        return tuple(float(s) for s in items)
    except ValueError:
        raise ValidationError(f"cannot parse {what} list {text!r}") from None


@dataclass
class RunConfig:
    command: str
    dgp: str = "two-step"
    theta: tuple[float, ...] = ()
    delta: int = 1
    t: int | None = None
    summary: str = "none"
    n: int = 20000
    seed: int = 0
    threads: int = 1
    out: str | None = None
    config: tuple[str, ...] = ()
    propensities: str = "known"
    x2: tuple[float, ...] = ()
    suite: tuple[str, ...] = SUITES

    @classmethod
    def from_args(cls, ns: argparse.Namespace) -> "RunConfig":
        cfg = cls(
            command=ns.command,
            dgp=ns.dgp or ("tabular" if ns.config else "two-step"),
            theta=parse_floats(ns.theta, "theta"),
            delta=ns.delta,
            t=ns.t,
            summary=ns.summary,
            n=ns.n,
            seed=ns.seed,
            threads=ns.threads,
            out=ns.out,
            config=tuple(ns.config or ()),
            propensities=ns.propensities,
            x2=parse_floats(ns.x2, "x2") if ns.x2 is not None else DEFAULT_X2_GRID,
            suite=tuple(s.strip() for s in ns.suite.split(",")) if ns.suite else SUITES,
        )
        cfg.validate(x2_given=ns.x2)
        return cfg

    def validate(self, x2_given=None) -> None:
        if self.dgp not in BUILTIN_DGPS:
            raise ValidationError(f"unknown --dgp {self.dgp!r}; choose from {', '.join(BUILTIN_DGPS)}")
        if self.dgp == "tabular" and len(self.config) != 1 and self.command != "check":
            raise ValidationError("--dgp tabular needs exactly one --config path")
        for th in self.theta:
            if not 0.0 <= th <= 1.0 or math.isnan(th):
                raise ValidationError(f"theta={th} outside [0, 1]")
        if self.n < 1:
            raise ValidationError("--n must be at least 1")
        if self.threads < 1:
            raise ValidationError("--threads must be at least 1")
        if not 0 <= self.seed < 2**64:
            raise ValidationError("--seed must lie in [0, 2**64)")
        if self.delta < 1:
            raise ValidationError("--delta must be at least 1")
        if x2_given is not None and not self.x2:
            raise ValidationError("--x2 grid is empty")
        bad = [s for s in self.suite if s not in SUITES]
        if bad:
            raise ValidationError(f"unknown --suite entries {bad}")

    def echo(self) -> list[str]:
        """Config lines for the output header; execution-only options are left out so
        output does not depend on the thread count or the destination path."""
        out = []
        for key, value in asdict(self).items():
            if key in EXECUTION_ONLY:
                continue
            if isinstance(value, (tuple, list)):
                value = ",".join(fmt(v) if isinstance(v, float) else str(v) for v in value)
            out.append(f"{key}={'' if value is None else value}")
        return out


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route usage errors to exit code 1
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="excursion", description="Excursion effects: simulate, compute exactly, estimate.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--dgp", choices=BUILTIN_DGPS, default=None)
    p.add_argument("--theta", default=None, help="randomization probability; comma list for sweeps")
    p.add_argument("--delta", type=int, default=1)
    p.add_argument("--t", type=int, default=None, help="enrollment time (default T)")
    p.add_argument("--summary", default="none", help="none, h, or components like a1,x2")
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default=None)
    p.add_argument("--config", action="append", default=None, help="tabular DGP config path")
    p.add_argument("--propensities", choices=("known", "estimated"), default="known")
    p.add_argument("--x2", default=None, help="sweep-modifier: comma list of X_2 values")
    p.add_argument("--suite", default=None, help="check: comma list of " + ", ".join(SUITES))
    return p


def _single_theta(cfg: RunConfig, default: float = 0.5) -> float:
    if len(cfg.theta) > 1:
        raise ValidationError(f"{cfg.command} takes a single --theta")
    return cfg.theta[0] if cfg.theta else default


def _resolve_dgp(cfg: RunConfig):
    """(dgp, protocol) for the run; the protocol defaults to the DGP's own."""
    if cfg.dgp == "two-step":
        dgp = two_step_dgp(TwoStepParams(_single_theta(cfg)))
    elif cfg.dgp == "effect-modifier":
        dgp = effect_modifier_dgp(EffectModifierParams(theta=_single_theta(cfg)))
    else:
        dgp = load_tabular_dgp(Path(cfg.config[0]))
    protocol = dgp.default_protocol
    if cfg.dgp == "tabular" and cfg.theta:
        protocol = Protocol.constant(_single_theta(cfg), horizon=dgp.horizon)
    if protocol is None:
        raise ValidationError("the config has no [protocol t] tables and no --theta was given")
    return dgp, protocol


def _default_t(cfg: RunConfig, dgp) -> int:
    return dgp.horizon + 1 - cfg.delta if cfg.t is None else cfg.t


def cmd_simulate(cfg: RunConfig) -> list[str]:
    dgp, protocol = _resolve_dgp(cfg)
    data = simulate_sre(dgp, protocol, n=cfg.n, seed=cfg.seed, threads=cfg.threads)
    return data.to_csv().splitlines()


def cmd_oracle(cfg: RunConfig) -> list[str]:
    dgp, protocol = _resolve_dgp(cfg)
    spec = EstimandSpec(_default_t(cfg, dgp), cfg.delta, Summary.parse(cfg.summary))
    return excursion_blip(dgp, protocol, spec).to_csv().splitlines()


def _estimate(dgp, protocol, cfg: RunConfig, t: int, seed: int):
    data = simulate_sre(dgp, protocol, n=cfg.n, seed=seed, threads=cfg.threads)
    summary = Summary.parse(cfg.summary)
    features = summary_features(summary)
    names = ("intercept",) + tuple(features)
    return emulate_series(
        data,
        dgp.eligibility,
        cfg.delta,
        ExcursionModel(blip=names, nuisance=names),
        propensity_mode=cfg.propensities,
        protocol=protocol,
        features=features,
        times=[t],
    )


def cmd_estimate(cfg: RunConfig) -> list[str]:
    dgp, protocol = _resolve_dgp(cfg)
    result = _estimate(dgp, protocol, cfg, _default_t(cfg, dgp), cfg.seed)
    return result.to_csv().splitlines()


def cmd_sweep_theta(cfg: RunConfig) -> list[str]:
    """Closed form, oracle and estimate of the marginal excursion effect of A_2 over a theta grid.

    Every grid point reuses the same seed, so estimates share random numbers.
    """
    grid = cfg.theta or DEFAULT_THETA_GRID
    rows = ["theta,beta_closed_form,beta_oracle,beta_hat,se"]
    closed = []
    for theta in grid:
        dgp = two_step_dgp(TwoStepParams(theta))
        protocol = dgp.default_protocol
        beta_cf = two_step_closed_form_beta(theta)
        beta_or = excursion_blip(dgp, protocol, EstimandSpec(2, 1)).entries[()]
        if abs(beta_cf - beta_or) > 1e-9:
            raise NumericalError(f"closed form and oracle disagree at theta={theta}: {beta_cf} vs {beta_or}")
        if 0.0 < theta < 1.0:
            sub = RunConfig(**{**asdict(cfg), "summary": "none", "delta": 1})
            est = _estimate(dgp, protocol, sub, 2, cfg.seed)
            beta_hat, se = float(est.beta_hat[0]), float(est.beta_se[0])
        else:
            # one arm of the A_2 trial is empty, so the ratio cannot be estimated
            beta_hat = se = math.nan
        closed.append(beta_cf)
        rows.append(",".join(fmt(v) for v in (theta, beta_cf, beta_or, beta_hat, se)))
    root = 1.0 / (1.0 + math.e)
    bracket = [
        (grid[i], grid[i + 1]) for i in range(len(grid) - 1) if closed[i] <= 0 <= closed[i + 1] or closed[i] >= 0 >= closed[i + 1]
    ]
    tail = f"# sign_change_at={fmt(root)}"
    if bracket:
        tail += " root_bracket=" + ";".join(f"[{fmt(a)},{fmt(b)}]" for a, b in bracket)
    else:
        tail += " root_bracket=none-in-grid"
    return rows + [tail]


def cmd_sweep_modifier(cfg: RunConfig) -> list[str]:
    thetas = cfg.theta or DEFAULT_MODIFIER_THETAS
    if not cfg.x2:
        raise ValidationError("--x2 grid is empty")
    rows = ["theta,x2,beta,slope_at_0"]
    for theta in thetas:
        params = EffectModifierParams(theta=theta)
        slope = central_slope(lambda x: secondary_excursion_beta(x, params))
        betas = secondary_excursion_beta(np.asarray(cfg.x2), params)
        for x, b in zip(cfg.x2, np.atleast_1d(betas)):
            rows.append(",".join(fmt(v) for v in (theta, x, b, slope)))
    return rows


def cmd_check(cfg: RunConfig) -> tuple[list[str], int]:
    report = run_batteries(seed=cfg.seed, suites=cfg.suite, extra_configs=cfg.config)
    lines = report.lines()
    if not report.passed:
        return lines, EXIT_PROPERTY
    if report.load_errors:
        return lines, EXIT_VALIDATION
    return lines, EXIT_OK


HANDLERS = {
    "simulate": cmd_simulate,
    "oracle": cmd_oracle,
    "estimate": cmd_estimate,
    "sweep-theta": cmd_sweep_theta,
    "sweep-modifier": cmd_sweep_modifier,
}


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
        sys.stdout.flush()
    else:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        ns = build_parser().parse_args(argv)
        cfg = RunConfig.from_args(ns)
        if cfg.command == "check":
            lines, code = cmd_check(cfg)
        else:
            lines, code = HANDLERS[cfg.command](cfg), EXIT_OK
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    header = [f"# {line}" for line in cfg.echo()]
    _emit("\n".join(header + lines) + "\n", cfg.out)
    return code


if __name__ == "__main__":
    sys.exit(main())
