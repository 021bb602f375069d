"""Coverage of 95% intervals for the marginal excursion effect at theta = 0.5.

    python3 scripts/coverage.py --reps 200 --n 20000
"""

from __future__ import annotations

import argparse

from excursion.dgp import two_step_closed_form_beta, two_step_dgp
from excursion.estimator import emulate_series
from excursion.trajectories import EligibilitySpec, simulate_sre


def run() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--theta", type=float, default=0.5)
    p.add_argument("--reps", type=int, default=50)
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--seed", type=int, default=1000)
    args = p.parse_args()
    dgp = two_step_dgp(args.theta)
    truth = two_step_closed_form_beta(args.theta)
    elig = EligibilitySpec.unavailable_at([0])
    covered = {"known": 0, "estimated": 0}
    print("rep,mode,beta_hat,se,covered")
    for rep in range(args.reps):
        data = simulate_sre(dgp, dgp.default_protocol, elig, n=args.n, seed=args.seed + rep)
        for mode in covered:
            res = emulate_series(data, elig, 1, propensity_mode=mode, protocol=dgp.default_protocol, times=[2])
            beta, se = float(res.beta_hat[0]), float(res.beta_se[0])
            hit = abs(beta - truth) <= 1.96 * se
            covered[mode] += hit
            print(f"{rep},{mode},{beta:.9g},{se:.9g},{int(hit)}")
    for mode, c in covered.items():
        print(f"# {mode}: {c}/{args.reps} covered, truth={truth:.9g}")


if __name__ == "__main__":
    run()
