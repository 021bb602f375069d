"""Excursion effect of A_2 as a function of a continuous covariate X_2.

For each theta the table also checks the exact curve against the
quadrature oracle at the Gauss-Hermite nodes.

    python3 scripts/modifier_sweep.py --theta 0.05,0.5,0.95
"""

from __future__ import annotations

import argparse

import numpy as np

from excursion.dgp import EffectModifierParams, central_slope, effect_modifier_dgp, secondary_excursion_beta
from excursion.oracle import EstimandSpec, excursion_blip
from excursion.trajectories import Summary


def run() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--theta", default="0.05,0.5,0.95")
    p.add_argument("--x2", default="-2,-1,0,1,2")
    args = p.parse_args()
    xs = np.array([float(v) for v in args.x2.split(",")])
    print("theta,x2,beta,slope_at_0,max_oracle_gap")
    for theta in (float(v) for v in args.theta.split(",")):
        params = EffectModifierParams(theta=theta)
        dgp = effect_modifier_dgp(params)
        table = excursion_blip(dgp, dgp.default_protocol, EstimandSpec(2, 1, Summary.parse("x2")))
        nodes = np.array(list(table.entries))
        gap = np.max(np.abs(np.array(list(table.entries.values())) - secondary_excursion_beta(nodes, params)))
        slope = central_slope(lambda x: secondary_excursion_beta(x, params))
        for x, b in zip(xs, secondary_excursion_beta(xs, params)):
            print(f"{theta:.9g},{x:.9g},{b:.9g},{slope:.9g},{gap:.3g}")


if __name__ == "__main__":
    run()
