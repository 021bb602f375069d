from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from excursion.errors import ValidationError
from excursion.oracle import counterfactual_mean
from excursion.probe import out_of_range_targets, random_admissible_targets, variation_independence_probe
from excursion.trajectories import Regime


def test_zero_targets_are_realized_by_the_uniform_law():
    result = variation_independence_probe({(m, 3 - m): 0.0 for m in range(3)})
    assert result.feasible and result.max_residual <= 1e-12
    assert set(result.outcome_probs.values()) == {0.5}


def test_certificate_for_excessive_treated_mean():
    result = variation_independence_probe({(2, 1): math.log(5.0)}, baseline=0.5)
    assert result.status == "infeasible" and result.dgp is None
    assert result.certificate["implied_mean"] == pytest.approx(2.5, abs=1e-12)
    assert result.certificate["path"] == (0, 0, 1)


def test_baseline_outside_unit_interval_is_infeasible():
    result = variation_independence_probe({(2, 1): 0.1}, baseline=1.0)
    assert result.status == "infeasible"


@pytest.mark.parametrize("targets", [{(1, 1): 0.2}, {(3, 0): 0.2}, {(2, 1): math.nan}])
def test_invalid_targets(targets):
    with pytest.raises(ValidationError):
        variation_independence_probe(targets)


def test_model_size_limits():
    with pytest.raises(ValidationError):
        variation_independence_probe({}, model_size=4)


def test_evaluation_budget_exhaustion_is_reported():
    result = variation_independence_probe({(m, 3 - m): 0.8 for m in range(3)}, baseline=0.05, max_nfev=1)
    assert result.status == "not-converged" and result.max_residual > 1e-6


def test_pinned_baseline_fixes_every_static_path_mean():
    gammas = (0.4, -0.7, 0.3)
    result = variation_independence_probe({(m, 3 - m): g for m, g in enumerate(gammas)}, baseline=0.2)
    assert result.feasible
    for path in itertools.product((0, 1), repeat=3):
        mean = counterfactual_mean(result.dgp, Regime.static(path), 3)
        expected = 0.2 * math.exp(sum(g * a for g, a in zip(gammas, path)))
        assert mean == pytest.approx(expected, abs=1e-6)


def test_out_of_range_sets_all_certified():
    sets = out_of_range_targets()
    assert len(sets) == 5
    for targets, baseline in sets:
        result = variation_independence_probe(targets, baseline=baseline)
        assert result.status == "infeasible" and result.certificate["implied_mean"] > 1


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32), size=st.integers(1, 2))
def test_random_admissible_targets_are_realizable(seed, size):
    targets, baseline = random_admissible_targets(np.random.default_rng(seed), size)
    result = variation_independence_probe(targets, model_size=size, baseline=baseline)
    assert result.feasible and result.max_residual <= 1e-6
