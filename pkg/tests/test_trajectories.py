from __future__ import annotations

import dataclasses
import math
from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_dgp
from excursion.dgp import effect_modifier_dgp, two_step_dgp
from excursion.errors import PositivityError, UsageError, ValidationError
from excursion.trajectories import (
    Dataset,
    EligibilitySpec,
    History,
    Protocol,
    Regime,
    Summary,
    Trajectory,
    history_at,
    regime_action,
    simulate_sre,
    subject_uniforms,
    uniform_chunk,
)


@pytest.fixture(scope="module")
def big_two_step():
    dgp = two_step_dgp(0.5)
    return dgp, simulate_sre(dgp, dgp.default_protocol, n=100_000, seed=2024)


def _traj(a=(0, 1, 0), x=(None,) * 4, y=(None, None, None, 1)):
    return Trajectory(covariates=x, treatments=a, availability=(0, 1, 1), eligibility=(0, 1, 1), outcomes=y)


def test_history_at_time_zero_has_empty_past():
    h = history_at(_traj(x=(0.5, None, None, None)), 0)
    assert h.past_treatments == ()
    assert h.past_covariates == (0.5,)


def test_history_at_two_step_prefix():
    h = history_at(_traj(a=(0, 1, 0)), 2)
    assert h.past_treatments == (0, 1)
    assert h.last_treatment == 1


def test_history_at_out_of_range():
    with pytest.raises(ValidationError):
        history_at(_traj(), 4)
    with pytest.raises(ValidationError):
        history_at(_traj(), -1)


def test_history_is_a_frozen_copy():
    traj = _traj()
    h = history_at(traj, 2)
    with pytest.raises(dataclasses.FrozenInstanceError):
        h.time = 0  # type: ignore[misc]
    assert isinstance(h.past_treatments, tuple)


def test_history_length_validation():
    with pytest.raises(ValidationError):
        History(1, (), (None,), (None,))


def test_trajectory_rejects_treatment_when_unavailable():
    with pytest.raises(ValidationError):
        Trajectory((None,) * 3, (1, 0), (0, 1), (0, 1), (None,) * 3)


def test_eligibility_requires_availability():
    spec = EligibilitySpec(availability_rule=lambda h: h.time != 1, trial_eligibility_rule=lambda h: 1)
    h1 = History(1, (0,), (None, None), (None, None))
    assert spec.availability(h1) == 0 and spec.eligible(h1) == 0
    recent = EligibilitySpec().excluding_recent_treatment()
    assert recent.eligible(History(1, (1,), (None, None), (None, None))) == 0
    assert recent.eligible(History(1, (0,), (None, None), (None, None))) == 1


def test_sample_mean_of_first_treatment(big_two_step):
    _, data = big_two_step
    assert abs(data.treatments()[:, 1].mean() - 0.5) <= 0.005


def test_unavailable_implies_untreated(big_two_step):
    _, data = big_two_step
    for tr in data.trajectories[:5000]:
        assert all(a == 0 for a, s in zip(tr.treatments, tr.availability) if s == 0)


def _assignment_cells(dgp, data):
    cells = defaultdict(lambda: [0, 0, 0.0])
    for tr in data:
        for t in range(dgp.horizon + 1):
            h = history_at(tr, t)
            cell = cells[(t, h.past_treatments, h.past_covariates)]
            cell[0] += 1
            cell[1] += tr.treatments[t]
            cell[2] = dgp.default_protocol.probability(h, tr.availability[t])
    return [(n, k / n, p) for n, k, p in cells.values() if n >= 500]


def test_assignment_frequencies_track_protocol(big_two_step):
    dgp, data = big_two_step
    visited = _assignment_cells(dgp, data)
    assert len(visited) == 4  # one cell at t=0 and t=1, two at t=2 (A_0 is always 0)
    assert max(abs(freq - p) for _, freq, p in visited) <= 0.02


def test_assignment_frequencies_standardized_on_random_dgp():
    # Many cells have only a few hundred visits, so compare in standard-error units.
    dgp = random_dgp(11, horizon=2)
    data = simulate_sre(dgp, dgp.default_protocol, n=100_000, seed=5)
    visited = _assignment_cells(dgp, data)
    z = [abs(f - p) / math.sqrt(max(p * (1 - p), 1e-12) / n) for n, f, p in visited]
    assert len(z) > 20 and max(z) <= 4.0


def test_zero_protocol_gives_untreated_baseline():
    dgp = two_step_dgp(0.5)
    data = simulate_sre(dgp, Protocol.constant(0.0, horizon=2), n=20_000, seed=3)
    assert data.treatments().sum() == 0
    y = np.array([tr.outcomes[3] for tr in data])
    assert abs(y.mean() - 0.25) <= 4 * math.sqrt(0.25 * 0.75 / len(y))


def test_availability_forces_zero_treatment():
    dgp = two_step_dgp(0.5)
    data = simulate_sre(dgp, dgp.default_protocol, EligibilitySpec.unavailable_at([0, 2]), n=2000, seed=1)
    assert data.treatments()[:, 2].sum() == 0


def test_outcome_cells_match_generating_means(big_two_step):
    _, data = big_two_step
    a = data.treatments()
    y = np.array([tr.outcomes[3] for tr in data])
    for a1 in (0, 1):
        for a2 in (0, 1):
            sel = (a[:, 1] == a1) & (a[:, 2] == a2)
            q = math.exp(-a2 + 2 * a1 * a2) / 4
            assert abs(y[sel].mean() - q) <= 3 * math.sqrt(q * (1 - q) / sel.sum())


def test_bad_protocol_and_horizon():
    dgp = two_step_dgp(0.5)
    with pytest.raises(ValidationError):
        simulate_sre(dgp, Protocol(lambda h: 1.5, horizon=2), n=5)
    with pytest.raises(ValidationError):
        simulate_sre(dgp, Protocol.constant(0.5, horizon=3), n=5)
    with pytest.raises(ValidationError):
        simulate_sre(dgp, dgp.default_protocol, n=0)
    with pytest.raises(PositivityError):
        simulate_sre(dgp, Protocol(lambda h: 0.0, horizon=2, positive=True), n=5)


def test_regime_actions():
    h = History(2, (0, 1), (None,) * 3, (None,) * 3)
    assert regime_action(Regime.static((1, 0, 0), start_time=2), h) == 1
    assert regime_action(Regime.carry_forward(), h) == 1
    assert regime_action(Regime.never(), h) == 0
    coin = Regime.random_policy(lambda _: 0.3)
    with pytest.raises(UsageError):
        regime_action(coin, h)
    assert regime_action(coin, h, draw=0.1) == 1
    assert regime_action(coin, h, draw=0.9) == 0
    with pytest.raises(ValidationError):
        regime_action(Regime.static((1,), start_time=3), h)


def test_summary_parsing():
    assert Summary.parse("none").components == ()
    assert Summary.parse("h").identity
    s = Summary.parse("a1, x2")
    assert s.components == (("a", 1), ("x", 2)) and s.name == "a1,x2"
    h = History(2, (0, 1), (None, None, 0.5), (None,) * 3)
    assert s(h) == (1, 0.5)
    assert s.format_value(s(h)) == "a1=1;x2=0.5"
    with pytest.raises(ValidationError):
        Summary.parse("z3")


def test_chunked_uniforms_match_per_subject():
    block = uniform_chunk(99, 5, 12, 2)
    for i, s in enumerate(range(5, 12)):
        assert np.array_equal(block[i], subject_uniforms(99, s, 2))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**63), n=st.integers(1, 40), threads=st.integers(2, 6))
def test_simulation_independent_of_thread_count(seed, n, threads):
    dgp = effect_modifier_dgp()
    one = simulate_sre(dgp, dgp.default_protocol, n=n, seed=seed, threads=1)
    many = simulate_sre(dgp, dgp.default_protocol, n=n, seed=seed, threads=threads)
    assert one.to_csv() == many.to_csv()


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32), n=st.integers(1, 30), gaussian=st.booleans())
def test_csv_round_trip(seed, n, gaussian):
    dgp = effect_modifier_dgp() if gaussian else random_dgp(seed)
    data = simulate_sre(dgp, dgp.default_protocol, n=n, seed=seed)
    text = data.to_csv(comments=["seed=1"])
    back = Dataset.from_csv(text)
    assert back == data
    assert text.splitlines()[1] == "subject,t,x,a,istar,i,y"


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32))
def test_one_sided_compliance_on_random_dgps(seed):
    dgp = random_dgp(seed)
    data = simulate_sre(dgp, dgp.default_protocol, n=50, seed=seed)
    for tr in data:
        for t, (a, s, e) in enumerate(zip(tr.treatments, tr.availability, tr.eligibility)):
            assert not (s == 0 and a == 1)
            assert e <= s
            assert e == dgp.eligibility.eligible(history_at(tr, t))
