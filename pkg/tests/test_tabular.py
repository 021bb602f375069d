from __future__ import annotations

import itertools
from pathlib import Path

import pytest

from excursion.dgp import two_step_dgp
from excursion.errors import IncompleteTableError, ParseError, ProbabilitySumError, ValidationError
from excursion.oracle import EstimandSpec, continuous_vs_never_blip, counterfactual_mean, excursion_blip
from excursion.tabular import load_tabular_dgp, load_tabular_protocol, parse_tabular
from excursion.trajectories import Regime, Summary, simulate_sre

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

MINIMAL = """
horizon = 1
[outcome 2]
history = *; prob = 0.5, 0.5
"""


def test_loaded_two_step_matches_builtin():
    loaded = load_tabular_dgp(CONFIGS / "two_step.dgp")
    builtin = two_step_dgp(0.5)
    proto_l, proto_b = loaded.default_protocol, builtin.default_protocol
    for path in itertools.product((0, 1), repeat=3):
        if path[0] == 1:
            continue
        m_l = counterfactual_mean(loaded, Regime.static(path), 3)
        m_b = counterfactual_mean(builtin, Regime.static(path), 3)
        assert abs(m_l - m_b) <= 1e-12
    for summary in (Summary(), Summary.parse("a1"), Summary.parse("h")):
        spec = EstimandSpec(2, 1, summary)
        t_l = excursion_blip(loaded, proto_l, spec)
        t_b = excursion_blip(builtin, proto_b, spec)
        assert t_l.entries.keys() == t_b.entries.keys()
        assert max(abs(t_l[k] - t_b[k]) for k in t_l.entries) <= 1e-12


def test_loaded_two_step_simulates_like_builtin():
    loaded = load_tabular_dgp(CONFIGS / "two_step.dgp")
    builtin = two_step_dgp(0.5)
    a = simulate_sre(loaded, loaded.default_protocol, n=500, seed=4)
    b = simulate_sre(builtin, builtin.default_protocol, n=500, seed=4)
    assert a.to_csv() == b.to_csv()


def test_row_sum_violation():
    text = MINIMAL.replace("0.5, 0.5", "0.4, 0.5")
    with pytest.raises(ProbabilitySumError):
        parse_tabular(text)


def test_probability_outside_unit_interval():
    with pytest.raises(ValidationError):
        load_tabular_dgp(CONFIGS / "faulty.dgp")


def test_null_config_accepted_and_has_no_effect():
    dgp = load_tabular_dgp(CONFIGS / "null.dgp")
    for t in (0, 1):
        table = continuous_vs_never_blip(dgp, dgp.default_protocol, EstimandSpec(t, 2 - t, Summary.parse("h")))
        assert max(abs(v) for v in table.entries.values()) <= 1e-15


@pytest.mark.parametrize(
    "text,error",
    [
        ("[outcome 2]\nhistory=*; prob=0.5,0.5\n", ParseError),  # no horizon
        ("horizon = 1\n[weird 1]\n", ParseError),
        ("horizon = 1\nfoo = 2\n", ParseError),
        ("horizon = one\n", ParseError),
        ("horizon = 1\n[outcome 2]\nhistory = b1=0; prob = 0.5, 0.5\n", ParseError),
        ("horizon = 1\n[outcome 2]\nhistory = *\n", ParseError),
        ("horizon = 1\n[outcome 2]\nhistory = *; prob = 0.5, x\n", ParseError),
        ("horizon = 1\n[outcome 2]\nhistory = *; prob = 0.2, 0.3, 0.5\n", ParseError),
        ("horizon = 1\n[outcome 2]\nhistory=*; prob=1,0\n[outcome 2]\nhistory=*; prob=1,0\n", ParseError),
        ("horizon = 1\n[outcome 2]\nhistory = a1=1; prob = 0.5, 0.5\n", IncompleteTableError),
        ("horizon = 1\n[outcome 2]\n", IncompleteTableError),
        ("horizon = 1\n[outcome 2]\nhistory = a2=1; prob = 0.5, 0.5\nhistory=*; prob=1,0\n", ValidationError),
        ("horizon = 1\n[outcome 2]\nhistory = x1=1; prob = 0.5, 0.5\nhistory=*; prob=1,0\n", ValidationError),
        ("horizon = 1\n[outcome 5]\nhistory=*; prob=1,0\n", ValidationError),
        ("horizon = 1\n[availability 0]\nhistory=*; prob=0.5,0.5\n", ValidationError),
        ("horizon = 1\n[covariate 1]\nhistory = x1=0; prob = 0.5, 0.5\nhistory=*; prob=1,0\n", ValidationError),
    ],
)
def test_malformed_configs(text, error):
    with pytest.raises(error):
        load_tabular_dgp(text)


def test_covariate_support_and_first_match():
    text = """
horizon = 1
[covariate 1]
support = 0, 1, 2
history = a0=1; prob = 0, 0, 1
history = *;    prob = 0.2, 0.3, 0.5
[outcome 2]
history = x1=2; prob = 0.1, 0.9
history = *;    prob = 0.9, 0.1
"""
    dgp = load_tabular_dgp(text)
    law = dgp.covariate_law(1, (1,), (None,), (None,))
    assert law.values == (0.0, 1.0, 2.0) and law.probs == (0.0, 0.0, 1.0)
    assert counterfactual_mean(dgp, Regime.static((1, 0)), 2) == pytest.approx(0.9, abs=1e-15)
    assert counterfactual_mean(dgp, Regime.static((0, 1)), 2) == pytest.approx(0.5 * 0.9 + 0.5 * 0.1, abs=1e-15)


def test_protocol_tables():
    assert load_tabular_protocol(MINIMAL) is None
    partial = MINIMAL + "[protocol 0]\nhistory=*; prob=0.5,0.5\n"
    with pytest.raises(IncompleteTableError):
        load_tabular_protocol(partial)
    full = partial + "[protocol 1]\nhistory = a0=1; prob=0.2,0.8\nhistory=*; prob=0.6,0.4\n"
    proto = load_tabular_protocol(full)
    data = simulate_sre(load_tabular_dgp(full), proto, n=20, seed=0)
    assert len(data) == 20


def test_comments_and_path_input(tmp_path):
    path = tmp_path / "c.dgp"
    path.write_text("# comment\n" + MINIMAL + "  # trailing\n", encoding="utf-8")
    assert load_tabular_dgp(path).horizon == 1
