"""Excursion effects in sequentially randomized experiments.

Modules: ``trajectories`` (data model and SRE simulator), ``dgp`` and
``tabular`` (data-generating processes), ``oracle`` (exact g-formula
estimands and property checks), ``probe`` (variation-independence search),
``estimator`` (series-of-trials emulation and weighted log-link fits),
``batteries`` (randomized property checks) and ``cli``.
"""

__version__ = "0.1.0"

from .dgp import (
    Dgp,
    EffectModifierParams,
    TwoStepParams,
    effect_modifier_dgp,
    secondary_excursion_beta,
    two_step_closed_form_beta,
    two_step_dgp,
)
from .estimator import (
    EstimationResult,
    ExcursionModel,
    PersonTrialTable,
    PropensityModel,
    compute_weights,
    emulate_series,
    fit_excursion_model,
    fit_propensities,
    stack_person_trials,
)
from .oracle import (
    EstimandSpec,
    check_null_preservation,
    check_weighted_average,
    continuous_vs_never_blip,
    counterfactual_mean,
    excursion_blip,
    hr_msm_surface,
    regime_blip,
)
from .probe import variation_independence_probe
from .tabular import load_tabular_dgp
from .trajectories import Dataset, EligibilitySpec, History, Protocol, Regime, Summary, Trajectory, simulate_sre
